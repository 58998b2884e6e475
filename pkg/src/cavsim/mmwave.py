"""mm-wave cellular stack: strongest-cell association, per-cell round-robin
TDMA scheduling in both directions, HARQ with chase combining and base-station
relay for V2V warnings.
"""

from __future__ import annotations

import enum
import math
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Callable, Iterable

from . import channel as ch
from .engine import SimTime, Simulator
from .mobility import MobilityModel
from .packets import Frame


@dataclass
class MmwaveParams:
    slot_us: int = 125
    slot_payload_bits: int = 64_000
    max_retx: int = 3
    harq_rtt_slots: int = 4
    threshold_db: float = 5.0
    processing_delay_us: int = 1_000
    backhaul_delay_us: int = 10_000
    association_period_us: int = 100_000
    blockage: bool = True
    rate_block: float = 0.1
    rate_clear: float = 0.4
    fading: bool = False
    fading_m: float = 1.5
    tx_power_dbm: float = 30.0
    tx_gain_dbi: float = 25.0
    rx_gain_dbi: float = 25.0
    frequency_hz: float = 28e9
    bandwidth_hz: float = 1e9
    noise_figure_db: float = 5.0
    los_alpha: float = 61.4
    los_beta: float = 2.0
    nlos_alpha: float = 72.0
    nlos_beta: float = 2.92

    @property
    def budget(self) -> ch.LinkBudget:
        return ch.LinkBudget(
            self.tx_power_dbm, self.tx_gain_dbi, self.rx_gain_dbi,
            self.frequency_hz, self.bandwidth_hz, self.noise_figure_db,
        )

    @property
    def path_loss_model(self) -> ch.MmwavePathLoss:
        return ch.MmwavePathLoss(self.los_alpha, self.los_beta, self.nlos_alpha, self.nlos_beta)

    @property
    def slot_payload_bytes(self) -> int:
        return self.slot_payload_bits // 8


@dataclass(frozen=True)
class BsAttachment:
    ue: int
    bs: int
    attached_at: SimTime


@dataclass
class SchedulerState:
    bs: int
    ring: list[int] = field(default_factory=list)
    slot: float = 125e-6  # seconds
    cursor: int = 0
    grants: Counter = field(default_factory=Counter)

    def add(self, ue: int) -> None:
        if ue not in self.ring:
            self.ring.append(ue)

    def remove(self, ue: int) -> None:
        if ue not in self.ring:
            return
        i = self.ring.index(ue)
        self.ring.pop(i)
        if i < self.cursor:
            self.cursor -= 1
        if self.cursor >= len(self.ring):
            self.cursor = 0


def schedule_slot(s: SchedulerState, backlogged: Callable[[int], bool] | Iterable[int] | None = None) -> int | None:
    """Grant the next UE in ring order that has traffic queued.

    ``backlogged`` is a predicate, a collection of backlogged UEs, or None for
    "everyone is backlogged".
    """
    n = len(s.ring)
    if n == 0:
        return None
    if backlogged is None:
        has = None
    elif callable(backlogged):
        has = backlogged
    else:
        pool = set(backlogged)
        has = pool.__contains__
    for step in range(n):
        i = (s.cursor + step) % n
        ue = s.ring[i]
        if has is None or has(ue):
            s.cursor = (i + 1) % n
            s.grants[ue] += 1
            return ue
    return None


class HarqOutcome(enum.Enum):
    DELIVERED = "Delivered"
    RETRANSMIT = "Retransmit"
    FAILED = "Failed"


@dataclass(eq=False)
class HarqProcess:
    frames: list
    ue: int = -1
    attempts: int = 0
    accumulated_sinr: float = 0.0  # linear
    next_attempt_at: SimTime = 0
    first_attempt_at: SimTime | None = None
    history: list = field(default_factory=list)  # per-attempt sinr_db


def harq_transmit(p: HarqProcess, s_attempt: ch.SinrSample, threshold: float = 5.0, max_retx: int = 3) -> HarqOutcome:
    """One HARQ attempt with chase combining (linear SINR accumulation)."""
    if p.attempts >= max_retx + 1:
        raise ValueError("HARQ process has no attempts left")
    p.attempts += 1
    p.accumulated_sinr += 10.0 ** (s_attempt.sinr_db / 10.0)
    p.history.append(s_attempt.sinr_db)
    combined = 10.0 * math.log10(p.accumulated_sinr) if p.accumulated_sinr > 0 else ch.SINR_FLOOR_DB
    if combined >= threshold:
        return HarqOutcome.DELIVERED
    if p.attempts < max_retx + 1:
        return HarqOutcome.RETRANSMIT
    return HarqOutcome.FAILED


# callback(frame, enqueued_at, process, t_end, sinr_sample_or_None, delivered)
Done = Callable[[Frame, SimTime, "HarqProcess | None", SimTime, "ch.SinrSample | None", bool], None]


class _Direction:
    """One base station's scheduler for one link direction."""

    def __init__(self, stack: "MmwaveStack", bs: int, name: str) -> None:
        self.stack = stack
        self.sim = stack.sim
        self.bs = bs
        self.name = name
        p = stack.params
        self.slot = p.slot_us
        self.capacity = p.slot_payload_bytes
        self.rtt = p.harq_rtt_slots * p.slot_us
        self.state = SchedulerState(bs, slot=p.slot_us / 1e6)
        self.queues: dict[int, deque] = {}
        self.harq: deque[HarqProcess] = deque()
        self.wake = None
        self.last_slot = -p.slot_us
        self.slots_used = 0

    def _has_traffic(self, ue: int) -> bool:
        q = self.queues.get(ue)
        return bool(q)

    def enqueue(self, ue: int, frame: Frame, done: Done) -> None:
        q = self.queues.get(ue)
        if q is None:
            q = self.queues[ue] = deque()
        q.append((frame, self.sim.now, done))
        self._arm(self.sim.now)

    def _arm(self, earliest: SimTime) -> None:
        slot = self.slot
        t = max(-(-earliest // slot) * slot, self.last_slot + slot)
        if self.wake is not None and not self.wake.cancelled:
            if self.wake.fire_at <= t:
                return
            self.wake.cancel()
        self.wake = self.sim.at(t, self._on_slot)

    def _on_slot(self) -> None:
        sim = self.sim
        t = sim.now
        self.wake = None
        self.last_slot = t
        proc = None
        if self.harq and self.harq[0].next_attempt_at <= t:
            proc = self.harq.popleft()
        else:
            ue = schedule_slot(self.state, self._has_traffic)
            if ue is not None:
                q = self.queues[ue]
                items = [q.popleft()]
                used = items[0][0].payload_bytes
                while q and used + q[0][0].payload_bytes <= self.capacity:
                    used += q[0][0].payload_bytes
                    items.append(q.popleft())
                proc = HarqProcess(items, ue=ue)
        if proc is not None:
            self.slots_used += 1
            self._attempt(proc, t)
        if any(self.queues.values()):
            self._arm(t + self.slot)
        elif self.harq:
            self._arm(self.harq[0].next_attempt_at)

    def _attempt(self, proc: HarqProcess, t: SimTime) -> None:
        stack = self.stack
        if proc.first_attempt_at is None:
            proc.first_attempt_at = t
        s = stack.link_sinr(proc.ue, self.bs)
        outcome = harq_transmit(proc, s, stack.params.threshold_db, stack.params.max_retx)
        stack.harq_attempts[proc.attempts] += 1
        t_end = t + self.slot
        if outcome is HarqOutcome.DELIVERED:
            for frame, enq, done in proc.frames:
                done(frame, enq, proc, t_end, s, True)
        elif outcome is HarqOutcome.RETRANSMIT:
            proc.next_attempt_at = t + self.rtt
            self.harq.append(proc)
        else:
            for frame, enq, done in proc.frames:
                done(frame, enq, proc, t_end, s, False)

    def drop_ue(self, ue: int, *, keep_queue: bool = False) -> deque | None:
        """Remove a UE; fail its HARQ processes and (unless kept) its queue."""
        t = self.sim.now
        self.state.remove(ue)
        if self.harq:
            kept = deque()
            for proc in self.harq:
                if proc.ue == ue:
                    for frame, enq, done in proc.frames:
                        done(frame, enq, proc, t, None, False)
                else:
                    kept.append(proc)
            self.harq = kept
        q = self.queues.pop(ue, None)
        if keep_queue:
            return q
        for frame, enq, done in q or ():
            done(frame, enq, None, t, None, False)
        return None

    def adopt(self, ue: int, q: deque | None) -> None:
        self.state.add(ue)
        if q:
            self.queues.setdefault(ue, deque()).extend(q)
            self._arm(self.sim.now)


class _Cell:
    def __init__(self, stack: "MmwaveStack", bs: int) -> None:
        self.bs = bs
        self.ul = _Direction(stack, bs, "ul")
        self.dl = _Direction(stack, bs, "dl")


@dataclass
class _Ue:
    node: int
    bs: int | None = None
    attached_at: SimTime = 0
    rx_mw: dict = field(default_factory=dict)  # bs -> mean received power, mW
    links: dict = field(default_factory=dict)  # bs -> LosState
    sinr: dict = field(default_factory=dict)  # bs -> cached SinrSample (no fading)


class MmwaveStack:
    """All base stations and attached UEs of one run."""

    def __init__(self, sim: Simulator, mobility: MobilityModel, params: MmwaveParams | None = None,
                 base_stations: Iterable[int] = ()) -> None:
        self.sim = sim
        self.mobility = mobility
        self.params = params or MmwaveParams()
        self.budget = self.params.budget
        self.pl_model = self.params.path_loss_model
        self.noise_mw = ch.dbm_to_mw(self.budget.noise_dbm)
        self.cells = {bs: _Cell(self, bs) for bs in base_stations}
        if not self.cells:
            raise ValueError("mm-wave stack needs at least one base station")
        self.ues: dict[int, _Ue] = {}
        self.handovers: list[tuple[SimTime, int, int | None, int]] = []
        self.harq_attempts: Counter = Counter()
        self._ticker = None
        self._rng_block = sim.rng("mmwave.blockage")
        self._rng_fading = sim.rng("mmwave.fading")

    # association -----------------------------------------------------------

    def _refresh_links(self, u: _Ue, t: SimTime, step: bool) -> None:
        p = self.params
        pos = self.mobility.position_at(u.node, t)
        if pos is None:
            return
        dt = p.association_period_us / 1e6
        for bs in self.cells:
            bpos = self.mobility.position_at(bs, t)
            d = math.hypot(pos[0] - bpos[0], pos[1] - bpos[1])
            link = u.links.get(bs)
            if link is None:
                if p.blockage:
                    link = ch.LosState(ch.LOS, p.rate_block, p.rate_clear)
                    if self._rng_block.random() >= link.stationary_los:
                        link.state = ch.NLOS
                else:
                    link = ch.LosState(ch.LOS, 0.0, 0.0)
                u.links[bs] = link
            elif step and p.blockage:
                ch.blockage_step(link, dt, self._rng_block)
            pl = ch.mmwave_path_loss(d, link.los, self.pl_model)
            mw = ch.dbm_to_mw(ch.received_power(self.budget, pl))
            u.rx_mw[bs] = mw
            u.sinr[bs] = ch.sinr(mw, 0.0, self.noise_mw)

    def associate(self, ue: int, t: SimTime | None = None) -> BsAttachment:
        """Attach ``ue`` to the base station with the highest expected received power."""
        t = self.sim.now if t is None else t
        u = self.ues.get(ue)
        if u is None:
            u = self.ues[ue] = _Ue(ue)
            self._refresh_links(u, t, step=False)
        best = max(sorted(u.rx_mw), key=lambda b: u.rx_mw[b]) if u.rx_mw else next(iter(self.cells))
        if best != u.bs:
            old = u.bs
            q = None
            if old is not None:
                q = self.cells[old].ul.drop_ue(ue, keep_queue=True)
                self.cells[old].dl.drop_ue(ue)
            self.cells[best].ul.adopt(ue, q)
            self.cells[best].dl.adopt(ue, None)
            u.bs = best
            u.attached_at = t
            self.handovers.append((t, ue, old, best))
        return BsAttachment(ue, u.bs, u.attached_at)

    def attach(self, ue: int) -> BsAttachment:
        att = self.associate(ue, self.sim.now)
        if self._ticker is None:
            period = self.params.association_period_us
            first = -(-self.sim.now // period) * period
            if first == self.sim.now:
                first += period
            self._ticker = self.sim.at(first, self._tick)
        return att

    def detach(self, ue: int) -> None:
        u = self.ues.pop(ue, None)
        if u is None or u.bs is None:
            return
        self.cells[u.bs].ul.drop_ue(ue)
        self.cells[u.bs].dl.drop_ue(ue)

    def serving(self, ue: int) -> int | None:
        u = self.ues.get(ue)
        return None if u is None else u.bs

    def _tick(self) -> None:
        t = self.sim.now
        for ue in sorted(self.ues):
            u = self.ues[ue]
            self._refresh_links(u, t, step=True)
            self.associate(ue, t)
        self._ticker = self.sim.after(self.params.association_period_us, self._tick) if self.ues else None

    def link_sinr(self, ue: int, bs: int) -> ch.SinrSample:
        """SINR of one attempt on the ue<->bs link; I=0 under per-cell TDMA."""
        u = self.ues.get(ue)
        if u is None or u.bs != bs:
            return ch.SinrSample(0.0, 0.0, self.noise_mw, ch.SINR_FLOOR_DB)
        if not self.params.fading:
            return u.sinr[bs]
        g = ch.nakagami_gain_m(self._rng_fading, self.params.fading_m)
        return ch.sinr(u.rx_mw[bs] * float(g), 0.0, self.noise_mw)

    # traffic -----------------------------------------------------------------

    def send_uplink(self, ue: int, frame: Frame, done: Done) -> None:
        u = self.ues.get(ue)
        if u is None or u.bs is None:
            done(frame, self.sim.now, None, self.sim.now, None, False)
            return
        self.cells[u.bs].ul.enqueue(ue, frame, done)

    def send_downlink(self, bs: int, ue: int, frame: Frame, done: Done) -> None:
        u = self.ues.get(ue)
        if u is None or u.bs is None:
            done(frame, self.sim.now, None, self.sim.now, None, False)
            return
        if u.bs != bs:
            # target camped elsewhere: forward over the backhaul first
            self.sim.after(self.params.backhaul_delay_us, self._dl_enqueue, ue, frame, done)
            return
        self.cells[bs].dl.enqueue(ue, frame, done)

    def _dl_enqueue(self, ue: int, frame: Frame, done: Done) -> None:
        u = self.ues.get(ue)
        if u is None or u.bs is None:
            done(frame, self.sim.now, None, self.sim.now, None, False)
            return
        self.cells[u.bs].dl.enqueue(ue, frame, done)

    def relay_downlink(self, bs: int, frame: Frame, targets: Iterable[int], done: Done) -> None:
        """Queue one downlink copy of ``frame`` per target (per-UE unicast)."""
        for ue in targets:
            self.send_downlink(bs, ue, frame, done)
