"""DSRC stack: 802.11p-style CSMA/CA over a shared 5.9 GHz channel, BSM
beaconing and on-demand distance-vector routing (RREQ/RREP/RERR) for unicast.

Reception is judged at frame end from the SINR against the worst concurrent
interference seen during the frame. Unicast hops are acknowledged; the ACK
occupies the medium but is assumed to decode whenever the data frame did.
"""

from __future__ import annotations

import math
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import channel as ch
from .engine import SimTime, Simulator
from .flowmon import FlowKey, FlowMonitor
from .mobility import MobilityModel
from .packets import BROADCAST, Frame, FrameKind


@dataclass
class DsrcParams:
    phy_rate_bps: float = 6e6
    preamble_us: int = 40
    slot_us: int = 13
    sifs_us: int = 32
    aifs_us: int = 58
    cw_min: int = 15
    cw_max: int = 1023
    queue_limit: int = 64
    retry_limit: int = 3
    ack_bytes: int = 14
    threshold_db: float = 10.0
    cs_threshold_dbm: float = -95.0
    cca_delay_us: int = 4
    tx_power_dbm: float = 20.0
    tx_gain_dbi: float = 1.0
    rx_gain_dbi: float = 1.0
    frequency_hz: float = 5.9e9
    bandwidth_hz: float = 10e6
    noise_figure_db: float = 6.0
    fading: bool = True
    nakagami_d1_m: float = 80.0
    nakagami_d2_m: float = 200.0
    nakagami_m1: float = 1.5
    nakagami_m2: float = 0.75
    nakagami_m3: float = 0.75
    bsm_bytes: int = 200
    bsm_period_us: int = 100_000
    aodv_ttl: int = 8
    aodv_rreq_timeout_us: int = 1_000_000
    aodv_rreq_retries: int = 2
    aodv_active_route_timeout_us: int = 3_000_000
    aodv_jitter_us: int = 10_000
    aodv_pending_limit: int = 64
    rreq_bytes: int = 52
    rrep_bytes: int = 48
    rerr_bytes: int = 40

    @property
    def budget(self) -> ch.LinkBudget:
        return ch.LinkBudget(
            self.tx_power_dbm, self.tx_gain_dbi, self.rx_gain_dbi,
            self.frequency_hz, self.bandwidth_hz, self.noise_figure_db,
        )

    @property
    def zones(self) -> ch.NakagamiZones:
        return ch.NakagamiZones(self.nakagami_d1_m, self.nakagami_d2_m,
                                self.nakagami_m1, self.nakagami_m2, self.nakagami_m3)

    def airtime_us(self, nbytes: int) -> SimTime:
        return self.preamble_us + math.ceil(nbytes * 8 * 1e6 / self.phy_rate_bps)


def frame_airtime(nbytes: int, phy_rate: float = 6e6, preamble: float = 40e-6) -> float:
    """Exact airtime in seconds (the simulator rounds up to whole microseconds)."""
    return preamble + nbytes * 8 / phy_rate


@dataclass
class RouteEntry:
    dest: int
    next_hop: int
    hop_count: int
    dest_seq: int
    expires_at: SimTime
    valid: bool = True


@dataclass
class MacState:
    contention_window: int
    backoff_remaining: int | None = None
    busy_until: SimTime = 0


IDLE, TX, WAIT_ACK = "idle", "tx", "wait_ack"


class _Mac:
    __slots__ = ("node", "queue", "cw", "backoff", "busy", "idle_since", "countdown",
                 "state", "retries", "current", "active", "last_tx_end")

    def __init__(self, node: int, cw: int, now: SimTime) -> None:
        self.node = node
        self.queue: deque = deque()
        self.cw = cw
        self.backoff: int | None = None
        self.busy = 0
        self.idle_since = now
        self.countdown = None
        self.state = IDLE
        self.retries = 0
        self.current = None
        self.active = True
        self.last_tx_end = 0

    def snapshot(self) -> MacState:
        return MacState(self.cw, self.backoff or 0, self.last_tx_end)


class _Tx:
    __slots__ = ("mac", "frame", "next_hop", "start", "end", "power", "sensed", "ack_for")

    def __init__(self, mac, frame, next_hop, start, end, power, ack_for=None) -> None:
        self.mac = mac
        self.frame = frame
        self.next_hop = next_hop
        self.start = start
        self.end = end
        self.power = power
        self.sensed: list = []
        self.ack_for = ack_for


def _max_concurrent(intervals: list[tuple[int, int, float]]) -> float:
    """Largest sum of powers active at any one instant."""
    if not intervals:
        return 0.0
    if len(intervals) == 1:
        return intervals[0][2]
    edges = []
    for s, e, p in intervals:
        edges.append((s, 1, p))
        edges.append((e, 0, -p))
    edges.sort()
    cur = best = 0.0
    for _, _, dp in edges:
        cur += dp
        if cur > best:
            best = cur
    return best


class DsrcStack:
    """Every DSRC radio of one run on one shared channel."""

    def __init__(self, sim: Simulator, mobility: MobilityModel, flowmon: FlowMonitor | None = None,
                 params: DsrcParams | None = None) -> None:
        self.sim = sim
        self.mobility = mobility
        self.flowmon = flowmon
        self.params = p = params or DsrcParams()
        self.budget = p.budget
        self.zones = p.zones
        self.noise_mw = ch.dbm_to_mw(self.budget.noise_dbm)
        self.cs_mw = ch.dbm_to_mw(p.cs_threshold_dbm)
        self.macs: dict[int, _Mac] = {}
        self.recent: deque[_Tx] = deque()
        self.counters: Counter = Counter()
        self.bsm_enqueued: Counter = Counter()
        self.tx_log: list[tuple[int, SimTime, SimTime, str]] = []
        self.on_broadcast: Callable[[int, Frame, ch.SinrSample], None] | None = None
        self.on_deliver: Callable[[int, Frame, ch.SinrSample], None] | None = None
        # sees every reception attempt, decoded or not
        self.on_rx_eval: Callable[[int, Frame, ch.SinrSample, bool], None] | None = None
        self._seq: Counter = Counter()
        self._rng_mac = sim.rng("dsrc.mac")
        self._rng_fading = sim.rng("dsrc.fading")
        self._rng_aodv = sim.rng("dsrc.aodv")
        self._rng_bsm = sim.rng("dsrc.bsm")
        # routing state
        self.routes: dict[int, dict[int, RouteEntry]] = {}
        self.seqno: Counter = Counter()
        self._rreq_id: Counter = Counter()
        self._seen: dict[int, dict[tuple[int, int], int]] = {}
        self.pending: dict[int, dict[int, deque]] = {}
        self._discovery: dict[tuple[int, int], object] = {}
        self.loop_violations = 0
        self.hop_violations = 0

    # attachment ----------------------------------------------------------------

    def attach(self, node: int) -> None:
        if node in self.macs:
            return
        self.macs[node] = _Mac(node, self.params.cw_min, self.sim.now)
        self.routes.setdefault(node, {})
        self._seen.setdefault(node, {})
        self.pending.setdefault(node, {})

    def detach(self, node: int) -> None:
        """Remove a node from the channel; anything it still holds is lost."""
        mac = self.macs.pop(node, None)
        if mac is None:
            return
        mac.active = False
        if mac.countdown is not None:
            mac.countdown.cancel()
            mac.countdown = None
        for frame, _ in mac.queue:
            self._lost(frame, "detached")
        mac.queue.clear()
        for dest, q in self.pending.get(node, {}).items():
            for frame in q:
                self._lost(frame, "detached")
        self.pending[node] = {}
        for key in [k for k in self._discovery if k[0] == node]:
            self._discovery.pop(key).cancel()

    def is_active(self, node: int) -> bool:
        return node in self.macs

    # accounting helpers ----------------------------------------------------------

    def _next_seq(self, node: int) -> int:
        self._seq[node] += 1
        return self._seq[node]

    def _originate(self, frame: Frame) -> None:
        if frame.flow is not None and self.flowmon is not None:
            self.flowmon.on_tx(frame.flow, frame.payload_bytes, frame.created_at)

    def _lost(self, frame: Frame, why: str) -> None:
        self.counters[f"loss_{why}"] += 1
        if frame.flow is not None and self.flowmon is not None and frame.kind is not FrameKind.BSM:
            self.flowmon.on_loss(frame.flow, frame.created_at)

    # application-facing operations --------------------------------------------

    def start_bsm_beacon(self, node: int, size: int | None = None, period: SimTime | None = None,
                         *, phase: SimTime | None = None,
                         capture: Callable[[int], FlowKey | None] | None = None) -> None:
        """Broadcast a BSM every ``period`` while ``node`` stays attached.

        ``capture`` maps the node to the flow (usually toward its serving RSU)
        that accounts the beacon, or None.
        """
        p = self.params
        size = p.bsm_bytes if size is None else size
        period = p.bsm_period_us if period is None else period
        if phase is None:
            phase = int(self._rng_bsm.integers(0, period))
        self.sim.after(phase, self._beacon, node, size, period, capture)

    def _beacon(self, node: int, size: int, period: SimTime, capture) -> None:
        if node not in self.macs:
            return
        now = self.sim.now
        flow = capture(node) if capture is not None else None
        frame = Frame(node, BROADCAST, FrameKind.BSM, size, self._next_seq(node), now, flow)
        if flow is not None and self.flowmon is not None:
            self.flowmon.on_tx(flow, size, now)
        self.bsm_enqueued[node] += 1
        self.mac_transmit(node, frame)
        self.sim.after(period, self._beacon, node, size, period, capture)

    def broadcast(self, node: int, size: int, *, flow: FlowKey | None = None, meta: dict | None = None) -> Frame:
        frame = Frame(node, BROADCAST, FrameKind.DATA, size, self._next_seq(node), self.sim.now, flow, meta)
        self._originate(frame)
        self.mac_transmit(node, frame)
        return frame

    def send_unicast(self, origin: int, dest: int, size: int, *, flow: FlowKey | None = None) -> Frame:
        frame = Frame(origin, dest, FrameKind.DATA, size, self._next_seq(origin), self.sim.now, flow)
        self._originate(frame)
        if origin not in self.macs:
            self._lost(frame, "detached")
            return frame
        self._route_data(origin, frame)
        return frame

    # MAC -------------------------------------------------------------------------

    def mac_transmit(self, node: int, frame: Frame, next_hop: int = BROADCAST) -> None:
        mac = self.macs.get(node)
        if mac is None:
            self._lost(frame, "detached")
            return
        if len(mac.queue) >= self.params.queue_limit:
            old, _ = mac.queue.popleft()
            self._lost(old, "queue_overflow")
        mac.queue.append((frame, next_hop))
        self._try(mac)

    def _draw_backoff(self, mac: _Mac) -> int:
        return int(self._rng_mac.integers(0, mac.cw + 1))

    def _try(self, mac: _Mac) -> None:
        if mac.state != IDLE or not mac.queue or not mac.active or mac.countdown is not None:
            return
        if mac.busy > 0:
            if mac.backoff is None:
                mac.backoff = self._draw_backoff(mac)
            return
        now = self.sim.now
        p = self.params
        fire = mac.idle_since + p.aifs_us + (mac.backoff or 0) * p.slot_us
        if fire <= now:
            mac.backoff = None
            frame, nh = mac.queue.popleft()
            self._start_tx(mac, frame, nh)
        else:
            mac.backoff = mac.backoff or 0
            mac.countdown = self.sim.at(fire, self._countdown_done, mac)

    def _countdown_done(self, mac: _Mac) -> None:
        mac.countdown = None
        mac.backoff = None
        if mac.active and mac.state == IDLE and mac.queue and mac.busy == 0:
            frame, nh = mac.queue.popleft()
            self._start_tx(mac, frame, nh)

    def _on_busy(self, mac: _Mac, t: SimTime) -> None:
        p = self.params
        if mac.backoff is not None:
            start = mac.idle_since + p.aifs_us
            if t > start:
                mac.backoff = max(0, mac.backoff - (t - start) // p.slot_us)
            if mac.backoff == 0:
                # deferral interrupted: a fresh backoff is required before sending
                mac.backoff = self._draw_backoff(mac) if mac.queue else None
        if mac.countdown is not None:
            mac.countdown.cancel()
            mac.countdown = None

    def _on_idle(self, mac: _Mac, t: SimTime) -> None:
        mac.idle_since = t
        if mac.queue:
            self._try(mac)

    def _busy_inc(self, mac: _Mac) -> None:
        if not mac.active:
            return
        if mac.busy == 0:
            self._on_busy(mac, self.sim.now)
        mac.busy += 1

    def _busy_dec(self, mac: _Mac) -> None:
        if not mac.active:
            return
        mac.busy -= 1
        if mac.busy == 0:
            self._on_idle(mac, self.sim.now)

    def _powers(self, node: int, t: SimTime) -> dict[int, float]:
        """Faded received power (mW) from ``node`` at every other attached radio."""
        src = self.mobility.position_at(node, t)
        others = [n for n in self.macs if n != node]
        if src is None or not others:
            return {}
        ids = []
        xs = []
        ys = []
        for n in sorted(others):
            pos = self.mobility.position_at(n, t)
            if pos is not None:
                ids.append(n)
                xs.append(pos[0])
                ys.append(pos[1])
        if not ids:
            return {}
        d = np.hypot(np.asarray(xs) - src[0], np.asarray(ys) - src[1])
        d = np.maximum(d, ch.MIN_DISTANCE)
        pl = ch.friis_path_loss_array(d, self.budget.frequency)
        dbm = self.budget.eirp_gain - pl
        mw = np.power(10.0, dbm / 10.0)
        if self.params.fading:
            m = self.zones.shapes(d)
            mw = mw * self._rng_fading.gamma(m, 1.0 / m)
        return dict(zip(ids, mw.tolist()))

    def _start_tx(self, mac: _Mac, frame: Frame | None, next_hop: int, ack_for: _Mac | None = None) -> _Tx:
        sim = self.sim
        now = sim.now
        p = self.params
        nbytes = p.ack_bytes if frame is None else frame.payload_bytes
        if mac.busy > 0 and ack_for is None:
            raise AssertionError(f"node {mac.node} transmitting while carrier sense is busy")
        tx = _Tx(mac, frame, next_hop, now, now + p.airtime_us(nbytes), self._powers(mac.node, now), ack_for)
        if frame is not None:
            # an ACK leaves the MAC state alone; its own busy count blocks access
            mac.state = TX
            mac.current = (frame, next_hop)
        self.recent.append(tx)
        kind = "ACK" if frame is None else frame.kind.value
        self.counters[f"tx_{kind}"] += 1
        self.tx_log.append((mac.node, tx.start, tx.end, kind))
        self._busy_inc(mac)
        sim.after(p.cca_delay_us, self._sense_start, tx)
        sim.at(tx.end, self._tx_end, tx)
        return tx

    def _sense_start(self, tx: _Tx) -> None:
        cs = self.cs_mw
        macs = self.macs
        for n, pw in tx.power.items():
            if pw >= cs:
                m = macs.get(n)
                if m is not None:
                    tx.sensed.append(m)
                    self._busy_inc(m)

    def _prune(self, now: SimTime) -> None:
        horizon = now - 20_000
        recent = self.recent
        while recent and recent[0].start < horizon and recent[0].end < now:
            recent.popleft()

    def _overlapping(self, tx: _Tx) -> list[_Tx]:
        return [y for y in self.recent if y is not tx and y.start < tx.end and y.end > tx.start]

    def rx_sinr(self, tx: _Tx, r: int, overlap: list[_Tx] | None = None) -> ch.SinrSample | None:
        """SINR of ``tx`` at ``r``; None when ``r`` was itself transmitting."""
        if overlap is None:
            overlap = self._overlapping(tx)
        spans = []
        for y in overlap:
            if y.mac.node == r:
                return None
            pw = y.power.get(r)
            if pw:
                spans.append((max(y.start, tx.start), min(y.end, tx.end), pw))
        return ch.sinr(tx.power.get(r, 0.0), _max_concurrent(spans), self.noise_mw)

    def _tx_end(self, tx: _Tx) -> None:
        sim = self.sim
        now = sim.now
        p = self.params
        mac = tx.mac
        mac.last_tx_end = now
        overlap = self._overlapping(tx)
        unicast = tx.frame is not None and tx.next_hop != BROADCAST

        if tx.frame is not None:
            if unicast:
                mac.state = WAIT_ACK
            else:
                mac.state = IDLE
                mac.current = None
                mac.cw = p.cw_min
                mac.backoff = self._draw_backoff(mac)

        for m in tx.sensed:
            self._busy_dec(m)
        self._busy_dec(mac)

        if tx.frame is None:
            pass  # ACK outcome was settled when the data frame ended
        elif not unicast:
            for r in sorted(tx.power):
                rm = self.macs.get(r)
                if rm is None:
                    continue
                s = self.rx_sinr(tx, r, overlap)
                if s is None:
                    self.counters["rx_half_duplex"] += 1
                    continue
                self.mac_receive(r, tx.frame, s, mac.node)
        else:
            r = tx.next_hop
            rm = self.macs.get(r)
            s = self.rx_sinr(tx, r, overlap) if rm is not None else None
            ok = s is not None and ch.decode(s, p.threshold_db)
            ack_air = p.airtime_us(p.ack_bytes)
            if ok:
                sim.after(p.sifs_us, self._send_ack, rm, mac)
                sim.after(p.sifs_us + ack_air, self._unicast_done, mac, True)
                self.mac_receive(r, tx.frame, s, mac.node)
            else:
                self.counters["rx_unicast_fail"] += 1
                sim.after(p.sifs_us + ack_air + p.slot_us, self._unicast_done, mac, False)

        if mac.state == IDLE and mac.active:
            self._try(mac)
        self._prune(now)

    def _send_ack(self, rmac: _Mac, for_mac: _Mac) -> None:
        if rmac.active and rmac.state != TX:
            self._start_tx(rmac, None, for_mac.node, ack_for=for_mac)

    def _unicast_done(self, mac: _Mac, ok: bool) -> None:
        p = self.params
        frame, nh = mac.current
        if not mac.active:
            if not ok:
                self._lost(frame, "detached")
            return
        if ok:
            mac.cw = p.cw_min
            mac.retries = 0
            mac.state = IDLE
            mac.current = None
            mac.backoff = self._draw_backoff(mac)
            self.counters["unicast_ok"] += 1
        else:
            mac.retries += 1
            if mac.retries > p.retry_limit:
                mac.cw = p.cw_min
                mac.retries = 0
                mac.state = IDLE
                mac.current = None
                mac.backoff = self._draw_backoff(mac)
                self.counters["unicast_drop"] += 1
                self._link_failed(mac.node, nh, frame)
            else:
                mac.cw = min(2 * mac.cw + 1, p.cw_max)
                mac.state = IDLE
                mac.current = None
                mac.backoff = self._draw_backoff(mac)
                mac.queue.appendleft((frame, nh))
                self.counters["unicast_retry"] += 1
        self._try(mac)

    def mac_receive(self, node: int, frame: Frame, s: ch.SinrSample, sender: int | None = None) -> bool:
        """Decode decision plus hand-off to routing or the application."""
        ok = ch.decode(s, self.params.threshold_db) and node in self.macs
        if self.on_rx_eval is not None:
            self.on_rx_eval(node, frame, s, ok)
        if not ok:
            self.counters[f"rx_fail_{frame.kind.value}"] += 1
            return False
        self.counters[f"rx_{frame.kind.value}"] += 1
        kind = frame.kind
        if kind is FrameKind.BSM:
            if frame.flow is not None and frame.flow.dst == node and self.flowmon is not None:
                self.flowmon.on_rx(frame.flow, frame.payload_bytes, frame.created_at, self.sim.now, s)
        elif kind is FrameKind.DATA:
            if frame.dst == BROADCAST:
                if frame.flow is not None and self.flowmon is not None and frame.flow.dst == node:
                    self.flowmon.on_rx(frame.flow, frame.payload_bytes, frame.created_at, self.sim.now, s)
                if self.on_broadcast is not None:
                    self.on_broadcast(node, frame, s)
            elif frame.dst == node:
                if frame.flow is not None and self.flowmon is not None:
                    self.flowmon.on_rx(frame.flow, frame.payload_bytes, frame.created_at, self.sim.now, s)
                if self.on_deliver is not None:
                    self.on_deliver(node, frame, s)
            else:
                if sender is not None:
                    self._touch_neighbor(node, sender)
                self._route_data(node, frame)
        elif kind is FrameKind.AODV_RREQ:
            self._on_rreq(node, frame, sender)
        elif kind is FrameKind.AODV_RREP:
            self._on_rrep(node, frame, sender)
        elif kind is FrameKind.AODV_RERR:
            self._on_rerr(node, frame, sender)
        return True

    # routing ---------------------------------------------------------------------

    def valid_route(self, node: int, dest: int) -> RouteEntry | None:
        e = self.routes.get(node, {}).get(dest)
        if e is not None and e.valid and e.expires_at > self.sim.now:
            return e
        return None

    def _lifetime(self) -> SimTime:
        return self.sim.now + self.params.aodv_active_route_timeout_us

    def _update_route(self, node: int, dest: int, next_hop: int, hops: int, seq: int) -> bool:
        table = self.routes.setdefault(node, {})
        e = table.get(dest)
        now = self.sim.now
        fresh = e is None or not e.valid or e.expires_at <= now
        if fresh or seq > e.dest_seq or (seq == e.dest_seq and hops < e.hop_count):
            table[dest] = RouteEntry(dest, next_hop, hops, seq, self._lifetime())
            self._check_route(node, dest)
            return True
        if e.next_hop == next_hop and e.hop_count == hops:
            e.expires_at = max(e.expires_at, self._lifetime())
        return False

    def _touch_neighbor(self, node: int, nbr: int) -> None:
        table = self.routes.setdefault(node, {})
        e = table.get(nbr)
        if e is None or not e.valid or e.expires_at <= self.sim.now or e.hop_count > 1:
            seq = e.dest_seq if e is not None else 0
            table[nbr] = RouteEntry(nbr, nbr, 1, seq, self._lifetime())
        else:
            e.expires_at = max(e.expires_at, self._lifetime())

    def _check_route(self, node: int, dest: int) -> None:
        """Walk next hops toward ``dest``; hop counts must strictly decrease."""
        e = self.routes[node][dest]
        seen = {node}
        while e.next_hop != dest:
            nh = e.next_hop
            if nh in seen:
                self.loop_violations += 1
                return
            seen.add(nh)
            nxt = self.valid_route(nh, dest)
            if nxt is None:
                return
            if nxt.hop_count >= e.hop_count:
                self.hop_violations += 1
                return
            e = nxt

    def route_path(self, origin: int, dest: int) -> list[int] | None:
        """Follow installed valid routes from origin to dest."""
        path = [origin]
        cur = origin
        while cur != dest:
            e = self.valid_route(cur, dest)
            if e is None or e.next_hop in path:
                return None
            cur = e.next_hop
            path.append(cur)
        return path

    def _route_data(self, node: int, frame: Frame) -> None:
        e = self.valid_route(node, frame.dst)
        if e is not None:
            e.expires_at = self._lifetime()
            nh = self.valid_route(node, e.next_hop)
            if nh is not None:
                nh.expires_at = self._lifetime()
            self.mac_transmit(node, frame, e.next_hop)
        elif node == frame.src:
            q = self.pending[node].setdefault(frame.dst, deque())
            if len(q) >= self.params.aodv_pending_limit:
                self._lost(q.popleft(), "pending_overflow")
            q.append(frame)
            self.aodv_route_request(node, frame.dst)
        else:
            self._lost(frame, "no_route")
            stale = self.routes[node].get(frame.dst)
            self._send_rerr(node, [(frame.dst, stale.dest_seq if stale is not None else 0)])

    def aodv_route_request(self, origin: int, dest: int) -> None:
        if self.valid_route(origin, dest) is not None or (origin, dest) in self._discovery:
            return
        if origin not in self.macs:
            return
        self._send_rreq(origin, dest, 0)

    def _send_rreq(self, origin: int, dest: int, tries: int) -> None:
        p = self.params
        self.seqno[origin] += 1
        self._rreq_id[origin] += 1
        rid = self._rreq_id[origin]
        known = self.routes[origin].get(dest)
        meta = {
            "origin": origin, "oseq": self.seqno[origin], "rid": rid, "dest": dest,
            "dseq": known.dest_seq if known is not None else 0, "hops": 0, "ttl": p.aodv_ttl,
        }
        self._seen[origin][(origin, rid)] = 0
        frame = Frame(origin, BROADCAST, FrameKind.AODV_RREQ, p.rreq_bytes, self._next_seq(origin), self.sim.now, None, meta)
        self.counters["rreq_originated"] += 1
        self.mac_transmit(origin, frame)
        self._discovery[(origin, dest)] = self.sim.after(p.aodv_rreq_timeout_us, self._rreq_timeout, origin, dest, tries)

    def _rreq_timeout(self, origin: int, dest: int, tries: int) -> None:
        self._discovery.pop((origin, dest), None)
        if origin not in self.macs:
            return
        if self.valid_route(origin, dest) is not None:
            self._flush(origin, dest)
            return
        if tries < self.params.aodv_rreq_retries:
            self._send_rreq(origin, dest, tries + 1)
            return
        self.counters["route_discovery_failed"] += 1
        for frame in self.pending[origin].pop(dest, ()):
            self._lost(frame, "no_route")

    def _flush(self, origin: int, dest: int) -> None:
        timer = self._discovery.pop((origin, dest), None)
        if timer is not None:
            timer.cancel()
        q = self.pending[origin].pop(dest, None)
        for frame in q or ():
            self._route_data(origin, frame)

    def _on_rreq(self, node: int, frame: Frame, sender: int) -> None:
        m = frame.meta
        self._touch_neighbor(node, sender)
        if node == m["origin"]:
            return
        key = (m["origin"], m["rid"])
        hops = m["hops"] + 1
        best = self._seen[node].get(key)
        if best is not None and hops >= best:
            return
        self._seen[node][key] = hops
        self._update_route(node, m["origin"], sender, hops, m["oseq"])
        p = self.params
        if node == m["dest"]:
            self.seqno[node] = max(self.seqno[node], m["dseq"])
            self._send_rrep(node, sender, m["origin"], node, self.seqno[node], 0)
            return
        e = self.valid_route(node, m["dest"])
        if e is not None and best is None and m["dseq"] > 0 and e.dest_seq >= m["dseq"]:
            self._send_rrep(node, sender, m["origin"], m["dest"], e.dest_seq, e.hop_count)
            return
        if m["ttl"] > 1:
            fwd_meta = dict(m, hops=hops, ttl=m["ttl"] - 1)
            fwd = Frame(node, BROADCAST, FrameKind.AODV_RREQ, p.rreq_bytes, self._next_seq(node), frame.created_at, None, fwd_meta)
            jitter = int(self._rng_aodv.integers(0, p.aodv_jitter_us + 1))
            self.sim.after(jitter, self.mac_transmit, node, fwd)

    def _send_rrep(self, node: int, to: int, origin: int, dest: int, dseq: int, hops: int) -> None:
        meta = {"origin": origin, "dest": dest, "dseq": dseq, "hops": hops}
        frame = Frame(node, origin, FrameKind.AODV_RREP, self.params.rrep_bytes, self._next_seq(node), self.sim.now, None, meta)
        self.counters["rrep_sent"] += 1
        self.mac_transmit(node, frame, to)

    def _on_rrep(self, node: int, frame: Frame, sender: int) -> None:
        m = frame.meta
        self._touch_neighbor(node, sender)
        hops = m["hops"] + 1
        changed = self._update_route(node, m["dest"], sender, hops, m["dseq"])
        if node == m["origin"]:
            if self.valid_route(node, m["dest"]) is not None:
                self._flush(node, m["dest"])
            return
        e = self.routes[node][m["dest"]]
        if not changed and not (e.valid and e.next_hop == sender and e.hop_count == hops):
            return
        rev = self.valid_route(node, m["origin"])
        if rev is not None:
            meta = dict(m, hops=hops)
            fwd = Frame(node, m["origin"], FrameKind.AODV_RREP, self.params.rrep_bytes, self._next_seq(node), frame.created_at, None, meta)
            self.mac_transmit(node, fwd, rev.next_hop)

    def _link_failed(self, node: int, next_hop: int, frame: Frame) -> None:
        self.counters["link_breaks"] += 1
        if frame.kind is FrameKind.DATA:
            self._lost(frame, "retry_limit")
        broken = []
        for dest, e in self.routes.get(node, {}).items():
            if e.valid and e.next_hop == next_hop:
                e.valid = False
                e.dest_seq += 1
                broken.append((dest, e.dest_seq))
        if broken:
            self._send_rerr(node, broken)

    def _send_rerr(self, node: int, unreachable: list[tuple[int, int]]) -> None:
        if node not in self.macs:
            return
        frame = Frame(node, BROADCAST, FrameKind.AODV_RERR, self.params.rerr_bytes, self._next_seq(node),
                      self.sim.now, None, {"unreachable": unreachable})
        self.counters["rerr_sent"] += 1
        self.mac_transmit(node, frame)

    def _on_rerr(self, node: int, frame: Frame, sender: int) -> None:
        invalidated = []
        table = self.routes.get(node, {})
        for dest, seq in frame.meta["unreachable"]:
            e = table.get(dest)
            if e is not None and e.valid and e.next_hop == sender:
                e.valid = False
                e.dest_seq = max(e.dest_seq, seq)
                invalidated.append((dest, e.dest_seq))
        if invalidated:
            jitter = int(self._rng_aodv.integers(0, self.params.aodv_jitter_us + 1))
            self.sim.after(jitter, self._send_rerr, node, invalidated)
