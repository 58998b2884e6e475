"""The two CAV applications: forward collision warning (FCW) and traffic data
collection. Each ``run_*`` call builds one isolated simulation."""

from __future__ import annotations

import dataclasses
import functools
import math
from dataclasses import dataclass, field

from . import channel as ch
from .dsrc import DsrcParams, DsrcStack
from .engine import US_PER_S, SimTime, Simulator, derive_seed, seconds, to_seconds
from .flowmon import FlowKey, FlowMonitor, FlowStats, aggregate, metrics_summary, sinr_histogram
from .mmwave import HarqProcess, MmwaveParams, MmwaveStack
from .mobility import MobilityModel, NodeKind, TraceSample, mph_to_mps, synth_corridor
from .packets import Frame, FrameKind

DSRC = "dsrc"
MMWAVE = "mmwave"
STACKS = (DSRC, MMWAVE)

APP_BSM = 1
APP_DATA = 2
APP_CBR = 3
APP_FCW = 4
APP_NAMES = {APP_BSM: "bsm", APP_DATA: "data", APP_CBR: "cbr", APP_FCW: "fcw"}

FCW_LATENCY_BUDGET_MS = 200.0
REFERENCE_SINR_MODE_DB = 50.0
LOSS_TIMEOUT = seconds(2.0)
FT_TO_M = 0.3048


@dataclass(frozen=True)
class FcwEvent:
    leader: int
    triggered_at: SimTime
    followers: tuple[int, ...]


@dataclass(frozen=True)
class CbrFlow:
    src: int
    dst: int
    packet_size: int  # bytes
    rate: float  # bits/s
    start: SimTime
    stop: SimTime

    @property
    def interval(self) -> SimTime:
        return int(round(self.packet_size * 8 / self.rate * US_PER_S))


@dataclass
class FollowerOutcome:
    follower: int
    delivered: bool
    delay_us: SimTime | None
    components_us: dict[str, int] = field(default_factory=dict)
    attempt_trace: list = field(default_factory=list)

    @property
    def delay_ms(self) -> float | None:
        return None if self.delay_us is None else self.delay_us / 1000.0

    @property
    def status(self) -> str:
        return "DELIVERED" if self.delivered else "DELIVERY_FAILED"


@dataclass
class FcwResult:
    stack: str
    speed_mph: float
    bs_distance_m: float
    event: FcwEvent
    outcomes: dict[int, FollowerOutcome]
    flowmon: FlowMonitor
    duration: float

    @property
    def delays_ms(self) -> dict[int, float | None]:
        return {f: o.delay_ms for f, o in self.outcomes.items()}

    def summary(self) -> dict:
        delays = [o.delay_ms for o in self.outcomes.values() if o.delivered]
        return {
            "app": "fcw",
            "stack": self.stack,
            "speed_mph": self.speed_mph,
            "bs_distance_m": self.bs_distance_m,
            "triggered_at_s": to_seconds(self.event.triggered_at),
            "latency_budget_ms": FCW_LATENCY_BUDGET_MS,
            "followers": {
                str(f): {
                    "status": o.status,
                    "end_to_end_delay_ms": o.delay_ms,
                    "components_us": o.components_us,
                    "attempt_trace": o.attempt_trace,
                }
                for f, o in sorted(self.outcomes.items())
            },
            "max_delay_ms": max(delays) if delays else None,
            "within_budget": bool(delays) and len(delays) == len(self.outcomes)
            and max(delays) < FCW_LATENCY_BUDGET_MS,
        }


def _straight(node: int, x0: float, v: float, y: float, end: SimTime) -> list[TraceSample]:
    return [
        TraceSample(0, node, x0, y, v),
        TraceSample(end, node, x0 + v * end / US_PER_S, y, v),
    ]


def run_fcw(
    stack: str,
    speed: float,
    bs_distance: float = 1450 * FT_TO_M,
    *,
    follower_gap: float = 50.0,
    followers: int = 1,
    seed: int = 1,
    trigger_s: float = 2.0,
    packet_bytes: int = 200,
    background_bsm: bool = True,
    dsrc_params: DsrcParams | None = None,
    mmwave_params: MmwaveParams | None = None,
) -> FcwResult:
    """One forward collision warning from a leader to its followers.

    DSRC sends it as a direct broadcast. mm-wave sends it uplink to a base
    station ``bs_distance`` metres from the leader (clear line of sight), which
    relays one downlink copy per follower.
    """
    if stack not in STACKS:
        raise ValueError(f"unknown stack {stack!r}")
    if followers < 1:
        raise ValueError("need at least one follower")
    v = mph_to_mps(speed)
    trigger = seconds(trigger_s)
    end = trigger + LOSS_TIMEOUT
    leader = 0
    fids = tuple(range(1, followers + 1))
    x_leader = follower_gap * followers + 10.0
    samples = _straight(leader, x_leader, v, 0.0, end)
    for k in fids:
        samples += _straight(k, x_leader - k * follower_gap, v, 0.0, end)
    mob = MobilityModel.from_samples(samples)
    sim = Simulator(seed=seed)
    fm = FlowMonitor(duration=to_seconds(end))
    event = FcwEvent(leader, trigger, fids)
    outcomes = {f: FollowerOutcome(f, False, None) for f in fids}
    flows = {f: FlowKey(leader, f, APP_FCW) for f in fids}

    if stack == DSRC:
        dsrc = DsrcStack(sim, mob, fm, dsrc_params)
        for n in (leader, *fids):
            dsrc.attach(n)
            if background_bsm:
                dsrc.start_bsm_beacon(n)
        warning: dict = {}

        def on_eval(node, frame, s, ok):
            if frame is warning.get("frame") and node in outcomes:
                outcomes[node].attempt_trace.append({"t_us": sim.now, "sinr_db": round(s.sinr_db, 3), "decoded": ok})

        def on_broadcast(node, frame, s):
            if frame is warning.get("frame") and node in outcomes and not outcomes[node].delivered:
                o = outcomes[node]
                o.delivered = True
                o.delay_us = sim.now - trigger
                fm.on_rx(flows[node], frame.payload_bytes, frame.created_at, sim.now, s)

        def fire():
            for f in fids:
                fm.on_tx(flows[f], packet_bytes, sim.now)
            warning["frame"] = dsrc.broadcast(leader, packet_bytes, meta={"fcw": True})

        dsrc.on_broadcast = on_broadcast
        dsrc.on_rx_eval = on_eval
        sim.at(trigger, fire)
    else:
        params = dataclasses.replace(mmwave_params or MmwaveParams(), blockage=False)
        # base station abeam the leader's trigger position
        x_trig = x_leader + v * trigger / US_PER_S
        bs = followers + 1
        mob.add_static(bs, NodeKind.BASE_STATION, x_trig, bs_distance)
        mm = MmwaveStack(sim, mob, params, [bs])
        for n in (leader, *fids):
            mm.attach(n)

        def dl_done(f, frame, enq, proc: HarqProcess | None, t_end, s, ok, *, ul: dict):
            o = outcomes[f]
            if proc is not None:
                o.attempt_trace.append({"leg": "downlink", "sinr_db": [round(x, 3) for x in proc.history]})
            if not ok:
                fm.on_loss(flows[f], frame.created_at)
                return
            o.delivered = True
            o.delay_us = t_end - trigger
            o.components_us = dict(ul)
            o.components_us["downlink_wait"] = proc.first_attempt_at - enq
            o.components_us["downlink_air"] = t_end - proc.first_attempt_at
            fm.on_rx(flows[f], frame.payload_bytes, frame.created_at, t_end, s)

        def relay(frame, ul):
            for f in fids:
                mm.send_downlink(bs, f, frame, functools.partial(dl_done, f, ul=ul))

        def ul_done(frame, enq, proc: HarqProcess | None, t_end, s, ok):
            if proc is not None:
                for o in outcomes.values():
                    o.attempt_trace.append({"leg": "uplink", "sinr_db": [round(x, 3) for x in proc.history]})
            if not ok:
                for f in fids:
                    fm.on_loss(flows[f], frame.created_at)
                return
            ul = {
                "uplink_wait": proc.first_attempt_at - enq,
                "uplink_air": t_end - proc.first_attempt_at,
                "processing": params.processing_delay_us,
            }
            sim.at(t_end + params.processing_delay_us, relay, frame, ul)

        def fire():
            frame = Frame(leader, bs, FrameKind.DATA, packet_bytes, 1, sim.now)
            for f in fids:
                fm.on_tx(flows[f], packet_bytes, sim.now)
            mm.send_uplink(leader, frame, ul_done)

        sim.at(trigger, fire)

    sim.run_until(end)
    fm.finalize()
    return FcwResult(stack, speed, bs_distance, event, outcomes, fm, to_seconds(end))


# data collection ------------------------------------------------------------------


@dataclass
class DataCollectionResult:
    stack: str
    rate_vpm: float
    speed_mph: float
    duration: float
    flowmon: FlowMonitor
    vehicles: int
    mean_concurrent: float
    counters: dict = field(default_factory=dict)

    def aggregate(self, app: str | None = None) -> FlowStats:
        return aggregate(self.flowmon.select(stack=self.stack, app=app), self.duration)

    def summary(self) -> dict:
        out = {
            "app": "data_collection",
            "stack": self.stack,
            "rate_vpm": self.rate_vpm,
            "speed_mph": self.speed_mph,
            "duration_s": self.duration,
            "vehicles": self.vehicles,
            "mean_concurrent_vehicles": round(self.mean_concurrent, 6),
            "flows": len(self.flowmon.select(stack=self.stack)),
            "aggregate": metrics_summary(self.aggregate()),
            "per_app": {},
            "counters": dict(sorted(self.counters.items())),
        }
        apps = sorted({st.app for st in self.flowmon.select(stack=self.stack).values()})
        for app in apps:
            out["per_app"][app] = metrics_summary(self.aggregate(app))
        hist = sinr_histogram(self.aggregate(), 1.0)
        mode = hist.mode_center()
        out["sinr_mode_db"] = mode
        out["sinr_mode_offset_db"] = None if mode is None else mode - REFERENCE_SINR_MODE_DB
        return out


def default_rsus(length: float, spacing: float = 300.0) -> list[float]:
    n = max(1, int(math.floor(length / spacing)))
    return [spacing * (k + 0.5) for k in range(n)]


def default_base_stations(length: float, spacing: float = 250.0, offset: float = 20.0) -> list[tuple[float, float]]:
    n = max(1, int(math.ceil(length / spacing)))
    return [(spacing * (k + 0.5), offset) for k in range(n)]


def _mean_concurrent(mob: MobilityModel, vehicles: list[int], duration: SimTime) -> float:
    if duration <= 0:
        return 0.0
    busy = 0
    for v in vehicles:
        a, b = mob.span(v)
        busy += max(0, min(b, duration) - max(a, 0))
    return busy / duration


def run_data_collection(
    stack: str,
    rate_vpm: float,
    speed: float,
    duration: float,
    *,
    seed: int = 1,
    length: float = 1500.0,
    prefill: bool = False,
    trace: list[TraceSample] | None = None,
    rsu_xs: list[float] | None = None,
    rsu_y: float = 10.0,
    base_stations: list[tuple[float, float]] | None = None,
    packet_bytes: int | None = None,
    rate_kbps: float | None = None,
    dsrc_bsm: bool = True,
    dsrc_unicast: bool = True,
    dsrc_params: DsrcParams | None = None,
    mmwave_params: MmwaveParams | None = None,
) -> DataCollectionResult:
    """Vehicles stream data to infrastructure for ``duration`` seconds.

    DSRC vehicles beacon BSMs (each beacon is accounted against the nearest
    RSU) and send unicast DATA to the nearest RSU over routed paths. mm-wave
    vehicles run a CBR uplink to a collection server behind their serving base
    station. Sources stop at ``duration``; the run then drains for the loss
    timeout before unreceived packets are declared lost.
    """
    if stack not in STACKS:
        raise ValueError(f"unknown stack {stack!r}")
    if duration <= 0:
        raise ValueError("duration must be positive")
    horizon = seconds(duration)
    end = horizon + LOSS_TIMEOUT
    if trace is None:
        trace = synth_corridor(rate_vpm, speed, length, duration + to_seconds(LOSS_TIMEOUT),
                               derive_seed(seed, "corridor"), prefill=prefill)
    mob = MobilityModel.from_samples(trace)
    vehicles = [n for n in mob.vehicles() if mob.span(n)[0] < horizon]
    sim = Simulator(seed=seed)
    fm = FlowMonitor(duration=duration)
    counters: dict = {}

    if packet_bytes is None:
        packet_bytes = 200 if stack == DSRC else 1400
    if rate_kbps is None:
        rate_kbps = 16.0 if stack == DSRC else 4000.0

    def stop_time(v: int) -> SimTime:
        return min(mob.span(v)[1], horizon)

    if stack == DSRC:
        rsu_xs = default_rsus(length) if rsu_xs is None else rsu_xs
        rsus = []
        for x in rsu_xs:
            nid = mob.next_free_id()
            mob.add_static(nid, NodeKind.RSU, x, rsu_y)
            rsus.append(nid)
        dsrc = DsrcStack(sim, mob, fm, dsrc_params)
        for r in rsus:
            dsrc.attach(r)
        rsu_pos = {r: mob.position_at(r, 0) for r in rsus}
        serving: dict[int, int] = {}

        def nearest_rsu(v: int) -> int | None:
            pos = mob.position_at(v, sim.now)
            if pos is None:
                return None
            return min(rsus, key=lambda r: (math.hypot(pos[0] - rsu_pos[r][0], pos[1] - rsu_pos[r][1]), r))

        def flow_for(v: int, app: int) -> FlowKey | None:
            r = nearest_rsu(v)
            if r is None:
                return None
            prev = serving.get(v)
            if prev is not None and prev != r:
                for a in (APP_BSM, APP_DATA):
                    fm.close(FlowKey(v, prev, a), sim.now)
            serving[v] = r
            k = FlowKey(v, r, app)
            fm.open(k, sim.now, app=APP_NAMES[app], stack=DSRC)
            return k

        def capture(v: int) -> FlowKey | None:
            if sim.now >= horizon:
                return None
            return flow_for(v, APP_BSM)

        cbr_interval = int(round(packet_bytes * 8 / (rate_kbps * 1000) * US_PER_S))

        def send_data(v: int) -> None:
            if not dsrc.is_active(v) or sim.now >= stop_time(v):
                return
            k = flow_for(v, APP_DATA)
            if k is not None:
                dsrc.send_unicast(v, k.dst, packet_bytes, flow=k)
            sim.after(cbr_interval, send_data, v)

        def beacon(v: int) -> None:
            if dsrc.is_active(v) and sim.now < stop_time(v):
                dsrc.start_bsm_beacon(v, capture=capture)

        def arrive(v: int) -> None:
            dsrc.attach(v)
            if dsrc_bsm:
                beacon(v)
            if dsrc_unicast:
                phase = int(sim.rng("apps.phase").integers(0, cbr_interval))
                sim.after(phase, send_data, v)

        def leave(v: int) -> None:
            r = serving.get(v)
            if r is not None:
                for a in (APP_BSM, APP_DATA):
                    fm.close(FlowKey(v, r, a), min(sim.now, horizon))
            dsrc.detach(v)

        for v in vehicles:
            a, b = mob.span(v)
            sim.at(max(a, 0), arrive, v)
            if b < end:
                sim.at(b, leave, v)
        sim.run_until(end)
        for v in list(dsrc.macs):
            if mob.kinds[v] is NodeKind.VEHICLE:
                leave(v)
        counters = dict(dsrc.counters)
        counters["aodv_loop_violations"] = dsrc.loop_violations
        counters["aodv_hop_violations"] = dsrc.hop_violations
    else:
        params = mmwave_params or MmwaveParams()
        bs_list = default_base_stations(length) if base_stations is None else base_stations
        bss = []
        for x, y in bs_list:
            nid = mob.next_free_id()
            mob.add_static(nid, NodeKind.BASE_STATION, x, y)
            bss.append(nid)
        server = mob.next_free_id()
        mob.add_static(server, NodeKind.SERVER, 0.0, 0.0)
        mm = MmwaveStack(sim, mob, params, bss)
        delivery_delay = params.processing_delay_us + params.backhaul_delay_us
        flow_cfg = {}

        def ul_done(frame, enq, proc, t_end, s, ok):
            if ok:
                fm.on_rx(frame.flow, frame.payload_bytes, frame.created_at, t_end + delivery_delay, s)
            else:
                fm.on_loss(frame.flow, frame.created_at)

        def emit(v: int, k: FlowKey, seq: int) -> None:
            cbr = flow_cfg[v]
            now = sim.now
            if now >= cbr.stop or mm.serving(v) is None:
                return
            frame = Frame(v, server, FrameKind.DATA, cbr.packet_size, seq, now, k)
            fm.on_tx(k, cbr.packet_size, now)
            # the flow is active through the end of this packet's interval
            fm.close(k, now + cbr.interval)
            mm.send_uplink(v, frame, ul_done)
            sim.after(cbr.interval, emit, v, k, seq + 1)

        def arrive(v: int) -> None:
            mm.attach(v)
            now = sim.now
            cbr = CbrFlow(v, server, packet_bytes, rate_kbps * 1000.0, now, stop_time(v))
            flow_cfg[v] = cbr
            k = FlowKey(v, server, APP_CBR)
            fm.open(k, now, app=APP_NAMES[APP_CBR], stack=MMWAVE)
            emit(v, k, 1)

        for v in vehicles:
            a, b = mob.span(v)
            sim.at(max(a, 0), arrive, v)
            if b < end:
                sim.at(b, mm.detach, v)
        sim.run_until(end)
        for v in sorted(mm.ues):
            mm.detach(v)
        counters = {
            "handovers": len(mm.handovers),
            "harq_attempts": {str(k): v for k, v in sorted(mm.harq_attempts.items())},
            "slots_used": sum(c.ul.slots_used + c.dl.slots_used for c in mm.cells.values()),
        }

    fm.finalize()
    return DataCollectionResult(
        stack, rate_vpm, speed, duration, fm, len(vehicles),
        _mean_concurrent(mob, vehicles, horizon), counters,
    )
