from __future__ import annotations

import itertools
import math
from collections import deque

import pytest

from cavsim.dsrc import DsrcParams, DsrcStack, frame_airtime
from cavsim.engine import Simulator, seconds
from cavsim.flowmon import FlowKey, FlowMonitor, tx_bitrate
from cavsim.mobility import MobilityModel, NodeKind, TraceSample
from oracles import AIRTIME_200B_6MBPS_US, BSM_OFFERED_KBPS

# -0.5 dBm with fading off: 100 m links decode (SNR 11.6 dB), 141 m diagonals do not (8.6 dB)
SHORT_RANGE = DsrcParams(tx_power_dbm=-0.5, fading=False)
SPACING = 100.0


def _net(positions: dict[int, tuple[float, float]], params=DsrcParams(), seed=1, kind=NodeKind.RSU):
    mob = MobilityModel()
    for n, (x, y) in positions.items():
        mob.add_static(n, kind, x, y)
    sim = Simulator(seed=seed)
    fm = FlowMonitor()
    stack = DsrcStack(sim, mob, fm, params)
    for n in positions:
        stack.attach(n)
    return sim, mob, fm, stack


def _bfs(positions, src, dst, reach=SPACING * 1.01):
    adj = {
        a: [b for b in positions if b != a and math.dist(positions[a], positions[b]) <= reach]
        for a in positions
    }
    dist = {src: 0}
    q = deque([src])
    while q:
        u = q.popleft()
        for v in adj[u]:
            if v not in dist:
                dist[v] = dist[u] + 1
                q.append(v)
    return dist.get(dst)


def _chain(n):
    return {k: (k * SPACING, 0.0) for k in range(n)}


def _grid(rows, cols):
    return {r * cols + c: (c * SPACING, r * SPACING) for r in range(rows) for c in range(cols)}


TOPOLOGIES = {
    **{f"chain{n}": _chain(n) for n in range(2, 7)},
    "grid2x2": _grid(2, 2),
    "grid2x3": _grid(2, 3),
    "grid3x2": _grid(3, 2),
    "L5": {0: (0, 0), 1: (100, 0), 2: (200, 0), 3: (200, 100), 4: (200, 200)},
}


# MAC ---------------------------------------------------------------------------------


def test_airtime():
    assert frame_airtime(200) * 1e6 == pytest.approx(AIRTIME_200B_6MBPS_US, abs=1e-9)
    assert DsrcParams().airtime_us(200) == math.ceil(AIRTIME_200B_6MBPS_US)


def test_idle_channel_single_broadcast():
    sim, mob, fm, d = _net({0: (0, 0), 1: (50, 0)})
    k = FlowKey(0, 1, 1)
    sim.at(seconds(1), lambda: d.start_bsm_beacon(0, period=seconds(10), phase=0, capture=lambda n: k))
    sim.run_until(seconds(2))
    (node, start, end, kind), = d.tx_log
    assert (node, kind, start) == (0, "BSM", seconds(1))
    assert end - start == 307
    st = fm.flows[k]
    assert st.rx_packets == 1 and st.delay_sum == 307


def test_bsm_count_over_ten_seconds():
    sim, mob, fm, d = _net({0: (0, 0)})
    d.start_bsm_beacon(0)
    sim.run_until(seconds(10) - 1)
    assert d.bsm_enqueued[0] == 100


def test_bsm_stops_when_vehicle_leaves():
    mob = MobilityModel.from_samples([TraceSample(0, 0, 0.0, 0.0, 0.0), TraceSample(seconds(5), 0, 0.0, 0.0, 0.0)])
    sim = Simulator(seed=1)
    d = DsrcStack(sim, mob, FlowMonitor())
    d.attach(0)
    d.start_bsm_beacon(0, phase=0)
    sim.at(seconds(5) - 1, d.detach, 0)
    sim.run_until(seconds(10))
    assert d.bsm_enqueued[0] == 50


def test_bsm_offered_load():
    sim, mob, fm, d = _net({0: (0, 0), 1: (10, 0)})
    k = FlowKey(0, 1, 1)
    d.start_bsm_beacon(0, capture=lambda n: k)
    sim.run_until(seconds(10) - 1)
    fm.duration = 10.0
    fm.finalize()
    assert tx_bitrate(fm.flows[k]) == pytest.approx(BSM_OFFERED_KBPS)


def test_simultaneous_starts_interfere():
    # both enqueue at the same instant on an idle channel; neither can sense the other in time
    sim, mob, fm, d = _net({0: (0, 0), 1: (40, 0), 2: (20, 5)})
    seen = []
    d.on_rx_eval = lambda node, frame, s, ok: seen.append((node, frame.src, s.interference_i, ok))
    sim.at(1000, d.broadcast, 0, 200)
    sim.at(1000, d.broadcast, 1, 200)
    sim.run_until(seconds(1))
    at_middle = [e for e in seen if e[0] == 2]
    assert len(at_middle) == 2
    assert all(i > 0 and not ok for _, _, i, ok in at_middle)
    assert d.counters["rx_half_duplex"] == 2


def test_busy_channel_defers():
    sim, mob, fm, d = _net({0: (0, 0), 1: (30, 0)})
    sim.at(1000, d.broadcast, 0, 1500)
    sim.at(1500, d.broadcast, 1, 200)
    sim.run_until(seconds(1))
    (_, s0, e0, _), (_, s1, e1, _) = sorted(d.tx_log, key=lambda r: r[1])
    assert s1 >= e0 + DsrcParams().aifs_us


def test_lone_transmitter_above_threshold_always_delivers():
    pos = {0: (0, 0), **{k: (10.0 * k, 5.0) for k in range(1, 6)}}
    sim, mob, fm, d = _net(pos, DsrcParams(fading=False))
    for t in range(20):
        sim.at(seconds(0.01) * t, d.broadcast, 0, 200)
    sim.run_until(seconds(1))
    assert d.counters["rx_DATA"] == 100
    assert d.counters.get("rx_fail_DATA", 0) == 0


def test_broadcast_never_acknowledged_or_retransmitted():
    pos = {k: (37.0 * k, 0.0) for k in range(12)}
    sim, mob, fm, d = _net(pos, seed=4)
    for n in pos:
        d.start_bsm_beacon(n)
    sim.run_until(seconds(5))
    assert d.counters.get("tx_ACK", 0) == 0
    assert d.counters["tx_BSM"] + sum(len(m.queue) for m in d.macs.values()) + sum(
        1 for m in d.macs.values() if m.current
    ) == sum(d.bsm_enqueued.values())


def test_queue_overflow_drops_oldest():
    sim, mob, fm, d = _net({0: (0, 0), 1: (20, 0)}, DsrcParams(queue_limit=4))
    keys = [FlowKey(0, 1, k) for k in range(10)]
    for k in keys:
        d.broadcast(0, 200, flow=k)
    sim.run_until(seconds(1))
    fm.finalize()
    # the head frame waits in the queue through AIFS, so only the last four survive
    assert d.counters["loss_queue_overflow"] == 6
    assert [fm.flows[k].rx_packets for k in keys] == [0] * 6 + [1] * 4


def test_dense_random_traffic_respects_carrier_sense():
    # _start_tx raises if a node transmits while its carrier sense is busy
    pos = {k: (15.0 * (k % 6), 15.0 * (k // 6)) for k in range(24)}
    sim, mob, fm, d = _net(pos, seed=9)
    for n in pos:
        d.start_bsm_beacon(n, period=seconds(0.02))
    sim.run_until(seconds(3))
    assert d.counters["tx_BSM"] > 3000


# unicast + routing -------------------------------------------------------------------------


def test_single_hop_unicast():
    sim, mob, fm, d = _net({0: (0, 0), 1: (50, 0)}, DsrcParams(fading=False))
    k = FlowKey(0, 1, 2)
    d._touch_neighbor(0, 1)
    d.send_unicast(0, 1, 200, flow=k)
    sim.run_until(seconds(1))
    assert fm.flows[k].rx_packets == 1
    assert [r[3] for r in d.tx_log] == ["DATA", "ACK"]


@pytest.mark.parametrize("name", sorted(TOPOLOGIES))
def test_aodv_finds_min_hop_routes(name):
    pos = TOPOLOGIES[name]
    for src, dst in itertools.permutations(pos, 2):
        sim, mob, fm, d = _net(pos, SHORT_RANGE, seed=src * 10 + dst)
        k = FlowKey(src, dst, 2)
        d.send_unicast(src, dst, 200, flow=k)
        sim.run_until(seconds(2))
        fm.finalize()
        path = d.route_path(src, dst)
        assert path is not None, (name, src, dst)
        assert len(path) - 1 == _bfs(pos, src, dst), (name, src, dst, path)
        assert fm.flows[k].rx_packets == 1
        assert d.loop_violations == 0 and d.hop_violations == 0


def test_two_hop_delay_matches_hop_log():
    pos = _chain(3)
    sim, mob, fm, d = _net(pos, SHORT_RANGE)
    warm = FlowKey(0, 2, 1)
    d.send_unicast(0, 2, 200, flow=warm)
    sim.run_until(seconds(1))
    k = FlowKey(0, 2, 2)
    n_log = len(d.tx_log)
    t0 = sim.now
    d.send_unicast(0, 2, 200, flow=k)
    sim.run_until(seconds(2))
    hops = [r for r in d.tx_log[n_log:] if r[3] == "DATA"]
    assert [h[0] for h in hops] == [0, 1]
    air = DsrcParams().airtime_us(200)
    assert all(e - s == air for _, s, e, _ in hops)
    st = fm.flows[k]
    assert st.rx_packets == 1
    assert st.delay_sum == hops[-1][2] - t0
    assert st.delay_sum >= 2 * air


def test_unreachable_destination_drops_after_retries():
    sim, mob, fm, d = _net({0: (0, 0), 1: (5000, 0)}, SHORT_RANGE)
    k = FlowKey(0, 1, 2)
    for _ in range(3):
        d.send_unicast(0, 1, 200, flow=k)
    sim.run_until(seconds(5))
    fm.finalize()
    assert d.counters["rreq_originated"] == 1 + DsrcParams().aodv_rreq_retries
    assert d.counters["route_discovery_failed"] == 1
    st = fm.flows[k]
    assert (st.tx_packets, st.rx_packets, st.lost_packets) == (3, 0, 3)


def test_retry_limit_exhaustion_counts_loss_and_breaks_route():
    sim, mob, fm, d = _net({0: (0, 0), 1: (5000, 0)}, SHORT_RANGE)
    d._update_route(0, 1, 1, 1, 5)  # stale neighbour entry
    k = FlowKey(0, 1, 2)
    d.send_unicast(0, 1, 200, flow=k)
    sim.run_until(seconds(1))
    fm.finalize()
    p = DsrcParams()
    assert d.counters["tx_DATA"] == 1 + p.retry_limit
    assert d.counters["unicast_retry"] == p.retry_limit
    assert d.counters["unicast_drop"] == 1
    assert fm.flows[k].lost_packets == 1
    assert d.valid_route(0, 1) is None
    assert d.counters["rerr_sent"] == 1


def test_route_break_triggers_rediscovery():
    # relay 1 leaves shortly after t=1 s; the detour 0-3-4-5-2 is two hops longer
    pos = {0: (0, 0), 1: (100, 0), 2: (200, 0), 3: (0, 100), 4: (100, 100), 5: (200, 100)}
    sim, mob, fm, d = _net(pos, SHORT_RANGE)
    k = FlowKey(0, 2, 2)
    for t in range(30):
        sim.at(seconds(0.1) * t, lambda: d.send_unicast(0, 2, 200, flow=k))
    sim.run_until(seconds(1))
    assert d.route_path(0, 2) == [0, 1, 2]
    sim.at(seconds(1.05), d.detach, 1)
    sim.run_until(seconds(3.2))
    assert d.route_path(0, 2) == [0, 3, 4, 5, 2]
    sim.run_until(seconds(6))
    fm.finalize()
    st = fm.flows[k]
    assert st.rx_packets + st.lost_packets == st.tx_packets == 30
    assert d.counters["link_breaks"] >= 1
    assert st.rx_packets >= 20
    assert d.loop_violations == 0 and d.hop_violations == 0
