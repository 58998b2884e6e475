from __future__ import annotations

import dataclasses
import math

import pytest
from hypothesis import given, strategies as st

from cavsim import channel as ch
from cavsim.apps import run_fcw
from cavsim.engine import Simulator, seconds
from cavsim.mmwave import (
    HarqOutcome,
    HarqProcess,
    MmwaveParams,
    MmwaveStack,
    SchedulerState,
    harq_transmit,
    schedule_slot,
)
from cavsim.mobility import MobilityModel, NodeKind, TraceSample
from cavsim.packets import Frame, FrameKind
from oracles import CHASE_2DB_2DB, CHASE_4X_MINUS10DB, SLOT_THROUGHPUT_BPS

CLEAR = MmwaveParams(blockage=False)


def _db(x: float) -> ch.SinrSample:
    return ch.SinrSample(1.0, 0.0, 1.0, x)


# round-robin -----------------------------------------------------------------------


def test_round_robin_order():
    s = SchedulerState(0, ring=["A", "B", "C"])
    assert [schedule_slot(s) for _ in range(6)] == ["A", "B", "C", "A", "B", "C"]


def test_round_robin_skips_idle_ue():
    s = SchedulerState(0, ring=["A", "B", "C"])
    assert [schedule_slot(s, {"A", "C"}) for _ in range(4)] == ["A", "C", "A", "C"]
    assert schedule_slot(s, set()) is None
    assert schedule_slot(SchedulerState(0)) is None


@given(st.integers(1, 8), st.data())
def test_round_robin_fair_over_backlogged_window(n, data):
    ring = list(range(n))
    backlogged = data.draw(st.sets(st.sampled_from(ring), min_size=1))
    s = SchedulerState(0, ring=ring, cursor=data.draw(st.integers(0, n - 1)))
    for _ in range(data.draw(st.integers(1, 200))):
        schedule_slot(s, backlogged)
    counts = [s.grants[u] for u in backlogged]
    assert max(counts) - min(counts) <= 1
    assert all(s.grants[u] == 0 for u in ring if u not in backlogged)


def test_ring_removal_keeps_cursor_consistent():
    s = SchedulerState(0, ring=[1, 2, 3, 4])
    assert schedule_slot(s) == 1 and schedule_slot(s) == 2
    s.remove(1)
    assert schedule_slot(s) == 3
    s.remove(4)
    assert schedule_slot(s) == 2


# HARQ ----------------------------------------------------------------------------------


def test_harq_first_attempt_success():
    p = HarqProcess([])
    assert harq_transmit(p, _db(20.0)) is HarqOutcome.DELIVERED
    assert p.attempts == 1


def test_harq_chase_combining_two_weak_attempts():
    p = HarqProcess([])
    assert harq_transmit(p, _db(2.0)) is HarqOutcome.RETRANSMIT
    assert harq_transmit(p, _db(2.0)) is HarqOutcome.DELIVERED
    assert 10 * math.log10(p.accumulated_sinr) == pytest.approx(CHASE_2DB_2DB, abs=1e-12)


def test_harq_gives_up_after_four_attempts():
    p = HarqProcess([])
    outcomes = [harq_transmit(p, _db(-10.0)) for _ in range(4)]
    assert outcomes == [HarqOutcome.RETRANSMIT] * 3 + [HarqOutcome.FAILED]
    assert 10 * math.log10(p.accumulated_sinr) == pytest.approx(CHASE_4X_MINUS10DB, abs=1e-12)
    with pytest.raises(ValueError):
        harq_transmit(p, _db(30.0))


@given(st.lists(st.floats(-40, 40), min_size=1, max_size=10))
def test_harq_attempts_bounded_and_accumulation_monotone(sinrs):
    p = HarqProcess([])
    acc = [0.0]
    for x in sinrs:
        out = harq_transmit(p, _db(x))
        acc.append(p.accumulated_sinr)
        if out is not HarqOutcome.RETRANSMIT:
            break
    assert p.attempts <= 4
    assert all(b >= a for a, b in zip(acc, acc[1:]))
    combined = 10 * math.log10(sum(10 ** (x / 10) for x in sinrs[: p.attempts]))
    assert (out is HarqOutcome.DELIVERED) == (combined >= 5.0)


# stack-level ------------------------------------------------------------------------------


def _stack(bs_xy, ue_tracks, params=CLEAR, seed=1):
    samples = []
    for node, pts in ue_tracks.items():
        samples += [TraceSample(t, node, x, y, 0.0) for t, x, y in pts]
    mob = MobilityModel.from_samples(samples)
    bss = []
    for k, (x, y) in enumerate(bs_xy):
        nid = 100 + k
        mob.add_static(nid, NodeKind.BASE_STATION, x, y)
        bss.append(nid)
    sim = Simulator(seed=seed)
    return sim, mob, MmwaveStack(sim, mob, params, bss)


def _still(x, y=0.0, until=seconds(100)):
    return [(0, x, y), (until, x, y)]


def test_single_bs_always_serves():
    sim, mob, mm = _stack([(0, 20)], {1: [(0, -500.0, 0.0), (seconds(10), 500.0, 0.0)]})
    mm.attach(1)
    sim.run_until(seconds(9))
    assert mm.serving(1) == 100
    assert mm.handovers == [(0, 1, None, 100)]


def test_nearer_bs_wins():
    sim, mob, mm = _stack([(0, 20), (300, 20)], {1: _still(100.0)})
    assert mm.attach(1).bs == 100


def test_handover_within_one_period_of_midpoint_crossing():
    # UE moves from x=0 to x=400 in 20 s; equal base stations at x=100 and x=300
    sim, mob, mm = _stack([(100, 20), (300, 20)], {1: [(0, 0.0, 0.0), (seconds(20), 400.0, 0.0)]})
    mm.attach(1)
    sim.run_until(seconds(19))
    crossings = [(t, old, new) for t, _, old, new in mm.handovers if old is not None]
    assert len(crossings) == 1
    t, old, new = crossings[0]
    assert (old, new) == (100, 101)
    t_mid = seconds(10)  # x = 200
    assert t_mid < t <= t_mid + CLEAR.association_period_us


def test_single_backlogged_ue_gets_every_slot():
    sim, mob, mm = _stack([(0, 20)], {1: _still(10.0)})
    mm.attach(1)
    done = []
    n = 40
    for k in range(n):
        mm.send_uplink(1, Frame(1, 100, FrameKind.DATA, CLEAR.slot_payload_bytes, k, 0), lambda *a: done.append(a))
    sim.run_until(seconds(1))
    ends = [a[3] for a in done]
    assert all(a[5] for a in done)
    assert ends == [CLEAR.slot_us * (k + 1) for k in range(n)]
    bits = n * CLEAR.slot_payload_bits
    assert bits / (ends[-1] / 1e6) == pytest.approx(SLOT_THROUGHPUT_BPS)


def test_transport_block_packs_small_packets():
    sim, mob, mm = _stack([(0, 20)], {1: _still(10.0)})
    mm.attach(1)
    done = []
    for k in range(6):
        mm.send_uplink(1, Frame(1, 100, FrameKind.DATA, 1400, k, 0), lambda *a: done.append(a[3]))
    sim.run_until(seconds(1))
    # 5 * 1400 B fit in 8000 B; the sixth needs a second slot
    assert done == [125] * 5 + [250]


def test_backlogged_ues_share_slots_evenly():
    sim, mob, mm = _stack([(0, 20)], {u: _still(10.0 + u) for u in range(1, 5)})
    for u in range(1, 5):
        mm.attach(u)
    for k in range(50):
        for u in range(1, 5):
            mm.send_uplink(u, Frame(u, 100, FrameKind.DATA, CLEAR.slot_payload_bytes, k, 0), lambda *a: None)
    sim.run_until(seconds(0.01) - 1)
    grants = mm.cells[100].ul.state.grants
    counts = [grants[u] for u in range(1, 5)]
    assert max(counts) - min(counts) <= 1
    assert sum(counts) == 80  # 10 ms / 125 us


def test_weak_link_uses_harq_and_fails_after_four_attempts():
    # far enough that a single attempt misses but four combined still fall short
    weak = dataclasses.replace(CLEAR, tx_power_dbm=-60.0)
    sim, mob, mm = _stack([(0, 0)], {1: _still(1000.0)}, params=weak)
    mm.attach(1)
    out = []
    mm.send_uplink(1, Frame(1, 100, FrameKind.DATA, 100, 1, 0), lambda *a: out.append(a))
    sim.run_until(seconds(1))
    (frame, enq, proc, t_end, s, ok), = out
    assert not ok and proc.attempts == 4
    assert t_end == 3 * 4 * weak.slot_us + weak.slot_us
    assert dict(mm.harq_attempts) == {1: 1, 2: 1, 3: 1, 4: 1}


def test_marginal_link_delivered_by_chase_combining():
    # single-attempt SINR of 2 dB: two attempts combine to 5.01 dB
    p = CLEAR
    noise = ch.noise_power(p.bandwidth_hz, p.noise_figure_db)
    target_rx = noise + 2.0
    pl = ch.mmwave_path_loss(10.0, True)
    p2 = dataclasses.replace(p, tx_power_dbm=target_rx + pl - p.tx_gain_dbi - p.rx_gain_dbi)
    sim, mob, mm = _stack([(0, 0)], {1: _still(10.0)}, params=p2)
    mm.attach(1)
    out = []
    mm.send_uplink(1, Frame(1, 100, FrameKind.DATA, 100, 1, 0), lambda *a: out.append(a))
    sim.run_until(seconds(1))
    (frame, enq, proc, t_end, s, ok), = out
    assert ok and proc.attempts == 2
    assert proc.history[0] == pytest.approx(2.0, abs=1e-9)
    assert t_end == 4 * p2.slot_us + p2.slot_us


def test_handover_moves_uplink_queue_and_fails_in_flight_harq():
    weak = dataclasses.replace(CLEAR, tx_power_dbm=-60.0)
    sim, mob, mm = _stack([(0, 0), (1000, 0)], {1: [(0, 400.0, 0.0), (seconds(1), 600.0, 0.0)]}, params=weak)
    mm.attach(1)
    assert mm.serving(1) == 100
    results = []
    for k in range(3):
        mm.send_uplink(1, Frame(1, 100, FrameKind.DATA, 8000, k, 0), lambda *a: results.append(a))
    sim.run_until(seconds(1))
    assert mm.serving(1) == 101
    # every frame resolved exactly once
    assert sorted(a[0].seq for a in results) == [0, 1, 2]


def test_detach_fails_everything_pending():
    sim, mob, mm = _stack([(0, 20)], {1: _still(10.0)})
    mm.attach(1)
    out = []
    for k in range(200):
        mm.send_uplink(1, Frame(1, 100, FrameKind.DATA, 8000, k, 0), lambda *a: out.append(a[5]))
    sim.run_until(10 * CLEAR.slot_us - 1)
    mm.detach(1)
    sim.run_until(seconds(1))
    assert len(out) == 200
    assert sum(out) == 10 and out.count(False) == 190
    mm.send_uplink(1, Frame(1, 100, FrameKind.DATA, 10, 999, sim.now), lambda *a: out.append(a[5]))
    assert out[-1] is False


# base-station relay ----------------------------------------------------------------------------


def test_relay_delay_equals_component_sum():
    res = run_fcw("mmwave", 45)
    o = res.outcomes[1]
    c = o.components_us
    assert o.delivered
    assert sum(c.values()) == o.delay_us
    assert c["uplink_air"] == CLEAR.slot_us and c["downlink_air"] == CLEAR.slot_us
    assert c["processing"] == CLEAR.processing_delay_us


def test_relay_to_no_targets_sends_nothing():
    sim, mob, mm = _stack([(0, 20)], {1: _still(10.0)})
    mm.attach(1)
    mm.relay_downlink(100, Frame(1, 100, FrameKind.DATA, 200, 1, 0), [], lambda *a: None)
    sim.run_until(seconds(1))
    assert mm.cells[100].dl.slots_used == 0


def test_relay_to_three_followers_in_grant_order():
    res = run_fcw("mmwave", 45, followers=3)
    delays = [res.outcomes[f].delay_us for f in (1, 2, 3)]
    assert all(o.delivered for o in res.outcomes.values())
    assert delays == sorted(delays) and len(set(delays)) == 3
    assert delays[1] - delays[0] == CLEAR.slot_us
    for o in res.outcomes.values():
        assert sum(o.components_us.values()) == o.delay_us
