from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from cavsim.engine import seconds
from cavsim.mobility import (
    MobilityModel,
    NodeKind,
    TraceError,
    TraceSample,
    load_trace,
    mph_to_mps,
    synth_corridor,
    write_trace,
)
from oracles import SPEED_45MPH_MPS


def test_parse_single_row(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("0.0,7,12.5,3.0,15.6\n")
    assert load_trace(p) == [TraceSample(0, 7, 12.5, 3.0, 15.6)]


def test_header_row_is_skipped(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("t,node,x,y,speed\n0.5,1,0,0,1\n")
    assert load_trace(p) == [TraceSample(500_000, 1, 0.0, 0.0, 1.0)]


def test_empty_file_gives_no_vehicles(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("")
    assert load_trace(p) == []
    assert MobilityModel.from_samples([]).vehicles() == []


def test_time_going_backwards_is_rejected(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("1.0,3,0,0,0\n0.5,3,1,0,0\n")
    with pytest.raises(TraceError, match=":2:"):
        load_trace(p)


def test_malformed_rows_name_the_line(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("0,1,0,0,0\n1,1,abc,0,0\n")
    with pytest.raises(TraceError, match=":2:"):
        load_trace(p)
    p.write_text("0,1,0,0\n")
    with pytest.raises(TraceError, match="expected 5 fields"):
        load_trace(p)


def test_trace_round_trip(tmp_path):
    samples = synth_corridor(30, 45, 300, 20, seed=4)
    p = tmp_path / "trace.csv"
    write_trace(samples, p)
    back = load_trace(p)
    assert [(s.t, s.node) for s in back] == [(s.t, s.node) for s in samples]
    assert all(abs(a.x - b.x) < 1e-3 for a, b in zip(back, samples))


def test_mph_conversion():
    assert mph_to_mps(45) == pytest.approx(SPEED_45MPH_MPS, abs=1e-12)


def test_corridor_vehicles_advance_at_posted_speed():
    samples = synth_corridor(20, 45, 2000, 30, seed=1)
    mob = MobilityModel.from_samples(samples)
    for v in mob.vehicles():
        a, b = mob.span(v)
        if b - a < seconds(2):
            continue
        x0 = mob.position_at(v, a)[0]
        x1 = mob.position_at(v, a + seconds(1))[0]
        assert x1 - x0 == pytest.approx(SPEED_45MPH_MPS, abs=1e-9)


def test_corridor_is_deterministic():
    assert synth_corridor(20, 45, 500, 60, seed=9) == synth_corridor(20, 45, 500, 60, seed=9)


def test_poisson_arrival_count():
    # 20 vehicles/min over 600 s: mean 200, each run within 3 sigma, pooled mean tight
    counts = []
    for seed in range(50):
        mob = MobilityModel.from_samples(synth_corridor(20, 45, 100, 600, seed=seed))
        counts.append(len(mob.vehicles()))
    assert all(abs(c - 200) <= 3 * math.sqrt(200) for c in counts)
    assert abs(np.mean(counts) - 200) <= 3 * math.sqrt(200 / 50)


def test_interarrival_times_are_exponential():
    mob = MobilityModel.from_samples(synth_corridor(20, 45, 100, 6000, seed=5))
    starts = sorted(mob.span(v)[0] for v in mob.vehicles())
    gaps = np.diff(starts) / 1e6
    assert stats.kstest(gaps, "expon", args=(0, 3.0)).pvalue > 0.01


def test_prefill_populates_the_corridor_at_start():
    # mean occupancy rate * traversal time = 30/60 * 1000/20.1168 ~ 24.9
    occupancy = []
    for seed in range(40):
        mob = MobilityModel.from_samples(synth_corridor(30, 45, 1000, 1, seed=seed, prefill=True))
        occupancy.append(sum(1 for v in mob.vehicles() if mob.position_at(v, 0) is not None))
    expected = 0.5 * 1000 / SPEED_45MPH_MPS
    assert abs(np.mean(occupancy) - expected) < 4 * math.sqrt(expected / 40)


def test_interpolation_midpoint():
    mob = MobilityModel.from_samples([TraceSample(0, 1, 0.0, 0.0, 10), TraceSample(seconds(1), 1, 10.0, 0.0, 10)])
    assert mob.position_at(1, seconds(0.5)) == (5.0, 0.0)


def test_static_node_is_fixed():
    mob = MobilityModel()
    mob.add_static(9, NodeKind.BASE_STATION, 100.0, 50.0)
    assert mob.position_at(9, 0) == (100.0, 50.0)
    assert mob.position_at(9, seconds(1e4)) == (100.0, 50.0)
    assert mob.span(9) is None


def test_outside_span_is_absent_and_unknown_raises():
    mob = MobilityModel.from_samples([TraceSample(seconds(1), 1, 0.0, 0.0, 1), TraceSample(seconds(2), 1, 1.0, 0.0, 1)])
    assert mob.position_at(1, seconds(0.5)) is None
    assert mob.position_at(1, seconds(2.5)) is None
    with pytest.raises(KeyError):
        mob.position_at(42, 0)


@given(
    st.lists(st.floats(-1e4, 1e4, allow_nan=False), min_size=2, max_size=8),
    st.floats(0, 1),
)
def test_interpolated_position_stays_between_samples(xs, frac):
    samples = [TraceSample(seconds(k), 0, x, 0.0, 0.0) for k, x in enumerate(xs)]
    mob = MobilityModel.from_samples(samples)
    k = int(frac * (len(xs) - 1))
    k = min(k, len(xs) - 2)
    x = mob.position_at(0, seconds(k) + int(frac * 1e6) % 1_000_000)[0]
    lo, hi = sorted((xs[k], xs[k + 1]))
    assert lo - 1e-6 <= x <= hi + 1e-6
