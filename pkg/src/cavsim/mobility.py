"""Vehicle trajectories (trace files or a synthetic straight corridor) and
static infrastructure positions."""

from __future__ import annotations

import bisect
import csv
import enum
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .engine import SimTime, seconds, to_seconds

MPH_TO_MPS = 0.44704
SAMPLE_INTERVAL = seconds(0.1)


class NodeKind(enum.Enum):
    VEHICLE = "vehicle"
    RSU = "rsu"
    BASE_STATION = "base_station"
    # remote data sink behind the base-station backhaul; has no radio
    SERVER = "server"


class TraceError(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class TraceSample:
    t: SimTime
    node: int
    x: float
    y: float
    speed: float


def mph_to_mps(mph: float) -> float:
    return mph * MPH_TO_MPS


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def load_trace(path: str | Path) -> list[TraceSample]:
    """Parse a ``t_seconds,node_id,x_m,y_m,speed_mps`` CSV.

    A header row is accepted when its first field is not numeric. Samples come
    back grouped by node and time-ordered within each node.
    """
    path = Path(path)
    by_node: dict[int, list[TraceSample]] = {}
    with path.open(newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if lineno == 1 and not _is_number(row[0].strip()):
                continue
            if len(row) != 5:
                raise TraceError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
            try:
                t_s = float(row[0])
                node = int(row[1])
                x, y, speed = float(row[2]), float(row[3]), float(row[4])
            except ValueError as exc:
                raise TraceError(f"{path}:{lineno}: {exc}") from None
            if node < 0 or t_s < 0 or speed < 0 or not all(map(math.isfinite, (t_s, x, y, speed))):
                raise TraceError(f"{path}:{lineno}: negative or non-finite value")
            samples = by_node.setdefault(node, [])
            t = seconds(t_s)
            if samples and t <= samples[-1].t:
                raise TraceError(
                    f"{path}:{lineno}: node {node} time {t_s} s is not after its previous sample"
                )
            samples.append(TraceSample(t, node, x, y, speed))
    return [s for node in sorted(by_node) for s in by_node[node]]


def write_trace(samples: list[TraceSample], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t_seconds", "node_id", "x_m", "y_m", "speed_mps"])
        for s in samples:
            w.writerow([f"{to_seconds(s.t):.6f}", s.node, f"{s.x:.4f}", f"{s.y:.4f}", f"{s.speed:.4f}"])


def synth_corridor(
    rate: float,
    speed: float,
    length: float,
    duration: float,
    seed: int,
    *,
    first_id: int = 0,
    prefill: bool = False,
    lane_y: float = 0.0,
) -> list[TraceSample]:
    """Constant-speed vehicles entering a straight corridor as a Poisson process.

    ``rate`` is vehicles per minute, ``speed`` is mph. With ``prefill`` the
    corridor starts in its stationary state: vehicles already on the road at
    t=0 are placed uniformly with Poisson count ``rate/60 * length / v``.
    """
    if rate <= 0 or speed <= 0 or length <= 0:
        raise ValueError("rate, speed and length must be positive")
    rng = np.random.default_rng(seed)
    v = mph_to_mps(speed)
    horizon = seconds(duration)
    per_s = rate / 60.0

    entries: list[float] = []  # entry time in seconds; negative for prefilled vehicles
    if prefill:
        n0 = rng.poisson(per_s * length / v)
        xs = np.sort(rng.uniform(0.0, length, n0))[::-1]
        entries.extend(float(-x / v) for x in xs)
    t = 0.0
    while True:
        t += rng.exponential(1.0 / per_s)
        if t >= duration:
            break
        entries.append(t)

    exit_offset = seconds(length / v)
    samples: list[TraceSample] = []
    for k, t_in in enumerate(entries):
        node = first_id + k
        t0 = seconds(t_in)
        t_exit = t0 + exit_offset
        start = max(t0, 0)
        stop = min(t_exit, horizon)
        if stop <= start:
            continue
        ts = list(range(start, stop, SAMPLE_INTERVAL))
        if ts[-1] != stop:
            ts.append(stop)
        for ti in ts:
            x = min(v * (ti - t0) / 1e6, length)
            samples.append(TraceSample(ti, node, x, lane_y, v))
    return samples


class MobilityModel:
    """Piecewise-linear positions for vehicles, fixed positions for infrastructure."""

    def __init__(self) -> None:
        self.kinds: dict[int, NodeKind] = {}
        self._static: dict[int, tuple[float, float]] = {}
        self._t: dict[int, list[int]] = {}
        self._x: dict[int, list[float]] = {}
        self._y: dict[int, list[float]] = {}

    @classmethod
    def from_samples(cls, samples: list[TraceSample]) -> "MobilityModel":
        m = cls()
        m.add_samples(samples)
        return m

    def add_samples(self, samples: list[TraceSample]) -> None:
        for s in samples:
            if s.node in self._static:
                raise ValueError(f"node {s.node} is static infrastructure")
            ts = self._t.setdefault(s.node, [])
            if ts and s.t <= ts[-1]:
                raise TraceError(f"node {s.node}: samples not strictly increasing in time")
            ts.append(s.t)
            self._x.setdefault(s.node, []).append(s.x)
            self._y.setdefault(s.node, []).append(s.y)
            self.kinds[s.node] = NodeKind.VEHICLE

    def add_static(self, node: int, kind: NodeKind, x: float, y: float) -> None:
        if kind is NodeKind.VEHICLE:
            raise ValueError("vehicles need a trajectory")
        if node in self.kinds:
            raise ValueError(f"node id {node} already in use")
        self.kinds[node] = kind
        self._static[node] = (float(x), float(y))

    def next_free_id(self) -> int:
        return max(self.kinds, default=-1) + 1

    def nodes(self, kind: NodeKind | None = None) -> list[int]:
        return sorted(n for n, k in self.kinds.items() if kind is None or k is kind)

    def vehicles(self) -> list[int]:
        return self.nodes(NodeKind.VEHICLE)

    def span(self, node: int) -> tuple[SimTime, SimTime] | None:
        """Appearance interval of a vehicle; None for static nodes."""
        if node in self._static:
            return None
        ts = self._t[node]
        return ts[0], ts[-1]

    def position_at(self, node: int, t: SimTime) -> tuple[float, float] | None:
        pos = self._static.get(node)
        if pos is not None:
            return pos
        ts = self._t.get(node)
        if ts is None:
            raise KeyError(f"unknown node {node}")
        if t < ts[0] or t > ts[-1]:
            return None
        i = bisect.bisect_right(ts, t) - 1
        xs, ys = self._x[node], self._y[node]
        if ts[i] == t or i == len(ts) - 1:
            return xs[i], ys[i]
        f = (t - ts[i]) / (ts[i + 1] - ts[i])
        return xs[i] + f * (xs[i + 1] - xs[i]), ys[i] + f * (ys[i + 1] - ys[i])

    def distance(self, a: int, b: int, t: SimTime) -> float | None:
        pa = self.position_at(a, t)
        pb = self.position_at(b, t)
        if pa is None or pb is None:
            return None
        return math.hypot(pa[0] - pb[0], pa[1] - pb[1])
