"""Per-flow packet accounting and the data-collection metrics.

Every counter is binned by simulation second: sent/lost packets by the second
the packet was sent, transmitted bytes by send second, received bytes by the
second of reception.
"""

from __future__ import annotations

import csv
import io
import json
import math
from array import array
from collections import Counter
from dataclasses import dataclass, field

from .channel import SinrSample
from .engine import US_PER_S, SimTime

FLOWS_CSV_COLUMNS = (
    "stack",
    "app",
    "src",
    "dst",
    "flow_id",
    "tx_packets",
    "rx_packets",
    "lost_packets",
    "tx_bytes",
    "rx_bytes",
    "duration_s",
    "loss_ratio",
    "mean_delay_ms",
    "rx_bitrate_kbps",
    "tx_bitrate_kbps",
    "mean_packet_size_bytes",
    "hd_streaming_capable",
)

HD_STREAMING_BAND_KBPS = (1200.0, 4000.0)


@dataclass(frozen=True, order=True, slots=True)
class FlowKey:
    src: int
    dst: int
    flow_id: int


@dataclass(slots=True)
class SecondBin:
    sent: int = 0  # S_i
    lost: int = 0  # L_i
    rx_bytes: int = 0  # R_i
    tx_bytes: int = 0  # T_i


@dataclass
class FlowStats:
    tx_packets: int = 0
    rx_packets: int = 0
    lost_packets: int = 0
    tx_bytes: int = 0
    rx_bytes: int = 0
    delay_sum: int = 0  # microseconds
    bins: dict[int, SecondBin] = field(default_factory=dict)
    duration: float = 0.0  # seconds; the N of the bitrate formulas
    sinr_db: array = field(default_factory=lambda: array("d"))
    app: str = ""
    stack: str = ""
    start: SimTime | None = None
    stop: SimTime | None = None
    # packets sent but neither received nor lost yet, by send second
    outstanding: Counter = field(default_factory=Counter)

    def bin(self, second: int) -> SecondBin:
        b = self.bins.get(second)
        if b is None:
            b = self.bins[second] = SecondBin()
        return b


class FlowMonitor:
    """Single-writer flow table fed by the protocol stacks."""

    def __init__(self, duration: float = 0.0) -> None:
        self.duration = duration
        self.flows: dict[FlowKey, FlowStats] = {}
        self.finalized = False

    def flow(self, k: FlowKey, *, app: str = "", stack: str = "") -> FlowStats:
        st = self.flows.get(k)
        if st is None:
            st = self.flows[k] = FlowStats(app=app, stack=stack)
        elif app and not st.app:
            st.app, st.stack = app, stack
        return st

    def open(self, k: FlowKey, t: SimTime, *, app: str = "", stack: str = "") -> FlowStats:
        st = self.flow(k, app=app, stack=stack)
        if st.start is None:
            st.start = t
        return st

    def close(self, k: FlowKey, t: SimTime) -> None:
        st = self.flows.get(k)
        if st is not None and st.start is not None:
            st.stop = t

    def on_tx(self, k: FlowKey, nbytes: int, t: SimTime) -> None:
        if nbytes <= 0:
            raise ValueError("transmitted packet must carry at least one byte")
        st = self.flows.get(k) or self.flow(k)
        sec = t // US_PER_S
        b = st.bin(sec)
        b.sent += 1
        b.tx_bytes += nbytes
        st.tx_packets += 1
        st.tx_bytes += nbytes
        st.outstanding[sec] += 1

    def _settle(self, st: FlowStats, sent_at: SimTime) -> None:
        sec = sent_at // US_PER_S
        n = st.outstanding.get(sec, 0)
        if n <= 0:
            raise ValueError(f"no outstanding packet sent in second {sec}")
        if n == 1:
            del st.outstanding[sec]
        else:
            st.outstanding[sec] = n - 1

    def on_rx(self, k: FlowKey, nbytes: int, sent_at: SimTime, t: SimTime, s: SinrSample | float | None = None) -> None:
        if t < sent_at:
            raise ValueError(f"received at {t} us before it was sent at {sent_at} us")
        st = self.flows.get(k) or self.flow(k)
        if st.outstanding.get(sent_at // US_PER_S, 0) > 0:
            self._settle(st, sent_at)
        st.rx_packets += 1
        st.rx_bytes += nbytes
        st.delay_sum += t - sent_at
        st.bin(t // US_PER_S).rx_bytes += nbytes
        if s is not None:
            st.sinr_db.append(s.sinr_db if isinstance(s, SinrSample) else float(s))

    def on_loss(self, k: FlowKey, sent_at: SimTime) -> None:
        st = self.flows.get(k) or self.flow(k)
        self._settle(st, sent_at)
        st.lost_packets += 1
        st.bin(sent_at // US_PER_S).lost += 1

    def finalize(self) -> None:
        """Classify every still-outstanding packet as lost. Idempotent."""
        for st in self.flows.values():
            for sec, n in sorted(st.outstanding.items()):
                st.lost_packets += n
                st.bin(sec).lost += n
            st.outstanding.clear()
            if st.start is not None:
                stop = st.stop if st.stop is not None else int(self.duration * US_PER_S)
                st.duration = max(stop - st.start, 0) / US_PER_S
            else:
                st.duration = self.duration
        self.finalized = True

    def select(self, *, stack: str | None = None, app: str | None = None) -> dict[FlowKey, FlowStats]:
        return {
            k: st
            for k, st in sorted(self.flows.items())
            if (stack is None or st.stack == stack) and (app is None or st.app == app)
        }


# metrics: pure functions of FlowStats


def loss_ratio(st: FlowStats) -> float | None:
    sent = sum(b.sent for b in st.bins.values())
    if sent == 0:
        return None
    return sum(b.lost for b in st.bins.values()) / sent


def mean_delay(st: FlowStats) -> float | None:
    """Milliseconds per received packet."""
    if st.rx_packets == 0:
        return None
    return st.delay_sum / st.rx_packets / 1000.0


def rx_bitrate(st: FlowStats) -> float:
    """Kbps over the flow duration N."""
    if st.duration <= 0:
        raise ValueError("flow duration must be positive")
    return sum(b.rx_bytes * 8 for b in st.bins.values()) / st.duration / 1000.0


def tx_bitrate(st: FlowStats) -> float:
    if st.duration <= 0:
        raise ValueError("flow duration must be positive")
    return sum(b.tx_bytes * 8 for b in st.bins.values()) / st.duration / 1000.0


def mean_packet_size(st: FlowStats) -> float | None:
    if st.rx_packets == 0:
        return None
    return st.rx_bytes / st.rx_packets


def hd_streaming_capable(rx_kbps: float | None) -> bool:
    """Inside the 720p band, edges inclusive up to float rounding."""
    lo, hi = HD_STREAMING_BAND_KBPS
    eps = 1e-9
    return rx_kbps is not None and lo * (1 - eps) <= rx_kbps <= hi * (1 + eps)


def aggregate(flows: dict[FlowKey, FlowStats] | list[FlowStats], duration: float) -> FlowStats:
    """Merge flows into one FlowStats whose N is the run duration."""
    total = FlowStats(duration=duration)
    for st in flows.values() if isinstance(flows, dict) else flows:
        total.tx_packets += st.tx_packets
        total.rx_packets += st.rx_packets
        total.lost_packets += st.lost_packets
        total.tx_bytes += st.tx_bytes
        total.rx_bytes += st.rx_bytes
        total.delay_sum += st.delay_sum
        total.sinr_db.extend(st.sinr_db)
        for sec, b in st.bins.items():
            tb = total.bin(sec)
            tb.sent += b.sent
            tb.lost += b.lost
            tb.rx_bytes += b.rx_bytes
            tb.tx_bytes += b.tx_bytes
    return total


@dataclass
class SinrHistogram:
    bin_width: float
    counts: dict[int, int]  # bin index -> count; bin k covers [k*w, (k+1)*w)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def mode_bin(self) -> tuple[float, float] | None:
        if not self.counts:
            return None
        k = max(sorted(self.counts), key=lambda i: self.counts[i])
        return k * self.bin_width, (k + 1) * self.bin_width

    def mode_center(self) -> float | None:
        mb = self.mode_bin()
        return None if mb is None else (mb[0] + mb[1]) / 2.0

    def rows(self) -> list[tuple[float, float, int]]:
        w = self.bin_width
        return [(k * w, (k + 1) * w, self.counts[k]) for k in sorted(self.counts)]


def sinr_histogram(st: FlowStats | list[float], bin: float = 1.0) -> SinrHistogram:
    if bin <= 0:
        raise ValueError("bin width must be positive")
    values = st.sinr_db if isinstance(st, FlowStats) else st
    counts: Counter = Counter(math.floor(v / bin) for v in values)
    return SinrHistogram(bin, dict(counts))


# report emission


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def flow_row(k: FlowKey, st: FlowStats) -> dict:
    rx_kbps = rx_bitrate(st) if st.duration > 0 else None
    return {
        "stack": st.stack,
        "app": st.app,
        "src": k.src,
        "dst": k.dst,
        "flow_id": k.flow_id,
        "tx_packets": st.tx_packets,
        "rx_packets": st.rx_packets,
        "lost_packets": st.lost_packets,
        "tx_bytes": st.tx_bytes,
        "rx_bytes": st.rx_bytes,
        "duration_s": st.duration,
        "loss_ratio": loss_ratio(st),
        "mean_delay_ms": mean_delay(st),
        "rx_bitrate_kbps": rx_kbps,
        "tx_bitrate_kbps": tx_bitrate(st) if st.duration > 0 else None,
        "mean_packet_size_bytes": mean_packet_size(st),
        "hd_streaming_capable": hd_streaming_capable(rx_kbps),
    }


def flows_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FLOWS_CSV_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in FLOWS_CSV_COLUMNS])
    return buf.getvalue()


def histogram_csv(hists: dict[str, SinrHistogram]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["stack", "bin_lo_db", "bin_hi_db", "count"])
    for name in sorted(hists):
        for lo, hi, c in hists[name].rows():
            w.writerow([name, f"{lo:.3f}", f"{hi:.3f}", c])
    return buf.getvalue()


def metrics_summary(st: FlowStats) -> dict:
    """All six metrics for one (possibly aggregated) FlowStats."""
    hist = sinr_histogram(st)
    return {
        "tx_packets": st.tx_packets,
        "rx_packets": st.rx_packets,
        "lost_packets": st.lost_packets,
        "loss_ratio": loss_ratio(st),
        "mean_delay_ms": mean_delay(st),
        "rx_bitrate_kbps": rx_bitrate(st) if st.duration > 0 else None,
        "tx_bitrate_kbps": tx_bitrate(st) if st.duration > 0 else None,
        "mean_packet_size_bytes": mean_packet_size(st),
        "sinr_samples": len(st.sinr_db),
        "sinr_mode_db": hist.mode_center(),
    }


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"
