"""Link budget, path loss, fading, blockage and SINR for both radio stacks.

Powers are carried in dBm at the API edges and in mW inside SINR samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0
SINR_FLOOR_DB = -200.0
MIN_DISTANCE = 1.0

_FRIIS_CONST = 20.0 * math.log10(4.0 * math.pi / SPEED_OF_LIGHT)


@dataclass(frozen=True)
class LinkBudget:
    tx_power: float  # dBm
    tx_gain: float  # dBi
    rx_gain: float  # dBi
    frequency: float  # Hz
    bandwidth: float  # Hz
    noise_figure: float  # dB

    def __post_init__(self) -> None:
        if self.bandwidth <= 0 or self.frequency <= 0:
            raise ValueError("bandwidth and frequency must be positive")

    @property
    def eirp_gain(self) -> float:
        return self.tx_power + self.tx_gain + self.rx_gain

    @property
    def noise_dbm(self) -> float:
        return noise_power(self.bandwidth, self.noise_figure)


DSRC_BUDGET = LinkBudget(20.0, 1.0, 1.0, 5.9e9, 10e6, 6.0)
MMWAVE_BUDGET = LinkBudget(30.0, 25.0, 25.0, 28e9, 1e9, 5.0)


@dataclass(frozen=True, slots=True)
class SinrSample:
    signal_m: float  # mW
    interference_i: float  # mW
    noise_o: float  # mW
    sinr_db: float

    @property
    def linear(self) -> float:
        return 10.0 ** (self.sinr_db / 10.0)


@dataclass(frozen=True)
class MmwavePathLoss:
    """Log-distance fits ``alpha + 10*beta*log10(d)`` at 28 GHz."""

    los_alpha: float = 61.4
    los_beta: float = 2.0
    nlos_alpha: float = 72.0
    nlos_beta: float = 2.92


@dataclass(frozen=True)
class NakagamiZones:
    """Distance-dependent Nakagami shape: m1 up to d1, m2 up to d2, m3 beyond."""

    d1: float = 80.0
    d2: float = 200.0
    m1: float = 1.5
    m2: float = 0.75
    m3: float = 0.75

    def shape(self, d: float) -> float:
        if d <= self.d1:
            return self.m1
        if d <= self.d2:
            return self.m2
        return self.m3

    def shapes(self, d: np.ndarray) -> np.ndarray:
        return np.where(d <= self.d1, self.m1, np.where(d <= self.d2, self.m2, self.m3))


LOS = "LOS"
NLOS = "NLOS"


@dataclass(slots=True)
class LosState:
    """Two-state blockage process for one link."""

    state: str = LOS
    rate_block: float = 0.1  # LOS -> NLOS, per second
    rate_clear: float = 0.4  # NLOS -> LOS, per second

    @property
    def los(self) -> bool:
        return self.state == LOS

    @property
    def stationary_los(self) -> float:
        total = self.rate_block + self.rate_clear
        return 1.0 if total == 0 else self.rate_clear / total


def dbm_to_mw(dbm: float) -> float:
    return 10.0 ** (dbm / 10.0)


def mw_to_dbm(mw: float) -> float:
    return 10.0 * math.log10(mw) if mw > 0 else -math.inf


def friis_path_loss(d: float, f: float) -> float:
    """Free-space loss in dB. Distances under 1 m are clamped to 1 m."""
    if d <= 0:
        raise ValueError("Friis path loss is singular at d <= 0")
    if f <= 0:
        raise ValueError("frequency must be positive")
    d = max(d, MIN_DISTANCE)
    return 20.0 * math.log10(d) + 20.0 * math.log10(f) + _FRIIS_CONST


def friis_path_loss_array(d: np.ndarray, f: float) -> np.ndarray:
    d = np.maximum(d, MIN_DISTANCE)
    return 20.0 * np.log10(d) + (20.0 * math.log10(f) + _FRIIS_CONST)


def mmwave_path_loss(d: float, los: LosState | bool | str, model: MmwavePathLoss = MmwavePathLoss()) -> float:
    if isinstance(los, LosState):
        los = los.los
    elif isinstance(los, str):
        los = los == LOS
    d = max(d, MIN_DISTANCE)
    if los:
        return model.los_alpha + 10.0 * model.los_beta * math.log10(d)
    return model.nlos_alpha + 10.0 * model.nlos_beta * math.log10(d)


def nakagami_gain(rng: np.random.Generator, d: float, zones: NakagamiZones = NakagamiZones()) -> float:
    """Unit-mean power gain: Gamma(shape=m(d), scale=1/m(d))."""
    if d <= 0:
        raise ValueError("distance must be positive")
    m = zones.shape(d)
    return float(rng.gamma(m, 1.0 / m))


def nakagami_gain_m(rng: np.random.Generator, m: float, size: int | None = None):
    return rng.gamma(m, 1.0 / m, size)


def noise_power(bandwidth: float, noise_figure: float) -> float:
    """Thermal noise floor in dBm."""
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    return -174.0 + 10.0 * math.log10(bandwidth) + noise_figure


def received_power(budget: LinkBudget, path_loss: float, fading_gain: float = 1.0) -> float:
    """Received power in dBm."""
    if fading_gain <= 0:
        return -math.inf
    return budget.eirp_gain - path_loss + 10.0 * math.log10(fading_gain)


def sinr(m: float, i: float, o: float) -> SinrSample:
    if o <= 0:
        raise ValueError("noise power must be positive")
    if m < 0 or i < 0:
        raise ValueError("signal and interference must be non-negative")
    ratio = m / (i + o)
    if ratio <= 0:
        return SinrSample(m, i, o, SINR_FLOOR_DB)
    return SinrSample(m, i, o, max(10.0 * math.log10(ratio), SINR_FLOOR_DB))


def blockage_step(link: LosState, dt: float, rng: np.random.Generator) -> LosState:
    """Advance the blockage chain by ``dt`` seconds (in place; returns ``link``)."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    rate = link.rate_block if link.state == LOS else link.rate_clear
    if rate > 0 and rng.random() < -math.expm1(-rate * dt):
        link.state = NLOS if link.state == LOS else LOS
    return link


def decode(s: SinrSample, threshold: float) -> bool:
    return s.sinr_db >= threshold
