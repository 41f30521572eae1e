"""Per-packet RSSI and delivery model for one mobile/fixed-node link.

RSSI follows the Atheros convention (SNR + 96 clipped to 0..70). The mean
decays with a log-distance law, gets Gaussian fading in the RSSI (dB) domain,
and packet loss is a piecewise-linear function of the sampled RSSI.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

RSSI_MIN = 0
RSSI_MAX = 70

UPLINK = "uplink"
DOWNLINK = "downlink"
DIRECTIONS = (UPLINK, DOWNLINK)


@dataclass(frozen=True)
class ChannelConfig:
    peak_rssi: int = 60
    pathloss_exponent: float = 4.0
    range_m: float = 120.0
    fading_stddev: float = 1.0
    blinding_enabled: bool = False
    blinding_radius_m: float = 2.0
    blinding_depth: float = 10.0
    rssi_floor: int = 0
    loss_knee: int = 26
    loss_max: float = 0.4
    rng_seed: int = 0

    def __post_init__(self):
        if not (0 <= self.rssi_floor < self.loss_knee < self.peak_rssi <= RSSI_MAX):
            raise ValueError(
                "require 0 <= rssi_floor < loss_knee < peak_rssi <= 70, got "
                f"floor={self.rssi_floor} knee={self.loss_knee} peak={self.peak_rssi}"
            )
        if not 0.0 <= self.loss_max <= 1.0:
            raise ValueError(f"loss_max must be in [0, 1], got {self.loss_max}")
        if self.fading_stddev < 0:
            raise ValueError("fading_stddev must be >= 0")
        if self.range_m <= 0:
            raise ValueError("range_m must be > 0")
        if self.pathloss_exponent <= 0:
            raise ValueError("pathloss_exponent must be > 0")
        if self.blinding_radius_m < 0 or self.blinding_depth < 0:
            raise ValueError("blinding radius and depth must be >= 0")

    @property
    def reference_distance(self) -> float:
        """Distance scale d0 chosen so the mean reaches the floor at range_m."""
        span_db = self.peak_rssi - self.rssi_floor
        return self.range_m / (10.0 ** (span_db / (10.0 * self.pathloss_exponent)) - 1.0)


@dataclass(frozen=True)
class RssiSample:
    tick: int
    node_id: str
    raw_rssi: int
    delivered: bool
    direction: str = DOWNLINK
    # "data" or "probe"; not part of the CSV schema
    traffic: str = field(default="data", compare=False)


def mean_rssi(config: ChannelConfig, distance: float) -> float:
    d = abs(distance)
    if d >= config.range_m:
        value = float(config.rssi_floor)
    else:
        d0 = config.reference_distance
        value = config.peak_rssi - 10.0 * config.pathloss_exponent * math.log10(1.0 + d / d0)
    if config.blinding_enabled and d < config.blinding_radius_m:
        # linear notch, full depth at zero distance
        value -= config.blinding_depth * (1.0 - d / config.blinding_radius_m)
    return max(value, float(config.rssi_floor))


def quantize_rssi(value: float) -> int:
    """Round half up and clip to the 0..70 scale."""
    return int(min(max(math.floor(value + 0.5), RSSI_MIN), RSSI_MAX))


def sample_rssi(config: ChannelConfig, distance: float, rng: np.random.Generator,
                offset: float = 0.0) -> int:
    """Draw one integer RSSI reading. ``offset`` is an extra additive term
    (e.g. a scripted fade) applied to the mean before fading."""
    noise = rng.normal(0.0, config.fading_stddev)
    return quantize_rssi(mean_rssi(config, distance) + offset + noise)


def loss_probability(config: ChannelConfig, raw_rssi: float) -> float:
    if raw_rssi >= config.loss_knee:
        return 0.0
    frac = (config.loss_knee - raw_rssi) / (config.loss_knee - config.rssi_floor)
    return min(max(config.loss_max * frac, 0.0), config.loss_max)


def draw_delivery(config: ChannelConfig, raw_rssi: int, rng: np.random.Generator) -> bool:
    # always consume one uniform so stream alignment does not depend on RSSI
    u = rng.random()
    return bool(u >= loss_probability(config, raw_rssi))


def link_rng(seed: int, link_index: int, config_seed: int = 0) -> np.random.Generator:
    """Independent generator per link so traffic on one link never shifts
    the random stream of another."""
    mask = 0xFFFFFFFFFFFFFFFF
    ss = np.random.SeedSequence([seed & mask, link_index, config_seed & mask])
    return np.random.Generator(np.random.PCG64(ss))
