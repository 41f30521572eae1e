import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from transit_handoff.channel import (ChannelConfig, draw_delivery, link_rng, loss_probability,
                                     mean_rssi, quantize_rssi, sample_rssi)


def log_distance_oracle(peak, exponent, range_m, floor, d):
    """Same law as mean_rssi, evaluated with 50-digit arithmetic."""
    mpmath.mp.dps = 50
    peak, exponent, range_m, d = map(mpmath.mpf, (peak, exponent, range_m, d))
    d0 = range_m / (mpmath.power(10, (peak - floor) / (10 * exponent)) - 1)
    return max(peak - 10 * exponent * mpmath.log10(1 + d / d0), mpmath.mpf(floor))


def test_zero_distance_is_peak():
    assert mean_rssi(ChannelConfig(peak_rssi=45), 0.0) == 45


def test_symmetric_in_distance():
    cfg = ChannelConfig(peak_rssi=45)
    for d in (0.5, 7.0, 33.3, 99.0):
        assert mean_rssi(cfg, d) == mean_rssi(cfg, -d)


def test_reaches_floor_at_range():
    cfg = ChannelConfig(peak_rssi=45, pathloss_exponent=2.0, range_m=100.0)
    oracle = log_distance_oracle(45, 2, 100, 0, 100)
    assert float(oracle) == pytest.approx(0.0, abs=1e-30)
    assert mean_rssi(cfg, 100.0) == cfg.rssi_floor


@pytest.mark.parametrize("d", [0.0, 1.0, 12.5, 40.0, 99.999])
def test_matches_high_precision_oracle(d):
    cfg = ChannelConfig(peak_rssi=45, pathloss_exponent=2.0, range_m=100.0)
    assert mean_rssi(cfg, d) == pytest.approx(float(log_distance_oracle(45, 2, 100, 0, d)),
                                              abs=1e-9)


def test_blinding_notch():
    cfg = ChannelConfig(peak_rssi=50, blinding_enabled=True, blinding_radius_m=3.0,
                        blinding_depth=12.0)
    assert mean_rssi(cfg, 0.0) == 38.0
    plain = ChannelConfig(peak_rssi=50)
    assert mean_rssi(cfg, 3.0) == mean_rssi(plain, 3.0)


@st.composite
def configs(draw):
    floor = draw(st.integers(0, 20))
    knee = draw(st.integers(floor + 1, 40))
    peak = draw(st.integers(knee + 1, 70))
    return ChannelConfig(
        peak_rssi=peak, rssi_floor=floor, loss_knee=knee,
        pathloss_exponent=draw(st.floats(0.5, 6.0)),
        range_m=draw(st.floats(5.0, 500.0)),
        fading_stddev=draw(st.floats(0.0, 6.0)),
        blinding_enabled=draw(st.booleans()),
        blinding_radius_m=draw(st.floats(0.0, 5.0)),
        blinding_depth=draw(st.floats(0.0, 20.0)),
        loss_max=draw(st.floats(0.0, 1.0)),
    )


@settings(max_examples=200, deadline=None)
@given(configs(), st.lists(st.floats(0.0, 1000.0), min_size=2, max_size=20))
def test_monotone_outside_blinding_radius(cfg, distances):
    ds = sorted(d + cfg.blinding_radius_m for d in distances)
    values = [mean_rssi(cfg, d) for d in ds]
    assert all(b <= a + 1e-12 for a, b in zip(values, values[1:]))
    assert all(v >= cfg.rssi_floor for v in values)


@settings(max_examples=100, deadline=None)
@given(configs(), st.floats(-300, 300), st.integers(0, 2**32), st.floats(-80, 80))
def test_samples_stay_on_scale(cfg, d, seed, offset):
    rng = np.random.default_rng(seed)
    for _ in range(20):
        assert 0 <= sample_rssi(cfg, d, rng, offset) <= 70


def test_no_fading_gives_rounded_mean():
    cfg = ChannelConfig(fading_stddev=0.0)
    rng = np.random.default_rng(0)
    for d in (0.0, 3.3, 17.0, 64.0):
        expected = quantize_rssi(mean_rssi(cfg, d))
        assert all(sample_rssi(cfg, d, rng) == expected for _ in range(50))


def test_same_seed_same_stream():
    cfg = ChannelConfig(fading_stddev=3.0)
    a, b = link_rng(7, 2), link_rng(7, 2)
    sa = [(sample_rssi(cfg, 25.0, a), draw_delivery(cfg, 20, a)) for _ in range(500)]
    sb = [(sample_rssi(cfg, 25.0, b), draw_delivery(cfg, 20, b)) for _ in range(500)]
    assert sa == sb
    c = link_rng(7, 3)
    assert [sample_rssi(cfg, 25.0, c) for _ in range(500)] != [s for s, _ in sa]


def test_fading_moments():
    # distance where the mean sits mid-scale so clipping never bites
    cfg = ChannelConfig(peak_rssi=60, fading_stddev=3.0)
    d = 10.0
    mu = mean_rssi(cfg, d)
    rng = np.random.default_rng(12345)
    xs = np.array([sample_rssi(cfg, d, rng) for _ in range(100_000)], dtype=float)
    assert abs(xs.mean() - mu) < 0.1
    # integer rounding adds 1/12 to the variance
    assert abs(xs.std() - 3.0) < 0.3
    assert abs(xs.var() - (9.0 + 1.0 / 12.0)) < 0.2


@pytest.mark.parametrize("rssi, expected", [(26, 0.0), (0, 0.4), (13, 0.2), (70, 0.0), (40, 0.0)])
def test_loss_probability_defaults(rssi, expected):
    assert loss_probability(ChannelConfig(), rssi) == pytest.approx(expected)


def test_loss_monotone():
    cfg = ChannelConfig()
    ps = [loss_probability(cfg, r) for r in range(71)]
    assert all(b <= a for a, b in zip(ps, ps[1:]))
    assert all(p == 0 for p in ps[cfg.loss_knee:])


def test_delivery_rate_tracks_probability():
    cfg = ChannelConfig()
    rng = np.random.default_rng(99)
    n = 40_000
    lost = sum(not draw_delivery(cfg, 13, rng) for _ in range(n))
    assert lost / n == pytest.approx(0.2, abs=0.01)


@pytest.mark.parametrize("kwargs", [
    dict(rssi_floor=30, loss_knee=26),
    dict(loss_knee=60, peak_rssi=60),
    dict(peak_rssi=71),
    dict(loss_max=1.5),
    dict(fading_stddev=-1),
    dict(range_m=0),
])
def test_config_invariants(kwargs):
    with pytest.raises(ValueError):
        ChannelConfig(**kwargs)
