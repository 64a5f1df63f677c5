import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from driftforge.normalization import (
    DegenerateStatsError,
    NormStats,
    Normalizer,
    compute_diff_stats,
    compute_resistance_stats,
    compute_stats,
    denormalize_diff,
    denormalize_resistance,
    load_stats,
    normalize_diff,
    normalize_resistance,
    save_stats,
)


def test_constant_series_is_degenerate():
    mu, sigma = compute_resistance_stats([np.full(5, math.exp(10))])
    assert mu == pytest.approx(10, abs=1e-12) and sigma == 0
    with pytest.raises(DegenerateStatsError):
        compute_stats([np.full(5, math.exp(10))])


def test_two_point_stats():
    mu, sigma = compute_resistance_stats([[math.exp(2)], [math.exp(4)]])
    assert mu == pytest.approx(3, abs=1e-12)
    assert sigma == pytest.approx(1, abs=1e-12)


def test_two_level_average_weights_series_equally():
    # series means 1 and 4; a pooled mean would give 3.25
    mu, _ = compute_resistance_stats([np.exp([1.0]), np.exp([3.0, 5.0, 4.0])])
    assert mu == pytest.approx(2.5, abs=1e-12)


def test_diff_stats():
    assert compute_diff_stats([np.zeros(6)]) == (0.0, 0.0)
    mu, sigma = compute_diff_stats([np.array([0.0, 1.0, 2.0])])
    assert (mu, sigma) == (1.0, 0.0)
    with pytest.raises(ValueError):
        compute_diff_stats([np.array([1.0])])


def test_rejects_bad_input():
    with pytest.raises(ValueError):
        compute_resistance_stats([])
    with pytest.raises(ValueError):
        compute_resistance_stats([np.array([1.0, -2.0])])
    with pytest.raises(ValueError):
        normalize_resistance(0.0, 0, 1)
    with pytest.raises(ValueError):
        NormStats(0.0, 0.0, 0.0, 1.0, "")


def test_transform_examples():
    mu, s = 12.0, 0.5
    assert normalize_resistance(math.exp(mu), mu, s) == pytest.approx(0, abs=1e-12)
    assert normalize_resistance(math.exp(mu + s), mu, s) == pytest.approx(1, abs=1e-12)
    assert denormalize_resistance(0, mu, s) == pytest.approx(math.exp(mu), rel=1e-15)
    assert denormalize_resistance(1, mu, s) == pytest.approx(math.exp(mu + s), rel=1e-15)
    for r in (1e2, 1e4, 1e6):
        assert denormalize_resistance(normalize_resistance(r, mu, s), mu, s) == pytest.approx(r, rel=1e-12)
    assert normalize_diff(0.3, 0.3, 0.01) == 0
    assert normalize_diff(0.01, 0.0, 0.01) == pytest.approx(1)
    assert denormalize_diff(0.0, 0.7, 0.01) == 0.7
    assert denormalize_diff(1.0, 0.0, 0.01) == 0.01


def test_default_dataset_stats(default_dataset):
    stats = compute_stats(default_dataset)
    assert stats.sigma_R > 0 and stats.sigma_Dbar > 0
    assert all(math.isfinite(v) for v in (stats.mu_R, stats.sigma_R, stats.mu_Dbar, stats.sigma_Dbar))
    assert stats.dataset_hash == default_dataset.content_hash()
    z = Normalizer(stats).res(default_dataset.values)
    # the bulk sits in a bounded band; slowly relaxing low-resistance starts form a long tail
    assert np.mean(np.abs(z) <= 3) >= 0.95


def test_stats_permutation_invariant(small_dataset):
    v = small_dataset.values
    rng = np.random.default_rng(0)
    a = compute_resistance_stats(v)
    b = compute_resistance_stats(v[rng.permutation(len(v))][:, rng.permutation(v.shape[1])])
    assert a[0] == pytest.approx(b[0], rel=1e-12)
    assert a[1] == pytest.approx(b[1], rel=1e-12)


def test_stats_file_round_trip(tmp_path, small_stats):
    p = save_stats(small_stats, tmp_path / "s.json")
    back = load_stats(p)
    assert back == small_stats
    assert back.content_hash() == small_stats.content_hash()


@settings(max_examples=200, deadline=None)
@given(st.floats(1e2, 1e6), st.floats(-20, 20), st.floats(1e-3, 10))
def test_resistance_round_trip(r, mu, s):
    back = denormalize_resistance(normalize_resistance(r, mu, s), mu, s)
    assert back == pytest.approx(r, rel=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(1e-4, 1.0))
def test_diff_round_trip(a, b, s):
    assert denormalize_diff(normalize_diff(a, b, s), b, s) == pytest.approx(a, rel=1e-12, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.floats(1e2, 1e6), st.floats(1e-6, 1.0))
def test_normalize_monotone(r, frac):
    r2 = r * (1 + frac)
    assert normalize_resistance(r2, 12.0, 0.5) > normalize_resistance(r, 12.0, 0.5)
