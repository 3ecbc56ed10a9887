import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from flowalpha.engine import Signal, cross_normalize
from flowalpha.rewards import (REWARD_FLOOR, RewardBreakdown, anneal_weights,
                               behavioral_distance, combined, daily_corr, degenerate_breakdown,
                               ic, neighbor_weights, r_ic, r_nov, r_sa)

from oracles import COMBINED_HALF_ANNEAL, R_SA_UNIT_DISTANCE_2, daily_pearson


def signal(x, valid_from=0):
    z, flat = cross_normalize(np.asarray(x, dtype=np.float64))
    return Signal(z, valid_from, bool(flat.all()), flat)


def test_daily_corr_matches_scipy():
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=(30, 15)), rng.normal(size=(30, 15))
    x[3, 4] = np.nan
    y[7, :] = 1.0
    rho = daily_corr(x, y)
    assert np.isnan(rho[7])
    np.testing.assert_allclose(rho[np.isfinite(rho)], daily_pearson(x, y), atol=1e-12)


def test_r_ic_self_and_negation():
    x = np.random.default_rng(1).normal(size=(50, 20))
    s = signal(x)
    assert r_ic(s, s.values) == pytest.approx(1.0, abs=1e-12)
    assert r_ic(s, -s.values) == pytest.approx(1.0, abs=1e-12)


def test_r_ic_null_distribution():
    rng = np.random.default_rng(2)
    s = signal(rng.normal(size=(500, 100)))
    assert r_ic(s, rng.normal(size=(500, 100))) <= 0.02


def test_r_ic_all_degenerate_is_zero():
    s = signal(np.ones((10, 5)))
    assert r_ic(s, np.random.default_rng(0).normal(size=(10, 5))) == 0.0


@given(st.integers(0, 10_000), st.booleans())
def test_r_ic_affine_and_sign_invariance(seed, flip):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(20, 12)), rng.normal(size=(20, 12))
    a = rng.uniform(0.1, 10, size=(20, 1))
    b = rng.normal(size=(20, 1)) * 5
    x2 = (a * x + b) * (-1 if flip else 1)
    assert r_ic(signal(x2), y) == pytest.approx(r_ic(signal(x), y), abs=1e-10)


def test_behavioral_distance_examples():
    z = signal(np.random.default_rng(3).normal(size=(40, 25))).values
    assert behavioral_distance(z, z) == 0.0
    # z against -z: E[(2z)^2] = 4
    assert behavioral_distance(z, -z) == pytest.approx(4.0, abs=1e-12)
    with pytest.raises(ValueError):
        behavioral_distance(z, z[:-1])


def _orthogonal_unit_rows(D, N, seed=0):
    """Two signals whose rows are zero-mean, unit-variance and exactly uncorrelated."""
    rng = np.random.default_rng(seed)
    a, b = np.empty((D, N)), np.empty((D, N))
    for d in range(D):
        q, _ = np.linalg.qr(np.column_stack([np.ones(N), rng.normal(size=(N, 2))]))
        a[d], b[d] = q[:, 1] * math.sqrt(N), q[:, 2] * math.sqrt(N)
    return a, b


def test_r_sa_closed_forms():
    a, b = _orthogonal_unit_rows(30, 16)
    e = np.array([0.3, -1.0])
    assert behavioral_distance(a, b) == pytest.approx(2.0, abs=1e-12)
    assert r_sa(e, a, e[None, :], [b]) == pytest.approx(R_SA_UNIT_DISTANCE_2, abs=1e-9)
    assert r_sa(e, a, e[None, :], [a]) == 1.0
    assert r_sa(e, a, -e[None, :], [-a]) == pytest.approx(math.exp(-4.0), abs=1e-9)
    assert r_sa(e, a, np.zeros((0, 2)), []) == 1.0
    with pytest.raises(ValueError):
        r_sa(e, a, e[None, :], [a], k=0)


def test_neighbor_weights():
    idx, w = neighbor_weights(np.zeros(2), np.array([[1.0, 0.0], [0.0, -1.0], [5.0, 5.0]]), k=2)
    assert sorted(idx.tolist()) == [0, 1]
    np.testing.assert_allclose(w, [0.5, 0.5])
    idx, w = neighbor_weights(np.zeros(2), np.ones((3, 2)), k=5)
    assert len(idx) == 3


@given(st.integers(0, 1000))
def test_r_sa_non_increasing_in_distance(seed):
    rng = np.random.default_rng(seed)
    z = signal(rng.normal(size=(10, 8))).values
    near = signal(z + 0.1 * rng.normal(size=z.shape)).values
    e = rng.normal(size=3)
    pe = e[None, :] + 0.01
    close = r_sa(e, z, pe, [near])
    far = r_sa(e, z, pe, [2 * near - z])
    assert 0 < far <= close <= 1


def test_r_nov_examples():
    x = signal(np.random.default_rng(4).normal(size=(30, 10))).values
    assert r_nov(x, []) == 1.0
    assert r_nov(x, [x]) == pytest.approx(0.0, abs=1e-12)
    assert r_nov(x, [-x]) == pytest.approx(0.0, abs=1e-12)
    other = signal(np.random.default_rng(5).normal(size=(30, 10))).values
    assert 0.5 < r_nov(x, [other]) <= 1.0


def test_anneal_examples():
    assert anneal_weights(0, 100) == (1.0, 0.3)
    assert anneal_weights(100, 100) == (0.0, 0.0)
    assert anneal_weights(250, 100) == (0.0, 0.0)
    with pytest.raises(ValueError):
        anneal_weights(0, 0)


def test_combined_examples():
    assert combined(0.1, 0.5, 1.0, 50, 100).total == pytest.approx(COMBINED_HALF_ANNEAL, abs=1e-15)
    for T in (100, 101, 10_000):
        assert combined(0.123456789, 0.7, 0.9, T, 100).total == 0.123456789


def test_reward_floor():
    b = degenerate_breakdown(5, 10)
    assert b.reward == REWARD_FLOOR and b.degenerate
    assert RewardBreakdown(0, 0, 0, 0, 0, 0.0).reward == REWARD_FLOOR
    assert RewardBreakdown(0, 0, 0, 0, 0, float("nan")).log_reward == math.log(REWARD_FLOOR)
    assert ic(np.full((3, 4), np.nan), np.ones((3, 4))) != ic(np.ones((3, 4)), np.ones((3, 4)))
