from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mpqte.data import MatchedSample, QuantileGrid
from mpqte.errors import ConfigError, EmptyInput, ZeroTotalWeight
from mpqte.quantiles import (
    ate_estimate,
    check_loss,
    diq_estimate,
    empirical_quantile,
    empirical_quantiles,
    sorted_weighted_quantiles,
    weighted_quantile,
    weighted_quantile_index,
)
from mpqte.simulation import DgpSpec, generate, true_qte

from conftest import random_mpd


def brute_force_quantile(values, weights, tau):
    """Smallest sample value minimizing the weighted check loss, in exact rational arithmetic.

    tau is read as the decimal it was written as (0.9 means 9/10), so integer
    n * tau produces a genuine tie between two order statistics.
    """
    t = Fraction(repr(float(tau)))
    vals = [Fraction(v) for v in values]
    ws = [Fraction(w) for w in weights]

    def loss(q):
        total = Fraction(0)
        for v, w in zip(vals, ws):
            u = v - q
            total += w * u * (t - (1 if u <= 0 else 0))
        return total

    best = min(sorted(set(vals)), key=loss)
    return float(best)


def test_check_loss():
    assert check_loss(2.0, 0.25) == 0.5
    assert check_loss(-2.0, 0.25) == 1.5
    assert check_loss(0.0, 0.5) == 0.0


def test_empirical_quantile_examples():
    assert empirical_quantile([1, 2, 3, 4, 5], 0.5) == 3
    assert empirical_quantile([1, 2, 3, 4], 0.5) == 2
    assert empirical_quantile([7], 0.25) == 7


def test_even_median_is_a_check_loss_minimizer():
    # both 2 and 3 minimize; the lower endpoint is returned
    assert brute_force_quantile([1, 2, 3, 4], [1, 1, 1, 1], 0.5) == 2


def test_empirical_quantile_float_noise():
    # 100 * 0.07 evaluates to 7.000000000000001 in floating point
    v = np.arange(1.0, 101.0)
    assert empirical_quantile(v, 0.07) == 7.0


def test_empirical_quantile_errors():
    with pytest.raises(EmptyInput):
        empirical_quantile([], 0.5)
    with pytest.raises(ConfigError):
        empirical_quantile([1.0], 1.0)


def test_weighted_quantile_examples():
    assert weighted_quantile([1, 2, 3], [1, 1, 10], 0.5) == 3
    assert brute_force_quantile([1, 2, 3], [1, 1, 10], 0.5) == 3
    for tau in (0.1, 0.5, 0.9):
        assert weighted_quantile([5, 5, 5], [0.2, 3, 1], tau) == 5


def test_weighted_quantile_tied_values_smallest_index():
    assert weighted_quantile_index([3.0, 1.0, 3.0, 1.0], [1, 1, 1, 1], 0.75) == 0
    assert weighted_quantile_index([3.0, 1.0, 3.0, 1.0], [1, 1, 1, 1], 0.25) == 1


def test_weighted_quantile_errors():
    with pytest.raises(ZeroTotalWeight):
        weighted_quantile([1, 2], [0, 0], 0.5)
    with pytest.raises(EmptyInput):
        weighted_quantile([], [], 0.5)
    with pytest.raises(ConfigError):
        weighted_quantile([1, 2], [1], 0.5)
    with pytest.raises(ConfigError):
        weighted_quantile([1, 2], [1, -1], 0.5)


@pytest.mark.parametrize("tau", [0.05, 0.25, 0.3, 0.5, 0.7, 0.75, 0.99])
def test_equal_weights_reduce_to_empirical(tau, rng):
    v = rng.normal(size=37)
    assert weighted_quantile(v, np.full(37, 2.5), tau) == empirical_quantile(v, tau)


def test_weighted_quantile_matches_brute_force_500_instances():
    rng = np.random.default_rng(20240501)
    for _ in range(500):
        n = int(rng.integers(1, 30))
        v = rng.normal(size=n)
        if rng.random() < 0.3:
            v = np.round(v)  # force ties
        w = rng.exponential(size=n) if rng.random() < 0.5 else rng.integers(0, 4, size=n).astype(float)
        if w.sum() == 0:
            w[0] = 1.0
        tau = float(rng.choice([0.1, 0.25, 0.5, 0.75, rng.uniform(0.01, 0.99)]))
        assert weighted_quantile(v, w, tau) == brute_force_quantile(v, w, tau)


finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.tuples(finite, st.integers(0, 5)), min_size=1, max_size=40),
    st.sampled_from([0.1, 0.25, 0.5, 0.75, 0.9]),
)
def test_weighted_quantile_minimizes_check_loss(data, tau):
    v = np.array([d[0] for d in data])
    w = np.array([float(d[1]) for d in data])
    if w.sum() == 0:
        w[0] = 1.0
    q = weighted_quantile(v, w, tau)
    assert q in v
    assert q == brute_force_quantile(v, w, tau)


@settings(max_examples=100, deadline=None)
@given(st.lists(finite, min_size=1, max_size=50), finite)
def test_quantiles_shift_equivariant_and_monotone(values, c):
    v = np.array(values)
    taus = [0.1, 0.25, 0.5, 0.75, 0.9]
    q = empirical_quantiles(v, taus)
    assert np.all(np.diff(q) >= 0)
    # x -> x + c is monotone in floating point, so order statistics shift exactly
    np.testing.assert_array_equal(empirical_quantiles(v + c, taus), np.sort(v)[[int(np.ceil(round(len(v) * t, 9))) - 1 for t in taus]] + c)
    w = np.ones_like(v)
    for t in taus:
        assert weighted_quantile(v + c, w, t) == weighted_quantile(v, w, t) + c


def test_sorted_weighted_quantiles_matches_scalar(rng):
    v = np.sort(rng.normal(size=25))
    w = rng.exponential(size=(40, 25))
    taus = (0.2, 0.5, 0.8)
    out = sorted_weighted_quantiles(v, w, taus)
    for b in range(40):
        for j, t in enumerate(taus):
            assert out[b, j] == weighted_quantile(v, w[b], t)


def test_diq_identical_arms_and_shift():
    y0 = np.array([3.0, 1.0, 4.0, 1.5])
    grid = QuantileGrid((0.25, 0.5, 0.75))
    same = MatchedSample.from_arrays(np.r_[y0, y0], np.zeros(8), [1] * 4 + [0] * 4)
    assert np.all(diq_estimate(same, grid) == 0)
    shifted = MatchedSample.from_arrays(np.r_[y0 + 1, y0], np.zeros(8), [1] * 4 + [0] * 4)
    np.testing.assert_allclose(diq_estimate(shifted, grid), 1.0)


def test_diq_invariant_to_permutation(rng):
    s = random_mpd(20, rng)
    perm = rng.permutation(40)
    t = MatchedSample.from_arrays(s.y[perm], s.x[perm], s.a[perm])
    grid = (0.25, 0.5, 0.75)
    np.testing.assert_array_equal(diq_estimate(s, grid), diq_estimate(t, grid))


def test_ate_examples():
    s = MatchedSample.from_arrays([2, 4, 1, 3], np.zeros(4), [1, 1, 0, 0])
    assert ate_estimate(s) == 1.0
    s = MatchedSample.from_arrays([2, 4, 2, 4], np.zeros(4), [1, 1, 0, 0])
    assert ate_estimate(s) == 0.0


def test_model1_large_sample_estimates():
    spec = DgpSpec("M1", 1000)
    s = generate(spec, np.random.default_rng(99)).sample
    assert abs(diq_estimate(s, (0.5,))[0] - true_qte(spec, (0.5,))[0]) < 0.15
    assert abs(ate_estimate(s)) < 0.2
