import numpy as np
import pytest

from mpqte.data import MatchedSample
from mpqte.errors import AllCandidatesFailed, BadSpec, ConfigError, LeverageOne, SingularDesign
from mpqte.sieve import (
    CvTarget,
    Family,
    SieveSpec,
    batched_propensity,
    build_basis,
    default_candidates,
    default_spec,
    design_matrix,
    fit_propensity,
    loo_criterion,
    loo_cv_score,
    resolve_knots,
    select_basis_cv,
)
from mpqte.simulation import DgpSpec, generate

from conftest import random_mpd

INTERCEPT = SieveSpec(Family.POWER, 0, ())
LINEAR = SieveSpec(Family.POWER, 1, ())


def test_basis_examples():
    np.testing.assert_array_equal(build_basis(2.0, SieveSpec(Family.POWER, 2), np.zeros((1, 0))), [1, 2, 4])
    spline = SieveSpec(Family.SPLINE, 2, (0.5,))
    np.testing.assert_allclose(build_basis(0.7, spline, [[0.5]]), [1, 0.7, 0.2])
    np.testing.assert_array_equal(build_basis(0.3, spline, [[0.5]]), [1, 0.3, 0])


def test_basis_first_component_is_one(rng):
    x = rng.uniform(size=(30, 2))
    for spec in default_candidates(2) + [SieveSpec(Family.POWER, 3, (), True)]:
        d = design_matrix(x, spec, resolve_knots(x, spec))
        assert np.all(d[:, 0] == 1)
        assert d.shape[1] == spec.dimension(2)


def test_default_basis_scalar():
    spec = default_spec(1)
    x = np.linspace(0, 1, 11)
    k = resolve_knots(x, spec)
    assert k.tolist() == [[0.5]]
    np.testing.assert_allclose(design_matrix(x, spec, k)[8], [1, 0.8, 0.64, 0.09])


def test_interactions():
    spec = SieveSpec(Family.POWER, 1, (), True)
    np.testing.assert_array_equal(build_basis([2.0, 3.0], spec, np.zeros((2, 0))), [1, 2, 3, 6])


def test_bad_specs():
    with pytest.raises(BadSpec):
        SieveSpec(Family.SPLINE, 1)
    with pytest.raises(BadSpec):
        SieveSpec(Family.POWER, -1)
    with pytest.raises(BadSpec):
        SieveSpec(Family.SPLINE, 2, (1.5,))


def test_intercept_only_fit(rng):
    s = random_mpd(10, rng)
    fit = fit_propensity(s, INTERCEPT)
    np.testing.assert_allclose(fit.theta_hat, [0.5], atol=1e-15)
    np.testing.assert_allclose(fit.a_hat, 0.5, atol=1e-15)


def test_duplicate_columns_singular(rng):
    s = random_mpd(10, rng)
    dup = MatchedSample.from_arrays(s.y, np.column_stack([s.x[:, 0], s.x[:, 0]]), s.a, s.pairs)
    with pytest.raises(SingularDesign):
        fit_propensity(dup, LINEAR)


def test_identical_covariates_within_pair(rng):
    n = 15
    xp = rng.uniform(size=n)
    x = np.repeat(xp, 2)
    a = np.tile([1, 0], n)
    s = MatchedSample.from_arrays(rng.normal(size=2 * n), x, a, np.arange(2 * n).reshape(n, 2))
    fit = fit_propensity(s, LINEAR)
    np.testing.assert_allclose(fit.theta_hat, [0.5, 0.0], atol=1e-12)


def test_weighted_fit_matches_lstsq(rng):
    s = random_mpd(20, rng)
    spec = default_spec(1)
    xi = rng.exponential(size=40)
    fit = fit_propensity(s, spec, xi)
    d = design_matrix(s.x, spec, resolve_knots(s.x, spec))
    sw = np.sqrt(xi)
    theta, *_ = np.linalg.lstsq(d * sw[:, None], s.a * sw, rcond=None)
    np.testing.assert_allclose(fit.theta_hat, theta, rtol=1e-8, atol=1e-10)
    np.testing.assert_allclose(fit.a_hat, np.clip(d @ theta, 0.01, 0.99), atol=1e-10)


def test_batched_matches_single(rng):
    s = random_mpd(25, rng)
    spec = default_spec(1)
    knots = resolve_knots(s.x, spec)
    d = design_matrix(s.x, spec, knots)
    xi = rng.exponential(size=(7, 50))
    a_hat, clamped = batched_propensity(d, s.a.astype(float), xi)
    for b in range(7):
        fit = fit_propensity(s, spec, xi[b], knots)
        np.testing.assert_allclose(a_hat[b], fit.a_hat, rtol=1e-10, atol=1e-12)
        assert int(clamped[b].sum()) == fit.clamped


def test_mean_fitted_propensity_is_half(rng):
    for _ in range(5):
        s = random_mpd(30, rng)
        fit = fit_propensity(s, default_spec(1))
        assert fit.clamped == 0
        assert abs(fit.a_hat.mean() - 0.5) < 1e-12


def test_too_many_basis_functions(rng):
    s = random_mpd(2, rng)
    with pytest.raises(SingularDesign):
        fit_propensity(s, SieveSpec(Family.POWER, 4))


def refit_oracle(design, response):
    """Mean squared leave-one-out prediction error by n explicit refits."""
    n = design.shape[0]
    errs = []
    for j in range(n):
        keep = np.arange(n) != j
        theta, *_ = np.linalg.lstsq(design[keep], response[keep], rcond=None)
        errs.append(response[j] - design[j] @ theta)
    return float(np.mean(np.square(errs)))


def test_loo_intercept_constant_target():
    d = np.ones((6, 1))
    assert loo_criterion(d, np.full(6, 3.0)) == pytest.approx(0.0, abs=1e-20)


def test_loo_matches_refit_n10(rng):
    x = rng.uniform(size=10)
    d = design_matrix(x, SieveSpec(Family.POWER, 2), np.zeros((1, 0)))
    r = rng.normal(size=10)
    assert loo_criterion(d, r) == pytest.approx(refit_oracle(d, r), rel=1e-10)


def test_loo_saturated_basis():
    x = np.array([0.1, 0.5, 0.9])
    d = design_matrix(x, SieveSpec(Family.POWER, 2), np.zeros((1, 0)))
    with pytest.raises(LeverageOne):
        loo_criterion(d, np.array([1.0, 2.0, 0.0]))


def test_loo_cv_score_matches_refit_oracle_all_small_instances():
    rng = np.random.default_rng(77)
    for _ in range(40):
        n = int(rng.integers(6, 26))
        s = random_mpd(n, rng, d_x=int(rng.integers(1, 3)))
        spec = default_candidates(s.d_x)[int(rng.integers(0, 4))]
        target = CvTarget.mean() if rng.random() < 0.5 else CvTarget.quantile(0.5)
        try:
            s1, s0 = loo_cv_score(s, spec, target)
        except (LeverageOne, SingularDesign):
            continue
        knots = resolve_knots(s.x, spec)
        for arm, score in ((1, s1), (0, s0)):
            idx = s.a == arm
            d = design_matrix(s.x[idx], spec, knots)
            oracle = refit_oracle(d, target.response(s.y[idx]))
            assert score == pytest.approx(oracle, rel=1e-8, abs=1e-14)


def test_cv_target_response():
    y = np.array([3.0, 1.0, 2.0, 4.0])
    assert CvTarget.quantile(0.5).response(y).tolist() == [0, 1, 1, 0]
    assert CvTarget.mean().response(y).tolist() == y.tolist()


def test_select_single_and_identical_candidates(rng):
    s = random_mpd(20, rng)
    spec = default_spec(1)
    assert select_basis_cv(s, [spec], CvTarget.mean()) == (spec, spec)
    twin = SieveSpec(spec.family, spec.degree_or_order, spec.knots, spec.include_interactions)
    picks = select_basis_cv(s, [LINEAR, LINEAR], CvTarget.mean())
    assert picks[0] is LINEAR and picks[1] is LINEAR
    assert twin == spec


def test_select_prefers_smaller_basis_on_ties():
    # Constant outcome: every candidate scores 0, so the smallest basis wins.
    rng = np.random.default_rng(3)
    s = random_mpd(10, rng)
    s = MatchedSample.from_arrays(np.ones(20), s.x, s.a, s.pairs)
    picks = select_basis_cv(s, [LINEAR, INTERCEPT], CvTarget.mean())
    assert picks == (INTERCEPT, INTERCEPT)


def test_select_linear_truth():
    hits = 0
    for seed in range(200):
        rng = np.random.default_rng(seed)
        s = random_mpd(200, rng)
        y = 2.0 * s.x[:, 0] + rng.normal(size=400)
        s = MatchedSample.from_arrays(y, s.x, s.a, s.pairs)
        picks = select_basis_cv(s, [INTERCEPT, LINEAR], CvTarget.mean())
        hits += picks == (LINEAR, LINEAR)
    assert hits / 200 > 0.9


def test_all_candidates_fail(rng):
    s = random_mpd(2, rng)
    with pytest.raises(AllCandidatesFailed):
        select_basis_cv(s, [SieveSpec(Family.POWER, 5)], CvTarget.mean())
    with pytest.raises(ConfigError):
        select_basis_cv(s, [], CvTarget.mean())


@pytest.mark.parametrize("model", ["M1", "M2", "M3", "M4"])
def test_clamping_rare_with_default_basis(model):
    clamped = total = 0
    for seed in range(100):
        s = generate(DgpSpec(model, 50), np.random.default_rng(seed)).sample
        fit = fit_propensity(s, default_spec(s.d_x))
        clamped += fit.clamped
        total += s.y.size
    assert clamped / total < 0.01
