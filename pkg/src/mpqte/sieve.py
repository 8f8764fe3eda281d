"""Sieve bases, the linear propensity regression, and leave-one-out basis selection."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.linalg

from .data import MatchedSample
from .errors import AllCandidatesFailed, BadSpec, ConfigError, LeverageOne, NumericalError, SingularDesign
from .quantiles import empirical_quantile

CLAMP_LO = 0.01
CLAMP_HI = 0.99
MAX_CONDITION = 1e12
LEVERAGE_TOL = 1e-8


class Family(str, enum.Enum):
    POWER = "power"
    SPLINE = "spline"


@dataclass(frozen=True)
class SieveSpec:
    """A linear sieve.

    ``power``: per covariate x, x^2, ..., x^degree.
    ``spline`` of order r: per covariate x, ..., x^(r-1) and, for each knot t,
    max(x - t, 0)^(r-1).
    Knots are given as quantile levels of each covariate and resolved against
    a sample. The constant 1 is always the first basis function; pairwise
    products x_l * x_m are appended when ``include_interactions`` is set.
    """

    family: Family = Family.SPLINE
    degree_or_order: int = 3
    knots: tuple = (0.5,)
    include_interactions: bool = False

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        object.__setattr__(self, "knots", tuple(float(k) for k in self.knots))
        if self.family is Family.POWER and self.degree_or_order < 0:
            raise BadSpec("power degree must be >= 0")
        if self.family is Family.SPLINE and self.degree_or_order < 2:
            raise BadSpec("spline order must be >= 2")
        if any(not 0.0 < k < 1.0 for k in self.knots):
            raise BadSpec("knot levels must lie in (0, 1)")

    def dimension(self, d_x: int) -> int:
        if self.family is Family.POWER:
            per = self.degree_or_order
        else:
            per = self.degree_or_order - 1 + len(self.knots)
        inter = d_x * (d_x - 1) // 2 if self.include_interactions else 0
        return 1 + d_x * per + inter

    def describe(self) -> str:
        if self.family is Family.POWER:
            s = f"power(degree={self.degree_or_order})"
        else:
            s = f"spline(order={self.degree_or_order}, knots={list(self.knots)})"
        return s + (" + interactions" if self.include_interactions else "")


def resolve_knots(x, spec: SieveSpec) -> np.ndarray:
    """Knot locations, ``(d_x, n_knots)``, at empirical quantiles of each covariate."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if spec.family is Family.POWER or not spec.knots:
        return np.zeros((x.shape[1], 0))
    return np.array([[empirical_quantile(x[:, l], lv) for lv in spec.knots] for l in range(x.shape[1])])


def design_matrix(x, spec: SieveSpec, knot_values) -> np.ndarray:
    """Rows are basis vectors b(X_i)."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    knot_values = np.asarray(knot_values, dtype=float).reshape(x.shape[1], -1)
    cols = [np.ones(x.shape[0])]
    for l in range(x.shape[1]):
        xl = x[:, l]
        if spec.family is Family.POWER:
            cols.extend(xl**p for p in range(1, spec.degree_or_order + 1))
        else:
            r = spec.degree_or_order
            cols.extend(xl**p for p in range(1, r))
            cols.extend(np.maximum(xl - t, 0.0) ** (r - 1) for t in knot_values[l])
    if spec.include_interactions:
        for l in range(x.shape[1]):
            for m in range(l + 1, x.shape[1]):
                cols.append(x[:, l] * x[:, m])
    out = np.column_stack(cols)
    if out.shape[1] < 1:
        raise BadSpec("zero-dimensional basis")
    return out


def build_basis(x, spec: SieveSpec, knot_values) -> np.ndarray:
    """b(x) for a single unit."""
    return design_matrix(np.atleast_1d(np.asarray(x, dtype=float))[None, :], spec, knot_values)[0]


@dataclass(frozen=True, eq=False)
class PropensityFit:
    theta_hat: np.ndarray
    a_hat: np.ndarray
    spec: SieveSpec
    clamped: int = 0


def weighted_lstsq(design: np.ndarray, target: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """argmin_theta sum_i w_i (t_i - d_i' theta)^2 via a Cholesky solve of the normal equations."""
    gram = design.T @ (weights[:, None] * design)
    rhs = design.T @ (weights * target)
    _check_gram(gram)
    try:
        return scipy.linalg.solve(gram, rhs, assume_a="pos")
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as exc:
        raise SingularDesign(str(exc)) from None


def _check_gram(gram: np.ndarray) -> None:
    if not np.all(np.isfinite(gram)):
        raise SingularDesign("non-finite Gram matrix")
    ev = np.linalg.eigvalsh(gram)
    if ev[-1] <= 0 or ev[0] <= ev[-1] / MAX_CONDITION:
        raise SingularDesign(
            f"weighted Gram matrix is numerically singular (eigenvalues {ev[0]:.3g}..{ev[-1]:.3g})"
        )


def fit_propensity(
    sample: MatchedSample, spec: SieveSpec, weights=None, knot_values=None
) -> PropensityFit:
    """Weighted linear-probability sieve regression of A on b(X), clamped to [0.01, 0.99]."""
    if knot_values is None:
        knot_values = resolve_knots(sample.x, spec)
    design = design_matrix(sample.x, spec, knot_values)
    if design.shape[1] >= sample.y.size:
        raise SingularDesign(f"basis dimension {design.shape[1]} >= sample size {sample.y.size}")
    w = np.ones(sample.y.size) if weights is None else np.asarray(weights, dtype=float)
    theta = weighted_lstsq(design, sample.a.astype(float), w)
    raw = design @ theta
    a_hat = np.clip(raw, CLAMP_LO, CLAMP_HI)
    return PropensityFit(theta, a_hat, spec, int(np.sum(a_hat != raw)))


def batched_propensity(design: np.ndarray, a: np.ndarray, weights: np.ndarray) -> tuple:
    """Fitted propensities for many weight vectors at once.

    ``weights`` is ``(B, m)``; returns ``(a_hat, clamped)``, both ``(B, m)``,
    where ``clamped`` flags fitted values that hit the clamp.
    """
    w = np.atleast_2d(weights)
    gram = np.einsum("bi,ik,il->bkl", w, design, design)
    rhs = np.einsum("bi,ik->bk", w, design * a[:, None])
    if not np.all(np.isfinite(gram)):
        raise SingularDesign("non-finite Gram matrix")
    ev = np.linalg.eigvalsh(gram)
    bad = (ev[:, -1] <= 0) | (ev[:, 0] <= ev[:, -1] / MAX_CONDITION)
    if np.any(bad):
        raise SingularDesign(f"weighted Gram matrix is numerically singular for weight row {int(np.argmax(bad))}")
    try:
        theta = np.linalg.solve(gram, rhs[:, :, None])[:, :, 0]
    except np.linalg.LinAlgError as exc:
        raise SingularDesign(str(exc)) from None
    raw = np.einsum("bk,ik->bi", theta, design, optimize=False)
    a_hat = np.clip(raw, CLAMP_LO, CLAMP_HI)
    return a_hat, a_hat != raw


class CvTarget:
    """What the leave-one-out criterion regresses on the basis.

    ``CvTarget.quantile(tau)`` uses 1{Y <= q_a(tau)} within each arm;
    ``CvTarget.mean()`` uses Y itself.
    """

    def __init__(self, tau: Optional[float] = None):
        self.tau = tau

    @classmethod
    def quantile(cls, tau: float) -> "CvTarget":
        return cls(float(tau))

    @classmethod
    def mean(cls) -> "CvTarget":
        return cls(None)

    def response(self, y: np.ndarray) -> np.ndarray:
        if self.tau is None:
            return y.astype(float)
        return (y <= empirical_quantile(y, self.tau)).astype(float)

    def __repr__(self):
        return "CvTarget.mean()" if self.tau is None else f"CvTarget.quantile({self.tau})"


def loo_criterion(design: np.ndarray, response: np.ndarray) -> float:
    """(1/n) * sum_j (e_j / (1 - h_j))^2 from a single least-squares fit."""
    n, k = design.shape
    if k > n:
        raise SingularDesign(f"basis dimension {k} exceeds {n} observations")
    q, r, _ = scipy.linalg.qr(design, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag[-1] <= diag[0] * 1e-12 * max(n, k):
        raise SingularDesign("design matrix is rank deficient")
    lev = (q**2).sum(axis=1)
    if np.any(lev >= 1.0 - LEVERAGE_TOL):
        raise LeverageOne(f"maximum leverage {lev.max():.12g} is numerically one")
    resid = response - q @ (q.T @ response)
    return float(np.mean((resid / (1.0 - lev)) ** 2))


def loo_cv_score(sample: MatchedSample, spec: SieveSpec, target: CvTarget, knot_values=None) -> tuple:
    """(score_treated, score_control) for one candidate basis."""
    if knot_values is None:
        knot_values = resolve_knots(sample.x, spec)
    scores = []
    for arm in (1, 0):
        idx = sample.a == arm
        design = design_matrix(sample.x[idx], spec, knot_values)
        scores.append(loo_criterion(design, target.response(sample.y[idx])))
    return tuple(scores)


def select_basis_cv(sample: MatchedSample, candidates: Sequence[SieveSpec], target: CvTarget) -> tuple:
    """Per-arm argmin of the leave-one-out score.

    Ties go to the smaller basis, then to the earlier candidate. Candidates
    that cannot be scored are skipped.
    """
    if not candidates:
        raise ConfigError("no candidate bases given")
    scored = {1: [], 0: []}
    for pos, spec in enumerate(candidates):
        try:
            s1, s0 = loo_cv_score(sample, spec, target)
        except NumericalError:
            continue
        k = spec.dimension(sample.d_x)
        scored[1].append((s1, k, pos))
        scored[0].append((s0, k, pos))
    if not scored[1]:
        raise AllCandidatesFailed("no candidate basis could be scored")
    picks = []
    for arm in (1, 0):
        best = scored[arm][0]
        for cand in scored[arm][1:]:
            tie = abs(cand[0] - best[0]) <= 1e-12 * max(abs(best[0]), 1e-300)
            if cand[0] < best[0] and not tie:
                best = cand
            elif tie and cand[1] < best[1]:
                best = cand
        picks.append(candidates[best[2]])
    return tuple(picks)


def default_candidates(d_x: int) -> list:
    """Candidate bases for cross-validation.

    Scalar covariate: linear splines with one or two knots and quadratic
    splines with one or two knots. Two or more covariates: the same four
    families with pairwise interactions.
    """
    inter = d_x > 1
    return [
        SieveSpec(Family.SPLINE, 2, (0.5,), inter),
        SieveSpec(Family.SPLINE, 2, (0.3, 0.7), inter),
        SieveSpec(Family.SPLINE, 3, (0.5,), inter),
        SieveSpec(Family.SPLINE, 3, (0.3, 0.7), inter),
    ]


def default_spec(d_x: int) -> SieveSpec:
    """Quadratic spline with a median knot for one covariate; linear spline with interactions otherwise."""
    if d_x == 1:
        return SieveSpec(Family.SPLINE, 3, (0.5,), False)
    return SieveSpec(Family.SPLINE, 2, (0.5,), True)
