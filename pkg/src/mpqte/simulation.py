"""Data-generating processes, true effects, variance kernels and Monte Carlo rejection studies.

Potential outcomes follow Y(a) = mu_a + m_a(X) + sigma_a(X) * eps_a with
mu_0 = mu_1 = 0:

* M1: X ~ U[0, 1], m_0 = 0, m_1 = 10 (X^2 - 1/3), sigma_0 = 1, sigma_1 constant;
* M2: as M1 with sigma_0 = 1 + X^2 and sigma_1(X) = (1 + X^2) sigma_1;
* M3: X = (Phi(V_1), Phi(V_2)) with V bivariate normal, correlation rho,
  m_0 = gamma'X - 1, m_1 = m_0 + 10 (V_1 V_2 - rho);
* M4: M3 with gamma = (1, 4), sigma_1 = 2, rho = 0.7.
"""

from __future__ import annotations

import functools
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy import integrate, optimize, special, stats

from .bootstrap import BootstrapConfig, build_engine, _run_chunk
from .data import MatchedSample, Method, QuantileGrid
from .design import assign_treatment, match_pairs
from .errors import ConfigError, MpqteError, QuadratureFailure, ZeroSe
from .inference import bootstrap_se, uniform_band, wald_difference, wald_single

TRUTH_DRAWS = 1_000_000
TRUTH_SEED = 20_200_101

MODEL_DEFAULTS = {
    "M1": dict(sigma1=1.0, gamma=None, rho=None),
    "M2": dict(sigma1=1.0, gamma=None, rho=None),
    "M3": dict(sigma1=1.0, gamma=(1.0, 1.0), rho=0.2),
    "M4": dict(sigma1=2.0, gamma=(1.0, 4.0), rho=0.7),
}


@dataclass(frozen=True)
class DgpSpec:
    """A simulation design. ``n`` is the number of pairs.

    ``treatment_scale`` multiplies m_1 - m_0; setting it to 0 makes X
    irrelevant to the treatment effect (used to check degenerate cases).
    """

    model: str
    n: int
    sigma1: Optional[float] = None
    gamma: Optional[tuple] = None
    rho: Optional[float] = None
    treatment_scale: float = 1.0

    def __post_init__(self):
        model = str(self.model).upper()
        if model not in MODEL_DEFAULTS:
            raise ConfigError(f"unknown model {self.model!r}; expected one of M1, M2, M3, M4")
        object.__setattr__(self, "model", model)
        for key, value in MODEL_DEFAULTS[model].items():
            if getattr(self, key) is None and value is not None:
                object.__setattr__(self, key, value)
        if self.gamma is not None:
            object.__setattr__(self, "gamma", tuple(float(g) for g in self.gamma))
        if self.n < 2:
            raise ConfigError("need at least two pairs")
        if self.rho is not None and not -1.0 < self.rho < 1.0:
            raise ConfigError("rho must lie in (-1, 1)")

    @property
    def d_x(self) -> int:
        return 1 if self.model in ("M1", "M2") else 2

    def population(self) -> tuple:
        """Hashable description of the outcome law (everything except ``n``)."""
        return (self.model, self.sigma1, self.gamma, self.rho, self.treatment_scale)


@dataclass(frozen=True, eq=False)
class SimulatedSample:
    """A generated sample together with both potential outcomes, for oracle checks only."""

    sample: MatchedSample
    y0: np.ndarray
    y1: np.ndarray


def _conditional(spec: DgpSpec, latent: np.ndarray) -> tuple:
    """(mean_0, sd_0, mean_1, sd_1) given latent draws.

    For M1/M2 the latent is X itself, shape (m,); for M3/M4 it is V, shape (m, 2).
    """
    if spec.model in ("M1", "M2"):
        x = latent
        m0 = np.zeros_like(x)
        m1 = spec.treatment_scale * 10.0 * (x**2 - 1.0 / 3.0)
        if spec.model == "M1":
            s0 = np.ones_like(x)
            s1 = np.full_like(x, spec.sigma1)
        else:
            s0 = 1.0 + x**2
            s1 = (1.0 + x**2) * spec.sigma1
        return m0, s0, m1, s1
    v = latent
    x = special.ndtr(v)
    m0 = x @ np.asarray(spec.gamma) - 1.0
    m1 = m0 + spec.treatment_scale * 10.0 * (v[:, 0] * v[:, 1] - spec.rho)
    return m0, np.ones_like(m0), m1, np.full_like(m0, spec.sigma1)


def _draw_latent(spec: DgpSpec, size: int, rng: np.random.Generator) -> np.ndarray:
    if spec.model in ("M1", "M2"):
        return rng.uniform(0.0, 1.0, size)
    z = rng.standard_normal((size, 2))
    r = spec.rho
    return np.column_stack([z[:, 0], r * z[:, 0] + math.sqrt(1.0 - r * r) * z[:, 1]])


def _covariates(spec: DgpSpec, latent: np.ndarray) -> np.ndarray:
    return latent[:, None] if spec.model in ("M1", "M2") else special.ndtr(latent)


def draw_potential_outcomes(spec: DgpSpec, size: int, rng: np.random.Generator) -> tuple:
    """(X, Y(0), Y(1)) for ``size`` i.i.d. units."""
    latent = _draw_latent(spec, size, rng)
    m0, s0, m1, s1 = _conditional(spec, latent)
    eps = rng.standard_normal((2, size))
    return _covariates(spec, latent), m0 + s0 * eps[0], m1 + s1 * eps[1]


def generate(spec: DgpSpec, rng: np.random.Generator) -> SimulatedSample:
    """2n units, paired on X, one unit per pair treated by a fair coin."""
    x, y0, y1 = draw_potential_outcomes(spec, 2 * spec.n, rng)
    pairs = match_pairs(x)
    a = assign_treatment(pairs, rng)
    y = np.where(a == 1, y1, y0)
    sample = MatchedSample.from_arrays(y, x, a, pairs)
    y0.setflags(write=False)
    y1.setflags(write=False)
    return SimulatedSample(sample, y0, y1)


@functools.lru_cache(maxsize=64)
def _truth_quantiles(population: tuple, taus: tuple, draws: int, seed: int) -> tuple:
    spec = DgpSpec(population[0], 2, population[1], population[2], population[3], population[4])
    rng = np.random.default_rng(seed)
    # Common (X, eps) for both arms: each marginal law is unchanged, and the
    # difference is exactly zero when the two laws coincide.
    latent = _draw_latent(spec, draws, rng)
    eps = rng.standard_normal(draws)
    m0, s0, m1, s1 = _conditional(spec, latent)
    y0, y1 = m0 + s0 * eps, m1 + s1 * eps
    k = [min(max(math.ceil(round(draws * t, 9)), 1), draws) - 1 for t in taus]
    q1 = np.partition(y1, k)[k]
    q0 = np.partition(y0, k)[k]
    return tuple(q1), tuple(q0)


def true_qte(spec: DgpSpec, grid, draws: int = TRUTH_DRAWS, seed: int = TRUTH_SEED) -> np.ndarray:
    """q_1(tau) - q_0(tau) from ``draws`` simulated units, cached per (law, grid, draws, seed)."""
    taus = grid.taus if isinstance(grid, QuantileGrid) else tuple(float(t) for t in grid)
    q1, q0 = _truth_quantiles(spec.population(), taus, int(draws), int(seed))
    return np.array(q1) - np.array(q0)


def true_ate(spec: DgpSpec) -> float:
    """E[Y(1) - Y(0)]; zero for all four models since E m_1(X) = E m_0(X) and mu_1 = mu_0."""
    return 0.0


# Variance kernels ------------------------------------------------------------


class VarianceKernel(NamedTuple):
    sigma: float
    sigma_dagger: float


@dataclass(frozen=True)
class VarianceComponents:
    tau: float
    q1: float
    q0: float
    f1: float
    f0: float
    e_m1_sq: float
    e_m0_sq: float
    e_m1_m0: float
    sigma: float
    sigma_dagger: float
    sigma_pair: float


class _Expectation:
    """E[g(latent)] under the covariate law, by adaptive cubature.

    One covariate: X ~ U[0, 1]. Two covariates: integration over independent
    standard normals (Z_1, Z_2) with V = (Z_1, rho Z_1 + sqrt(1 - rho^2) Z_2),
    truncated to |Z| <= 9 (neglected mass below 1e-18).
    """

    BOUND = 9.0

    def __init__(self, spec: DgpSpec, tol: float = 1e-6):
        self.spec = spec
        self.tol = tol

    def __call__(self, g) -> float:
        """``g`` maps an array of latent points to an array of values."""
        if self.spec.d_x == 1:
            res = integrate.cubature(lambda x: g(x[:, 0]), [0.0], [1.0], atol=self.tol * 1e-2, rtol=1e-10)
        else:
            r = self.spec.rho
            s = math.sqrt(1.0 - r * r)

            def f(z):
                v = np.column_stack([z[:, 0], r * z[:, 0] + s * z[:, 1]])
                dens = np.exp(-0.5 * (z * z).sum(axis=1)) / (2.0 * math.pi)
                return g(v) * dens

            res = integrate.cubature(f, [-self.BOUND] * 2, [self.BOUND] * 2, atol=self.tol * 1e-2, rtol=1e-10)
        val, err = float(res.estimate), float(res.error)
        if res.status != "converged" or not np.isfinite(val) or err > self.tol:
            raise QuadratureFailure(f"cubature did not reach tolerance {self.tol} (error estimate {err:.3g})")
        return val


def variance_components(spec: DgpSpec, tau: float, tol: float = 1e-6) -> VarianceComponents:
    """Densities, conditional score moments and the asymptotic variances at (tau, tau)."""
    if not 0.0 < tau < 1.0:
        raise ConfigError(f"tau must lie in (0, 1), got {tau}")
    E = _Expectation(spec, tol)

    def cond(latent, arm):
        m0, s0, m1, s1 = _conditional(spec, latent)
        return (m1, s1) if arm == 1 else (m0, s0)

    def cdf(q, arm):
        return E(lambda v: special.ndtr((q - cond(v, arm)[0]) / cond(v, arm)[1]))

    def pdf(q, arm):
        def g(v):
            m, s = cond(v, arm)
            return stats.norm.pdf((q - m) / s) / s

        return E(g)

    quant = {}
    for arm in (1, 0):
        lo, hi = -10.0, 10.0
        while cdf(lo, arm) > tau:
            lo *= 2
        while cdf(hi, arm) < tau:
            hi *= 2
        quant[arm] = optimize.brentq(lambda q: cdf(q, arm) - tau, lo, hi, xtol=1e-12, rtol=1e-12)
    q1, q0 = quant[1], quant[0]
    f1, f0 = pdf(q1, 1), pdf(q0, 0)

    def mtau(v, arm, q):
        m, s = cond(v, arm)
        return tau - special.ndtr((q - m) / s)

    e11 = E(lambda v: mtau(v, 1, q1) ** 2)
    e00 = E(lambda v: mtau(v, 0, q0) ** 2)
    e10 = E(lambda v: mtau(v, 1, q1) * mtau(v, 0, q0))
    e_diff = E(lambda v: (mtau(v, 1, q1) / f1 - mtau(v, 0, q0) / f0) ** 2)
    base = tau - tau * tau
    sigma = (base - e11) / f1**2 + (base - e00) / f0**2 + 0.5 * e_diff
    sigma_dagger = base / f1**2 + base / f0**2
    sigma_pair = sigma_dagger - 2.0 * e10 / (f1 * f0)
    return VarianceComponents(tau, q1, q0, f1, f0, e11, e00, e10, sigma, sigma_dagger, sigma_pair)


def analytic_variance(spec: DgpSpec, tau: float, tol: float = 1e-6) -> VarianceKernel:
    """Asymptotic variance of sqrt(n)(qhat(tau) - q(tau)) under matched pairs and under simple random assignment."""
    c = variance_components(spec, tau, tol)
    return VarianceKernel(c.sigma, c.sigma_dagger)


# Monte Carlo rejection studies ----------------------------------------------


POINT_TAUS = (0.25, 0.5, 0.75)
DIF_TAUS = (0.25, 0.75)


@dataclass(eq=False)
class McResult:
    """Per-replication rejection decisions.

    ``labels[i]`` is ``(method, test, delta)`` and ``decisions[r, i]`` is the
    decision of test i in replication r. Tests are ``tau=<t>``, ``dif``,
    ``uniform`` and ``ate``.
    """

    labels: list
    decisions: np.ndarray
    config: dict = field(default_factory=dict)

    @property
    def reps(self) -> int:
        return self.decisions.shape[0]

    def rates(self, first: Optional[int] = None) -> dict:
        d = self.decisions if first is None else self.decisions[:first]
        means = d.mean(axis=0)
        return {lab: float(m) for lab, m in zip(self.labels, means)}

    def rate(self, method, test, delta, first: Optional[int] = None) -> float:
        method = Method(method)
        key = (method.value, test, float(delta))
        for lab, r in self.rates(first).items():
            if lab == key:
                return r
        raise KeyError(key)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "reps": self.reps,
            "rates": [
                {"method": m, "test": t, "delta": dl, "rate": r}
                for (m, t, dl), r in self.rates().items()
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        """Percent rejection rates; one row per (method, delta), one column per test."""
        rates = self.rates()
        tests = []
        for _, t, _ in self.labels:
            if t not in tests:
                tests.append(t)
        rows = {}
        for (m, t, dl), r in rates.items():
            rows.setdefault((m, dl), {})[t] = r
        lines = ["method,delta," + ",".join(tests)]
        for (m, dl), vals in rows.items():
            cells = [f"{100 * vals[t]:.2f}" if t in vals else "" for t in tests]
            lines.append(f"{m},{dl:g}," + ",".join(cells))
        return "\n".join(lines) + "\n"


def _rep_seeds(seed: int, rep: int) -> tuple:
    data = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(0, int(rep))))
    boot = int(np.random.SeedSequence(int(seed), spawn_key=(1, int(rep))).generate_state(1, np.uint64)[0])
    return data, boot


def _one_rep(args) -> list:
    try:
        return _rep_decisions(*args)
    except MpqteError as exc:
        # Keep the error class (it decides the exit code) but name the replication.
        exc.rep = args[9]
        exc.args = (f"Monte Carlo replication {args[9]}: {exc}",)
        raise


def _rep_decisions(*args) -> list:
    (spec, methods, taus, band_cols, point_cols, dif_cols, deltas, B, seed, rep, alpha, sieve,
     truth, with_ate) = args
    rng, boot_seed = _rep_seeds(seed, rep)
    sample = generate(spec, rng).sample
    grid = QuantileGrid(taus)
    decisions = []
    for method in methods:
        do_ate = with_ate and method is not Method.GRADIENT
        config = BootstrapConfig(method, B, boot_seed, grid, "both" if do_ate else "qte", sieve)
        engine, _ = build_engine(sample, config)
        point = engine.estimate()
        est = point[: len(taus)]
        ate_hat = point[-1] if do_ate else None
        vals, _ = _run_chunk(engine, boot_seed, 1, B + 1)
        qte_draws = vals[:, : len(taus)]
        se = {c: bootstrap_se(qte_draws[:, c]) for c in point_cols}
        band = uniform_band(qte_draws[:, band_cols], est[band_cols], alpha) if band_cols else None
        ate_se = bootstrap_se(vals[:, -1]) if do_ate else None
        for delta in deltas:
            for c in point_cols:
                decisions.append(_safe_wald(est[c], se[c], truth[c] + delta, alpha))
            if dif_cols is not None:
                i, j = dif_cols
                try:
                    _, rej = wald_difference(qte_draws[:, i], qte_draws[:, j], est[i], est[j],
                                             truth[i] - truth[j] + delta, alpha)
                except ZeroSe:
                    rej = True
                decisions.append(rej)
            if band is not None:
                decisions.append(band.rejects(truth[band_cols] + delta))
            if do_ate:
                decisions.append(_safe_wald(ate_hat, ate_se, 0.0 + delta, alpha))
    return decisions


def _safe_wald(est, se, null, alpha):
    # A degenerate zero SE rejects any null different from the estimate.
    if se <= 0:
        return est != null
    return wald_single(est, se, null, alpha)[1]


def mc_rejection(
    spec: DgpSpec,
    methods: Sequence,
    grid: Optional[QuantileGrid] = None,
    deltas: Sequence[float] = (0.0, 0.5),
    reps: int = 100,
    B: int = 1000,
    seed: int = 0,
    alpha: float = 0.05,
    point_taus: Sequence[float] = POINT_TAUS,
    dif_taus: Optional[Sequence[float]] = DIF_TAUS,
    sieve=None,
    with_ate: bool = True,
    workers: int = 1,
) -> McResult:
    """Rejection frequencies of the pointwise, difference, uniform-band and ATE tests.

    Each replication draws a fresh sample and runs every requested engine;
    the null values are the simulated truth plus each ``delta``. The uniform
    band is computed over ``grid`` (skipped when ``grid`` is None). Results
    depend only on ``seed``, never on ``workers``.
    """
    methods = [Method(m) for m in methods]
    if not methods:
        raise ConfigError("no bootstrap methods requested")
    if reps < 1:
        raise ConfigError("reps must be at least 1")
    band_taus = tuple(grid.taus) if grid is not None else ()
    extra = tuple(point_taus) + (tuple(dif_taus) if dif_taus else ())
    taus = tuple(sorted(set(round(t, 10) for t in band_taus + extra)))
    full = QuantileGrid(taus)
    band_cols = [full.index(t) for t in band_taus]
    point_cols = [full.index(t) for t in point_taus]
    dif_cols = (full.index(dif_taus[0]), full.index(dif_taus[1])) if dif_taus else None
    truth = true_qte(spec, full)

    labels = []
    for m in methods:
        for d in deltas:
            labels.extend((m.value, f"tau={t:g}", float(d)) for t in point_taus)
            if dif_cols is not None:
                labels.append((m.value, "dif", float(d)))
            if band_cols:
                labels.append((m.value, "uniform", float(d)))
            if with_ate and m is not Method.GRADIENT:
                labels.append((m.value, "ate", float(d)))
    # _one_rep emits decisions method by method; reorder labels to match.
    jobs = [
        (spec, methods, taus, band_cols, point_cols, dif_cols, tuple(deltas), B, seed, r, alpha,
         sieve, truth, with_ate)
        for r in range(1, reps + 1)
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(_one_rep, jobs, chunksize=max(1, reps // (4 * workers))))
    else:
        out = [_one_rep(j) for j in jobs]
    decisions = np.array(out, dtype=bool).reshape(reps, len(labels))
    config = dict(model=spec.model, n=spec.n, reps=reps, B=B, seed=seed, alpha=alpha,
                  methods=[m.value for m in methods], deltas=list(deltas), grid=list(band_taus))
    return McResult(labels, decisions, config)
