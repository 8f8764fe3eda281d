"""Bootstrap engines for quantile and average treatment effects in matched pairs.

Four engines are provided:

* naive multiplier: i.i.d. Exp(1) weights on every unit;
* naive pair multiplier: one Exp(1) weight per pair, shared by both members;
* gradient: perturb the quantile-regression score with pair and
  adjacent-pair Gaussian multipliers and re-solve through the sub-gradient
  condition (order-statistic index shift);
* IPW multiplier: Exp(1) weights, a weighted sieve propensity refit per
  replicate, and inverse-propensity weighted quantiles (or Hajek means).

Replicate ``b`` (1-based) draws its randomness from a dedicated stream
derived from ``(seed, b)``, so output does not depend on batching or on the
number of worker processes.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .data import BootstrapDraws, MatchedSample, Method, QuantileGrid, pair_roles
from .design import reorder_pairs
from .errors import ConfigError, MissingPairs, MpqteError, ReplicateFailure
from .quantiles import arm_quantiles, sorted_weighted_quantiles
from .sieve import (
    CvTarget,
    SieveSpec,
    batched_propensity,
    default_spec,
    design_matrix,
    resolve_knots,
    select_basis_cv,
)

CHUNK = 250


def replicate_rng(seed: int, b: int) -> np.random.Generator:
    """Independent generator for replicate ``b`` of a run seeded with ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(b),)))


def _taus(grid) -> tuple:
    return grid.taus if isinstance(grid, QuantileGrid) else tuple(float(t) for t in grid)


class _ArmSorter:
    """Per-arm sorted outcomes and the unit indices in that order."""

    def __init__(self, sample: MatchedSample):
        self.units = {}
        self.sorted_y = {}
        for arm in (1, 0):
            idx = np.flatnonzero(sample.a == arm)
            order = idx[np.lexsort((idx, sample.y[idx]))]
            self.units[arm] = order
            self.sorted_y[arm] = sample.y[order]

    def qte(self, w1: np.ndarray, w0: np.ndarray, taus) -> np.ndarray:
        """w1, w0: (B, 2n) unit weights; only each arm's own units are used."""
        q1 = sorted_weighted_quantiles(self.sorted_y[1], w1[:, self.units[1]], taus)
        q0 = sorted_weighted_quantiles(self.sorted_y[0], w0[:, self.units[0]], taus)
        return q1 - q0

    def ate(self, w1: np.ndarray, w0: np.ndarray) -> np.ndarray:
        u1, u0 = self.units[1], self.units[0]
        m1 = (w1[:, u1] * self.sorted_y[1]).sum(axis=1) / w1[:, u1].sum(axis=1)
        m0 = (w0[:, u0] * self.sorted_y[0]).sum(axis=1) / w0[:, u0].sum(axis=1)
        return m1 - m0


def _finish(arms, w1, w0, taus, target):
    # "both" appends the ATE replicate as a final column after the QTE grid.
    if target == "ate":
        return arms.ate(w1, w0)
    if target == "both":
        return np.column_stack([arms.qte(w1, w0, taus), arms.ate(w1, w0)])
    return arms.qte(w1, w0, taus)


class _Engine:
    target = "qte"

    def draw(self, rng: np.random.Generator):
        raise NotImplementedError

    def compute(self, inputs: list) -> np.ndarray:
        raise NotImplementedError

    def neutral(self):
        """The input that leaves the objective unperturbed (unit multipliers)."""
        return np.ones(self.m)

    def estimate(self) -> np.ndarray:
        """Point estimate matching the engine: DIQ, or the IPW estimator for IPW."""
        return self.compute([self.neutral()])[0]


class NaiveEngine(_Engine):
    def __init__(self, sample: MatchedSample, taus=None, target="qte"):
        self.m = sample.y.size
        self.taus = taus
        self.target = target
        self.arms = _ArmSorter(sample)

    def draw(self, rng):
        return rng.standard_exponential(self.m)

    def unit_weights(self, inputs):
        return np.vstack(inputs)

    def compute(self, inputs):
        w = self.unit_weights(inputs)
        return _finish(self.arms, w, w, self.taus, self.target)


class NaivePairEngine(NaiveEngine):
    def __init__(self, sample: MatchedSample, taus=None, target="qte"):
        if sample.pairs is None:
            raise MissingPairs("the naive pair bootstrap needs pair identities")
        super().__init__(sample, taus, target)
        self.pairs = sample.pairs

    def draw(self, rng):
        return rng.standard_exponential(self.pairs.shape[0])

    def neutral(self):
        return np.ones(self.pairs.shape[0])

    def unit_weights(self, inputs):
        wp = np.vstack(inputs)
        w = np.empty((wp.shape[0], self.m))
        w[:, self.pairs[:, 0]] = wp
        w[:, self.pairs[:, 1]] = wp
        return w


class GradientEngine(_Engine):
    """Score perturbation T*_a(tau) and the shifted order-statistic index.

    T*_a = (sum_j eta_j s_a(j) + sum_k etahat_k [s_a(k, first) - s_a(k, second)]) / sqrt(2)
    with s_a(i) = tau - 1{Y_i <= qhat_a(tau)}, and h_a = ceil(n tau + T*_a)
    clamped to [1, n].
    """

    def __init__(self, sample: MatchedSample, taus, qhat=None):
        if sample.pairs is None:
            raise MissingPairs("the gradient bootstrap needs pair identities")
        roles = pair_roles(sample)
        self.n = sample.n
        self.m = roles.blocks.shape[0]
        self.taus = np.asarray(taus, dtype=float)
        if qhat is None:
            q1, q0 = arm_quantiles(sample, taus)
        else:
            q1, q0 = (np.asarray(q, dtype=float) for q in qhat)
        y = sample.y
        tau = self.taus[None, :]
        s1 = tau - (y[roles.treated][:, None] <= q1[None, :])
        s0 = tau - (y[roles.control][:, None] <= q0[None, :])
        b = roles.blocks
        d1 = (tau - (y[b[:, 0]][:, None] <= q1)) - (tau - (y[b[:, 2]][:, None] <= q1))
        d0 = (tau - (y[b[:, 1]][:, None] <= q0)) - (tau - (y[b[:, 3]][:, None] <= q0))
        self.s1, self.s0, self.d1, self.d0 = s1, s0, d1, d0
        self.sorted1 = np.sort(y[sample.a == 1])
        self.sorted0 = np.sort(y[sample.a == 0])

    def draw(self, rng):
        eta = rng.standard_normal(self.n)
        eta_hat = rng.standard_normal(self.m)
        return eta, eta_hat

    def neutral(self):
        return np.zeros(self.n), np.zeros(self.m)

    def perturbation(self, eta, eta_hat):
        """(T1, T0), each (B, G)."""
        eta = np.atleast_2d(eta)
        eta_hat = np.atleast_2d(eta_hat).reshape(eta.shape[0], self.m)
        t1 = np.einsum("bj,jg->bg", eta, self.s1, optimize=False)
        t0 = np.einsum("bj,jg->bg", eta, self.s0, optimize=False)
        if self.m:
            t1 = t1 + np.einsum("bk,kg->bg", eta_hat, self.d1, optimize=False)
            t0 = t0 + np.einsum("bk,kg->bg", eta_hat, self.d0, optimize=False)
        return t1 / math.sqrt(2.0), t0 / math.sqrt(2.0)

    def indices(self, t):
        h = np.ceil(np.round(self.n * self.taus[None, :] + t, 9))
        return np.clip(h, 1, self.n).astype(np.int64)

    def compute(self, inputs):
        eta = np.vstack([i[0] for i in inputs])
        eta_hat = np.vstack([i[1] for i in inputs]) if self.m else np.zeros((len(inputs), 0))
        t1, t0 = self.perturbation(eta, eta_hat)
        h1, h0 = self.indices(t1), self.indices(t0)
        return self.sorted1[h1 - 1] - self.sorted0[h0 - 1]


def _as_spec_pair(spec) -> tuple:
    if isinstance(spec, SieveSpec):
        return spec, spec
    spec = tuple(spec)
    if len(spec) != 2 or not all(isinstance(s, SieveSpec) for s in spec):
        raise ConfigError("IPW sieve must be a SieveSpec or a (treated, control) pair of them")
    return spec


class IpwEngine(_Engine):
    """Exp(1) multipliers, a multiplier-weighted propensity refit, then IPW quantiles or means.

    ``spec`` may be one basis or a (treated-arm, control-arm) pair; with a pair,
    treated units get fitted values from the first basis and control units
    from the second, both fit on all units.
    """

    def __init__(self, sample: MatchedSample, spec, taus=None, target="qte"):
        self.specs = _as_spec_pair(spec)
        self.m = sample.y.size
        self.a = sample.a.astype(float)
        self.taus = taus
        self.target = target
        self.arms = _ArmSorter(sample)
        self.designs = []
        for s in self.specs:
            d = design_matrix(sample.x, s, resolve_knots(sample.x, s))
            if d.shape[1] >= self.m:
                raise ConfigError(f"basis dimension {d.shape[1]} >= sample size {self.m}")
            self.designs.append(d)
        self.same = self.specs[0] == self.specs[1]
        self.last_clamped = 0

    def draw(self, rng):
        return rng.standard_exponential(self.m)

    def propensity(self, xi):
        a_hat, clamped = batched_propensity(self.designs[0], self.a, xi)
        if not self.same:
            a_hat0, clamped0 = batched_propensity(self.designs[1], self.a, xi)
            treated = self.a[None, :] == 1
            a_hat = np.where(treated, a_hat, a_hat0)
            clamped = np.where(treated, clamped, clamped0)
        self.last_clamped = int(clamped.sum())
        return a_hat

    def weights(self, xi):
        a_hat = self.propensity(xi)
        return xi / a_hat, xi / (1.0 - a_hat)

    def compute(self, inputs):
        xi = np.vstack(inputs)
        w1, w0 = self.weights(xi)
        return _finish(self.arms, w1, w0, self.taus, self.target)


# Single-replicate entry points -------------------------------------------------


def naive_multiplier_draw(sample, grid, rng=None, weights=None) -> np.ndarray:
    """One naive multiplier replicate; ``weights`` (length 2n) overrides the Exp(1) draw."""
    eng = NaiveEngine(sample, _taus(grid))
    xi = eng.draw(rng) if weights is None else np.asarray(weights, dtype=float)
    return eng.compute([xi])[0]


def naive_pair_draw(sample, grid, rng=None, weights=None) -> np.ndarray:
    """One naive pair replicate; ``weights`` (length n, one per pair) overrides the draw."""
    eng = NaivePairEngine(sample, _taus(grid))
    xi = eng.draw(rng) if weights is None else np.asarray(weights, dtype=float)
    return eng.compute([xi])[0]


def gradient_draw(sample, grid, rng=None, qhat=None, eta=None, eta_hat=None) -> np.ndarray:
    """One gradient replicate on an already re-ordered sample.

    ``eta`` (length n) and ``eta_hat`` (length floor(n/2)) override the normal draws.
    """
    eng = GradientEngine(sample, _taus(grid), qhat)
    if eta is None or eta_hat is None:
        drawn = eng.draw(rng)
        eta = drawn[0] if eta is None else eta
        eta_hat = drawn[1] if eta_hat is None else eta_hat
    return eng.compute([(np.asarray(eta, float), np.asarray(eta_hat, float))])[0]


def ipw_draw(sample, grid, rng=None, spec=None, weights=None) -> np.ndarray:
    """One IPW multiplier replicate of the QTE; ``weights`` overrides the Exp(1) draw."""
    eng = IpwEngine(sample, spec if spec is not None else default_spec(sample.d_x), _taus(grid))
    xi = eng.draw(rng) if weights is None else np.asarray(weights, dtype=float)
    return eng.compute([xi])[0]


def ipw_ate_draw(sample, rng=None, spec=None, weights=None) -> float:
    """One IPW multiplier replicate of the ATE (ratio-of-sums weighted means)."""
    eng = IpwEngine(sample, spec if spec is not None else default_spec(sample.d_x), target="ate")
    xi = eng.draw(rng) if weights is None else np.asarray(weights, dtype=float)
    return float(eng.compute([xi])[0])


# Full runs ----------------------------------------------------------------------


@dataclass(frozen=True)
class BootstrapConfig:
    """Settings for :func:`run_bootstrap`.

    ``sieve`` is used by the IPW method only: a fixed :class:`SieveSpec`, a
    (treated, control) pair of specs, or a list of candidates to choose from
    by leave-one-out cross-validation on the original sample. ``None`` means
    the default basis for the covariate dimension. ``target`` is ``"qte"``,
    ``"ate"`` or ``"both"`` (grid columns followed by one ATE column, from the
    same multipliers).
    """

    method: Method
    B: int
    seed: int
    grid: Optional[QuantileGrid] = None
    target: str = "qte"
    sieve: Union[SieveSpec, tuple, list, None] = None
    reorder: bool = True

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if self.B < 1:
            raise ConfigError("B must be at least 1")
        if self.target not in ("qte", "ate", "both"):
            raise ConfigError(f"unknown target {self.target!r}")
        if self.target != "ate" and self.grid is None:
            raise ConfigError("a quantile grid is required for QTE bootstrap")
        if self.target != "qte" and self.method is Method.GRADIENT:
            raise ConfigError("the gradient bootstrap is defined for quantile effects only")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")

    def check(self, sample: MatchedSample) -> None:
        if self.method in (Method.GRADIENT, Method.NAIVE_PAIR) and sample.pairs is None:
            raise MissingPairs(f"method {self.method.value} needs pair identities")
        if self.method is Method.GRADIENT and sample.n < 2:
            raise ConfigError("the gradient bootstrap needs at least two pairs")


def resolve_sieve(sample: MatchedSample, config: BootstrapConfig) -> tuple:
    """(treated spec, control spec) for the IPW engine, running CV if candidates were given."""
    s = config.sieve
    if s is None:
        spec = default_spec(sample.d_x)
        return spec, spec
    if isinstance(s, SieveSpec):
        return s, s
    if isinstance(s, tuple) and len(s) == 2 and all(isinstance(v, SieveSpec) for v in s):
        return s
    candidates = list(s)
    if config.target == "ate":
        target = CvTarget.mean()
    else:
        taus = config.grid.taus
        target = CvTarget.quantile(taus[(len(taus) - 1) // 2])
    return select_basis_cv(sample, candidates, target)


def build_engine(sample: MatchedSample, config: BootstrapConfig):
    """Validate, prepare the sample (pair re-ordering, basis selection) and return (engine, meta)."""
    config.check(sample)
    taus = config.grid.taus if config.grid is not None else None
    meta = {}
    if config.method is Method.NAIVE:
        return NaiveEngine(sample, taus, config.target), meta
    if config.method is Method.NAIVE_PAIR:
        return NaivePairEngine(sample, taus, config.target), meta
    if config.method is Method.GRADIENT:
        s = reorder_pairs(sample) if config.reorder else sample
        return GradientEngine(s, taus), meta
    specs = resolve_sieve(sample, config)
    meta["sieve_treated"] = specs[0].describe()
    meta["sieve_control"] = specs[1].describe()
    return IpwEngine(sample, specs, taus, config.target), meta


def _run_chunk(engine, seed: int, b_start: int, b_stop: int) -> np.ndarray:
    inputs = [engine.draw(replicate_rng(seed, b)) for b in range(b_start, b_stop)]
    try:
        return engine.compute(inputs), getattr(engine, "last_clamped", 0)
    except MpqteError:
        for off, inp in enumerate(inputs):
            try:
                engine.compute([inp])
            except MpqteError as exc:
                raise ReplicateFailure(b_start + off, exc) from exc
        raise


def run_bootstrap(sample: MatchedSample, config: BootstrapConfig, workers: int = 1) -> BootstrapDraws:
    """B replicates of the configured engine.

    Replicate b uses ``replicate_rng(seed, b)``; the result is identical for
    any ``workers`` value.
    """
    engine, meta = build_engine(sample, config)
    bounds = [(lo, min(lo + CHUNK, config.B + 1)) for lo in range(1, config.B + 1, CHUNK)]
    if workers > 1 and len(bounds) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_chunk, engine, config.seed, lo, hi) for lo, hi in bounds]
            parts = [f.result() for f in futures]
    else:
        parts = [_run_chunk(engine, config.seed, lo, hi) for lo, hi in bounds]
    values = np.concatenate([p[0] for p in parts], axis=0)
    if not np.all(np.isfinite(values)):
        bad = int(np.flatnonzero(~np.all(np.isfinite(values.reshape(config.B, -1)), axis=1))[0]) + 1
        raise ReplicateFailure(bad, ValueError("non-finite replicate"))
    if isinstance(engine, IpwEngine):
        meta["propensity_clamped"] = sum(p[1] for p in parts)
    return BootstrapDraws(
        method=config.method,
        values=values,
        seed=int(config.seed),
        taus=config.grid.taus if config.target == "qte" else None,
        meta=meta,
    )
