"""Empirical and weighted quantiles, and the DIQ / difference-in-means estimators.

All quantiles here are minimizers of the (weighted) check loss and are
always elements of the input. When the minimizer is an interval the lower
endpoint is returned.
"""

from __future__ import annotations

import math

import numpy as np

from .data import MatchedSample, QuantileGrid
from .errors import ConfigError, EmptyInput, ZeroTotalWeight

# Relative slack for cumulative-weight comparisons; only affects exact ties.
_REL_TOL = 1e-12


def check_loss(u, tau):
    """rho_tau(u) = u * (tau - 1{u <= 0})."""
    if not 0.0 < tau < 1.0:
        raise ConfigError(f"tau must lie in (0, 1), got {tau}")
    u = np.asarray(u, dtype=float)
    return u * (tau - (u <= 0))


def order_index(x: float) -> int:
    """ceil(x) after rounding away floating noise such as 100 * 0.07 = 7.000000000000001."""
    return math.ceil(round(x, 9))


def empirical_quantile(values, tau: float) -> float:
    """The ``ceil(n * tau)``-th order statistic of ``values``."""
    v = np.asarray(values, dtype=float).reshape(-1)
    if v.size == 0:
        raise EmptyInput("cannot take the quantile of an empty vector")
    if not 0.0 < tau < 1.0:
        raise ConfigError(f"tau must lie in (0, 1), got {tau}")
    k = min(max(order_index(v.size * tau), 1), v.size)
    return float(np.partition(v, k - 1)[k - 1])


def empirical_quantiles(values, taus) -> np.ndarray:
    v = np.sort(np.asarray(values, dtype=float).reshape(-1))
    if v.size == 0:
        raise EmptyInput("cannot take the quantile of an empty vector")
    ks = [min(max(order_index(v.size * t), 1), v.size) for t in taus]
    return v[np.array(ks) - 1]


def weighted_quantile_index(values, weights, tau: float) -> int:
    """Index into ``values`` of the weighted tau-quantile.

    Scans values in increasing order and stops at the first distinct value
    y_h whose group satisfies

        tau * W - w_h <= sum_i w_i 1{y_i < y_h} <= tau * W,

    where w_h is the total weight of units tied at y_h. Among tied units the
    one with the smallest index is returned.
    """
    v = np.asarray(values, dtype=float).reshape(-1)
    w = np.asarray(weights, dtype=float).reshape(-1)
    if v.size == 0:
        raise EmptyInput("cannot take the quantile of an empty vector")
    if w.shape != v.shape:
        raise ConfigError("values and weights differ in length")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ConfigError("weights must be finite and nonnegative")
    total = float(w.sum())
    if total <= 0:
        raise ZeroTotalWeight("weights sum to zero")
    if not 0.0 < tau < 1.0:
        raise ConfigError(f"tau must lie in (0, 1), got {tau}")

    order = np.lexsort((np.arange(v.size), v))
    sv, sw = v[order], w[order]
    starts = np.flatnonzero(np.r_[True, sv[1:] != sv[:-1]])
    group_w = np.add.reduceat(sw, starts)
    cum = np.cumsum(group_w)
    target = tau * total - _REL_TOL * total
    g = int(np.argmax(cum >= target))
    return int(order[starts[g]])


def weighted_quantile(values, weights, tau: float) -> float:
    """Minimizer of sum_i w_i * rho_tau(y_i - q) over q, lower endpoint on ties."""
    i = weighted_quantile_index(values, weights, tau)
    return float(np.asarray(values, dtype=float).reshape(-1)[i])


def sorted_weighted_quantiles(sorted_values, sorted_weights, taus) -> np.ndarray:
    """Batched weighted quantiles for several weight vectors at once.

    ``sorted_values`` (length m) must be ascending; ``sorted_weights`` is
    ``(B, m)`` with columns aligned to the values. Returns ``(B, len(taus))``.
    Ties in ``sorted_values`` need no grouping here because only the value,
    not the index, is returned.
    """
    sv = np.asarray(sorted_values, dtype=float)
    w = np.atleast_2d(np.asarray(sorted_weights, dtype=float))
    cum = np.cumsum(w, axis=1)
    total = cum[:, -1:]
    if np.any(total <= 0):
        raise ZeroTotalWeight("weights sum to zero")
    out = np.empty((w.shape[0], len(taus)))
    for j, tau in enumerate(taus):
        target = tau * total - _REL_TOL * total
        idx = np.argmax(cum >= target, axis=1)
        out[:, j] = sv[idx]
    return out


def diq_estimate(sample: MatchedSample, grid) -> np.ndarray:
    """Difference of treated and control empirical quantiles at each tau."""
    taus = grid.taus if isinstance(grid, QuantileGrid) else tuple(grid)
    q1 = empirical_quantiles(sample.y[sample.a == 1], taus)
    q0 = empirical_quantiles(sample.y[sample.a == 0], taus)
    return q1 - q0


def arm_quantiles(sample: MatchedSample, grid):
    """(q1, q0) arrays of per-arm empirical quantiles."""
    taus = grid.taus if isinstance(grid, QuantileGrid) else tuple(grid)
    return (
        empirical_quantiles(sample.y[sample.a == 1], taus),
        empirical_quantiles(sample.y[sample.a == 0], taus),
    )


def ate_estimate(sample: MatchedSample) -> float:
    """Difference in means, treated minus control."""
    return float(sample.y[sample.a == 1].mean() - sample.y[sample.a == 0].mean())
