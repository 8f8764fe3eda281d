"""Standard errors, Wald tests and uniform confidence bands from bootstrap draws."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from statistics import NormalDist
from typing import Optional

import numpy as np

from .errors import ConfigError, TooFewDraws, ZeroSe
from .quantiles import empirical_quantiles, order_index

MIN_DRAWS = 40
_STD_NORMAL = NormalDist()


def normal_quantile(p: float) -> float:
    return _STD_NORMAL.inv_cdf(p)


# C_0.975 - C_0.025
SE_DENOMINATOR = normal_quantile(0.975) - normal_quantile(0.025)


def _check_alpha(alpha):
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")


def bootstrap_se(draws) -> float:
    """Interquantile-range standard error: (Q(0.975) - Q(0.025)) / (C_0.975 - C_0.025)."""
    d = np.asarray(draws, dtype=float).reshape(-1)
    if d.size < MIN_DRAWS:
        raise TooFewDraws(f"need at least {MIN_DRAWS} bootstrap draws, got {d.size}")
    hi, lo = empirical_quantiles(d, (0.975, 0.025))
    return float((hi - lo) / SE_DENOMINATOR)


def confidence_interval(estimate: float, se: float, alpha: float = 0.05) -> tuple:
    _check_alpha(alpha)
    c = normal_quantile(1 - alpha / 2)
    return estimate - c * se, estimate + c * se


def wald_single(estimate: float, se: float, null_value: float, alpha: float = 0.05) -> tuple:
    """(statistic, reject) for H0: parameter == null_value, two-sided."""
    _check_alpha(alpha)
    if not se > 0:
        raise ZeroSe("standard error is zero")
    stat = (estimate - null_value) / se
    return float(stat), bool(abs(stat) >= normal_quantile(1 - alpha / 2))


def wald_difference(draws_1, draws_2, est_1, est_2, null_value, alpha=0.05) -> tuple:
    """Wald test of q(tau1) - q(tau2) == null_value with the SE of the replicate differences."""
    d1 = np.asarray(draws_1, dtype=float)
    d2 = np.asarray(draws_2, dtype=float)
    if d1.shape != d2.shape:
        raise ConfigError("draw vectors are not aligned")
    se = bootstrap_se(d1 - d2)
    return wald_single(est_1 - est_2, se, null_value, alpha)


@dataclass(frozen=True, eq=False)
class UniformBand:
    taus: tuple
    estimates: np.ndarray
    se: np.ndarray
    center: np.ndarray
    critical: float
    alpha: float

    @property
    def lower(self) -> np.ndarray:
        return self.estimates - self.critical * self.se

    @property
    def upper(self) -> np.ndarray:
        return self.estimates + self.critical * self.se

    def rejects(self, null) -> bool:
        """True when the null function (scalar or per-tau array) leaves the band somewhere."""
        null = np.broadcast_to(np.asarray(null, dtype=float), self.estimates.shape)
        return bool(np.any((null < self.lower) | (null > self.upper)))


def uniform_band(draws, estimates, alpha: float = 0.05, taus=None) -> UniformBand:
    """Sup-t band over the grid.

    Each column is standardized by its own interquantile SE around the
    midpoint of its 2.5% and 97.5% quantiles; the critical value is the
    ceil(B(1 - alpha))-th order statistic of the per-replicate sup.
    """
    _check_alpha(alpha)
    d = np.asarray(draws, dtype=float)
    if d.ndim == 1:
        d = d[:, None]
    est = np.asarray(estimates, dtype=float).reshape(-1)
    if d.shape[1] != est.size:
        raise ConfigError("draw columns and estimates differ in length")
    B = d.shape[0]
    if B < MIN_DRAWS:
        raise TooFewDraws(f"need at least {MIN_DRAWS} bootstrap draws, got {B}")
    s = np.sort(d, axis=0)
    k_hi, k_lo = order_index(B * 0.975), order_index(B * 0.025)
    hi, lo = s[max(k_hi, 1) - 1], s[max(k_lo, 1) - 1]
    se = (hi - lo) / SE_DENOMINATOR
    if np.any(se <= 0):
        raise ZeroSe(f"zero standard error at grid column {int(np.argmax(se <= 0))}")
    center = 0.5 * (hi + lo)
    sup = np.max(np.abs((d - center) / se), axis=1)
    k = min(max(order_index(B * (1 - alpha)), 1), B)
    crit = float(np.partition(sup, k - 1)[k - 1])
    t = tuple(taus) if taus is not None else tuple(range(est.size))
    return UniformBand(t, est, se, center, crit, alpha)


@dataclass
class Row:
    tau: Optional[float]
    estimate: float
    se: float
    ci_lo: float
    ci_hi: float
    band_lo: Optional[float] = None
    band_hi: Optional[float] = None
    label: str = "qte"


@dataclass
class InferenceReport:
    method: str
    alpha: float
    rows: list
    band_critical: Optional[float] = None
    tests: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "alpha": self.alpha,
            "band_critical": self.band_critical,
            "rows": [asdict(r) for r in self.rows],
            "tests": self.tests,
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        """One row per tau; an ATE row, when present, has ``ate`` in the tau column."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["tau", "estimate", "se", "ci_lo", "ci_hi", "band_lo", "band_hi"])
        for r in self.rows:
            tau = r.label if r.tau is None else repr(r.tau)
            w.writerow([tau] + ["" if v is None else repr(float(v)) for v in
                               (r.estimate, r.se, r.ci_lo, r.ci_hi, r.band_lo, r.band_hi)])
        return buf.getvalue()


def qte_report(estimates, draws, taus, alpha=0.05, null_value=0.0, method="", band=True) -> InferenceReport:
    """Pointwise intervals and tests at every tau, plus the uniform band when the grid has several points."""
    est = np.asarray(estimates, dtype=float)
    d = np.asarray(draws, dtype=float)
    rows, tests = [], []
    for j, tau in enumerate(taus):
        se = bootstrap_se(d[:, j])
        lo, hi = confidence_interval(est[j], se, alpha)
        rows.append(Row(float(tau), float(est[j]), se, lo, hi))
        if se > 0:
            stat, rej = wald_single(est[j], se, null_value, alpha)
            tests.append({"hypothesis": f"q({tau}) = {null_value}", "statistic": stat, "reject": rej})
        else:
            tests.append({"hypothesis": f"q({tau}) = {null_value}", "statistic": None, "reject": None})
    crit = None
    meta = {}
    if band and len(taus) > 1:
        try:
            ub = uniform_band(d, est, alpha, taus)
        except ZeroSe as exc:
            meta["band_unavailable"] = str(exc)
            return InferenceReport(method, alpha, rows, None, tests, meta)
        crit = ub.critical
        for r, lo, hi in zip(rows, ub.lower, ub.upper):
            r.band_lo, r.band_hi = float(lo), float(hi)
        tests.append({"hypothesis": f"q(tau) = {null_value} for all tau in grid", "statistic": None,
                      "reject": ub.rejects(null_value)})
    return InferenceReport(method, alpha, rows, crit, tests, meta)


def ate_row(estimate: float, draws, alpha=0.05) -> Row:
    se = bootstrap_se(draws)
    lo, hi = confidence_interval(estimate, se, alpha)
    return Row(None, float(estimate), se, lo, hi, label="ate")


__all__ = [
    "InferenceReport",
    "Row",
    "SE_DENOMINATOR",
    "UniformBand",
    "ate_row",
    "bootstrap_se",
    "confidence_interval",
    "normal_quantile",
    "qte_report",
    "uniform_band",
    "wald_difference",
    "wald_single",
]
