"""Quantile treatment effects under matched-pair designs.

Difference-in-quantiles estimation with gradient, naive and
inverse-propensity-weighted bootstrap inference.
"""

from .bootstrap import BootstrapConfig, replicate_rng, run_bootstrap
from .data import (
    BootstrapDraws,
    ColumnMap,
    MatchedSample,
    Method,
    Observation,
    QuantileGrid,
    load_csv,
    validate_sample,
    write_csv,
)
from .design import assign_treatment, diagnostics, match_pairs, reorder_pairs
from .errors import ConfigError, DataError, MpqteError, NumericalError
from .inference import (
    InferenceReport,
    bootstrap_se,
    confidence_interval,
    qte_report,
    uniform_band,
    wald_difference,
    wald_single,
)
from .quantiles import ate_estimate, diq_estimate, empirical_quantile, weighted_quantile
from .sieve import Family, SieveSpec, default_candidates, default_spec, fit_propensity, select_basis_cv

__version__ = "0.1.0"
