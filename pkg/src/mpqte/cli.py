"""Command-line interface: ``analyze``, ``simulate`` and ``match``.

Every command is deterministic given its input file, flags and ``--seed``;
``--workers`` only changes how the work is scheduled. Errors map to exit
codes: 2 for configuration problems, 3 for bad input data, 4 for numerical
failures.
"""

from __future__ import annotations

import argparse
import csv
import io
import sys

import numpy as np

from . import __version__
from .bootstrap import BootstrapConfig, build_engine, run_bootstrap
from .data import ColumnMap, Method, QuantileGrid, _parse_float, load_csv
from .design import assign_treatment, diagnostics, match_pairs
from .errors import ConfigError, DataError, EmptyInput, MissingPairs, MpqteError, ParseError
from .inference import ate_row, qte_report
from .sieve import Family, SieveSpec, default_candidates
from .simulation import DgpSpec, mc_rejection

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4

DEFAULT_B = 5000


def _grid(args, default: QuantileGrid) -> QuantileGrid:
    if args.taus is not None and args.tau_grid is not None:
        raise ConfigError("give either --taus or --tau-grid, not both")
    if args.taus is not None:
        try:
            taus = tuple(float(t) for t in args.taus.split(",") if t.strip())
        except ValueError:
            raise ConfigError(f"bad --taus value {args.taus!r}") from None
        return QuantileGrid(taus)
    if args.tau_grid is not None:
        return QuantileGrid.from_range(args.tau_grid)
    return default


def parse_sieve(text: str, interactions: bool = False) -> SieveSpec:
    """``power:DEGREE`` or ``spline:ORDER[:KNOT,KNOT,...]`` with knots as quantile levels."""
    parts = text.split(":")
    try:
        family = Family(parts[0].strip().lower())
        order = int(parts[1])
        knots = tuple(float(k) for k in parts[2].split(",") if k.strip()) if len(parts) > 2 else ()
    except (ValueError, IndexError):
        raise ConfigError(f"bad sieve spec {text!r}; expected power:DEGREE or spline:ORDER:KNOTS") from None
    if family is Family.SPLINE and len(parts) == 2:
        knots = (0.5,)
    if family is Family.POWER:
        knots = ()
    return SieveSpec(family, order, knots, interactions)


def _emit(text: str, out) -> None:
    if out is None or out == "-":
        sys.stdout.write(text)
        return
    with open(out, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _common(p: argparse.ArgumentParser, seed_required: bool = True) -> None:
    p.add_argument("--seed", type=int, required=seed_required, help="base seed (no default: runs must be reproducible)")
    p.add_argument("--b-reps", type=int, default=DEFAULT_B, help=f"bootstrap replications (default {DEFAULT_B})")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--taus", help="comma-separated quantile levels")
    p.add_argument("--tau-grid", help="quantile grid as lo:hi:step")
    p.add_argument("--out", help="output path (default: standard output)")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--workers", type=int, default=1, help="worker processes; never changes the output")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mpqte", description="Quantile treatment effects under matched-pair designs.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="estimate QTEs for a dataset and bootstrap their uncertainty")
    a.add_argument("input", help="CSV file with a header row")
    _common(a)
    a.add_argument("--method", choices=[m.value for m in Method], default=Method.GRADIENT.value)
    a.add_argument("--y-col", default="y")
    a.add_argument("--a-col", default="a")
    a.add_argument("--x-cols", required=True, help="comma-separated covariate columns")
    a.add_argument("--pair-col", help="pair identifier column")
    a.add_argument("--sieve", action="append",
                   help="propensity basis for ipw, e.g. spline:3:0.5 or power:2; repeat with --cv to give candidates")
    a.add_argument("--interactions", action="store_true", help="add pairwise covariate products to --sieve bases")
    a.add_argument("--cv", action="store_true", help="choose the ipw basis per arm by leave-one-out cross-validation")
    a.add_argument("--ate", action="store_true", help="append an ATE row (naive, naive-pair or ipw)")
    a.add_argument("--null", type=float, default=0.0, help="null value for the Wald tests (default 0)")
    a.add_argument("--draws-out", help="also write the B x |grid| bootstrap draws as CSV")

    s = sub.add_parser("simulate", help="Monte Carlo rejection frequencies for a simulation model")
    _common(s)
    s.add_argument("--model", default="M1", help="M1, M2, M3 or M4")
    s.add_argument("--n-pairs", type=int, default=100)
    s.add_argument("--reps", type=int, default=1000)
    s.add_argument("--delta", type=float, action="append", help="null offset; repeatable (default 0 and 0.5)")
    s.add_argument("--method", action="append", choices=[m.value for m in Method],
                   help="bootstrap method; repeatable (default: all four)")
    s.add_argument("--no-band", action="store_true", help="skip the uniform band")

    m = sub.add_parser("match", help="pair units on covariates and optionally randomize treatment")
    m.add_argument("input", help="CSV file with a header row")
    m.add_argument("--x-cols", required=True, help="comma-separated covariate columns")
    m.add_argument("--seed", type=int, help="seed for the within-pair coin flips (required unless --no-assign)")
    m.add_argument("--no-assign", action="store_true", help="emit pair ids only")
    m.add_argument("--out", help="output path (default: standard output)")
    return parser


# analyze ---------------------------------------------------------------------


def _sieve_setting(args, d_x: int):
    specs = [parse_sieve(t, args.interactions) for t in (args.sieve or [])]
    if args.cv:
        return specs if specs else default_candidates(d_x)
    if len(specs) > 1:
        raise ConfigError("several --sieve bases given without --cv")
    return specs[0] if specs else None


def cmd_analyze(args) -> str:
    method = Method(args.method)
    x_cols = tuple(c.strip() for c in args.x_cols.split(",") if c.strip())
    schema = ColumnMap(args.y_col, args.a_col, x_cols, args.pair_col)
    needs_pairs = method in (Method.GRADIENT, Method.NAIVE_PAIR)
    if needs_pairs and args.pair_col is None:
        raise MissingPairs(f"method {method.value} needs pair identities; pass --pair-col")
    if args.ate and method is Method.GRADIENT:
        raise ConfigError("the gradient bootstrap covers quantile effects only; use naive, naive-pair or ipw with --ate")
    if (args.sieve or args.cv) and method is not Method.IPW:
        raise ConfigError("--sieve and --cv apply to the ipw method only")
    sample = _load(args.input, schema, needs_pairs)
    grid = _grid(args, QuantileGrid.uniform_band_default())
    sieve = _sieve_setting(args, sample.d_x) if method is Method.IPW else None

    config = BootstrapConfig(method, args.b_reps, args.seed, grid, "qte", sieve)
    engine, _ = build_engine(sample, config)
    estimates = engine.estimate()
    draws = run_bootstrap(sample, config, workers=args.workers)
    report = qte_report(estimates, draws.values, grid.taus, args.alpha, args.null, method.value)
    report.meta.update(draws.meta)
    if args.ate:
        ate_cfg = BootstrapConfig(method, args.b_reps, args.seed, None, "ate", sieve)
        ate_engine, _ = build_engine(sample, ate_cfg)
        ate_draws = run_bootstrap(sample, ate_cfg, workers=args.workers)
        report.rows.append(ate_row(float(ate_engine.estimate()), ate_draws.values, args.alpha))
        for key, value in ate_draws.meta.items():
            report.meta[f"ate_{key}"] = value
    report.meta.update(
        n_pairs=sample.n,
        n_units=int(sample.y.size),
        covariates=list(x_cols),
        B=args.b_reps,
        seed=args.seed,
        null_value=args.null,
    )
    if sample.has_pairs:
        report.meta["design"] = diagnostics(sample).as_dict()
    if args.draws_out:
        _emit(_draws_csv(draws.values, grid.taus), args.draws_out)
    return report.to_json() if args.format == "json" else report.to_csv()


def _draws_csv(values: np.ndarray, taus) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([repr(float(t)) for t in taus])
    for row in np.atleast_2d(values):
        w.writerow([repr(float(v)) for v in row])
    return buf.getvalue()


def _load(path, schema, require_pairs):
    try:
        return load_csv(path, schema, require_pairs=require_pairs)
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc.strerror or exc}") from None


# simulate --------------------------------------------------------------------


def cmd_simulate(args) -> str:
    spec = DgpSpec(args.model, args.n_pairs)
    methods = args.method or [m.value for m in (Method.GRADIENT, Method.NAIVE, Method.NAIVE_PAIR, Method.IPW)]
    deltas = args.delta if args.delta else [0.0, 0.5]
    band_grid = None if args.no_band else _grid_or_default(args)
    result = mc_rejection(
        spec, methods, band_grid, deltas=deltas, reps=args.reps, B=args.b_reps, seed=args.seed,
        alpha=args.alpha, workers=args.workers,
    )
    return result.to_json() if args.format == "json" else result.to_csv()


def _grid_or_default(args) -> QuantileGrid:
    return _grid(args, QuantileGrid.uniform_band_default())


# match -----------------------------------------------------------------------


def cmd_match(args) -> str:
    if not args.no_assign and args.seed is None:
        raise ConfigError("--seed is required to randomize treatment (or pass --no-assign)")
    x_cols = [c.strip() for c in args.x_cols.split(",") if c.strip()]
    if not x_cols:
        raise ConfigError("at least one covariate column is required")
    x = _read_covariates(args.input, x_cols)
    pairs = match_pairs(x)
    pair_of = np.empty(x.shape[0], dtype=np.int64)
    for j, (u, v) in enumerate(pairs):
        pair_of[u] = pair_of[v] = j
    a = None if args.no_assign else assign_treatment(pairs, np.random.default_rng(args.seed))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["unit_id", "pair_id"] + ([] if a is None else ["a"]))
    for i in range(x.shape[0]):
        w.writerow([i, int(pair_of[i])] + ([] if a is None else [int(a[i])]))
    return buf.getvalue()


def _read_covariates(path, x_cols) -> np.ndarray:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            missing = [c for c in x_cols if c not in (reader.fieldnames or [])]
            if missing:
                raise ParseError(f"columns not found in header: {', '.join(missing)}")
            rows = [[_parse_float(row[c] or "", c, k) for c in x_cols] for k, row in enumerate(reader, start=2)]
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc.strerror or exc}") from None
    if not rows:
        raise EmptyInput("no data rows")
    return np.array(rows, dtype=float)


COMMANDS = {"analyze": cmd_analyze, "simulate": cmd_simulate, "match": cmd_match}


def exit_code(exc: MpqteError) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, DataError):
        return EXIT_DATA
    return EXIT_NUMERICAL


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if getattr(args, "workers", 1) < 1:
            raise ConfigError("--workers must be at least 1")
        text = COMMANDS[args.command](args)
        _emit(text, args.out)
    except MpqteError as exc:
        print(f"mpqte: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exit_code(exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
