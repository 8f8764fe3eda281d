"""Core domain types for matched-pairs experiments and CSV ingestion."""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import BadPair, ConfigError, EmptyInput, MissingPairs, ParseError, UnbalancedTreatment

TAU_MIN = 0.01
TAU_MAX = 0.99


def _frozen(arr):
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Observation:
    y: float
    x: tuple
    a: int
    pair_id: Optional[int] = None

    def __post_init__(self):
        x = tuple(float(v) for v in np.atleast_1d(self.x))
        object.__setattr__(self, "x", x)
        if len(x) < 1:
            raise EmptyInput("observation needs at least one covariate")
        if self.a not in (0, 1):
            raise ParseError(f"treatment must be 0 or 1, got {self.a!r}")
        if not math.isfinite(self.y) or not all(math.isfinite(v) for v in x):
            raise ParseError("non-finite outcome or covariate")
        if self.pair_id is not None and (int(self.pair_id) != self.pair_id or self.pair_id < 0):
            raise ParseError(f"pair_id must be a nonnegative integer, got {self.pair_id!r}")


@dataclass(frozen=True, eq=False)
class MatchedSample:
    """A matched-pairs sample of ``2n`` units.

    Arrays are read-only. ``pairs`` is an ``(n, 2)`` integer array of unit
    indices, in pair order, or ``None`` when pair identities are unknown.
    Pair order matters to the gradient bootstrap; the order of the two units
    inside a row does not.
    """

    y: np.ndarray
    x: np.ndarray
    a: np.ndarray
    pairs: Optional[np.ndarray] = None

    @classmethod
    def from_arrays(cls, y, x, a, pairs=None) -> "MatchedSample":
        y = np.asarray(y, dtype=float).reshape(-1)
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        a = np.asarray(a)
        if y.size == 0:
            raise EmptyInput("sample is empty")
        if x.shape[0] != y.size or a.shape != y.shape:
            raise ConfigError("y, x and a must have the same number of rows")
        if x.shape[1] < 1:
            raise EmptyInput("at least one covariate is required")
        if not np.all(np.isfinite(y)) or not np.all(np.isfinite(x)):
            raise ParseError("non-finite outcome or covariate")
        if not np.all((a == 0) | (a == 1)):
            raise ParseError("treatment must be 0 or 1")
        a = a.astype(np.int8)
        n_treated = int(a.sum())
        if 2 * n_treated != y.size:
            raise UnbalancedTreatment(
                f"{n_treated} treated vs {y.size - n_treated} control units"
            )
        if pairs is not None:
            pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
            _check_pairs(pairs, a)
            pairs = _frozen(pairs)
        return cls(_frozen(y), _frozen(x), _frozen(a), pairs)

    @property
    def n(self) -> int:
        """Number of pairs (half the number of units)."""
        return self.y.size // 2

    @property
    def d_x(self) -> int:
        return self.x.shape[1]

    @property
    def has_pairs(self) -> bool:
        return self.pairs is not None

    @property
    def treated(self) -> np.ndarray:
        return np.flatnonzero(self.a == 1)

    @property
    def control(self) -> np.ndarray:
        return np.flatnonzero(self.a == 0)

    def with_pairs(self, pairs) -> "MatchedSample":
        return MatchedSample.from_arrays(self.y, self.x, self.a, pairs)

    def without_pairs(self) -> "MatchedSample":
        return MatchedSample(self.y, self.x, self.a, None)

    @property
    def observations(self) -> list:
        pair_of = {}
        if self.pairs is not None:
            for j, (u, v) in enumerate(self.pairs):
                pair_of[int(u)] = j
                pair_of[int(v)] = j
        return [
            Observation(float(self.y[i]), tuple(self.x[i]), int(self.a[i]), pair_of.get(i))
            for i in range(self.y.size)
        ]

    def same_as(self, other: "MatchedSample") -> bool:
        """Exact equality of data and pair structure."""
        if (self.pairs is None) != (other.pairs is None):
            return False
        same = (
            np.array_equal(self.y, other.y)
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.a, other.a)
        )
        if self.pairs is not None:
            same = same and np.array_equal(np.sort(self.pairs, axis=1), np.sort(other.pairs, axis=1))
        return same


def _check_pairs(pairs: np.ndarray, a: np.ndarray) -> None:
    n_units = a.size
    if pairs.shape[0] * 2 != n_units:
        raise BadPair(f"{pairs.shape[0]} pairs cannot cover {n_units} units")
    flat = pairs.reshape(-1)
    if flat.min() < 0 or flat.max() >= n_units:
        raise BadPair("pair refers to a unit index out of range")
    if np.unique(flat).size != n_units:
        raise BadPair("every unit must appear in exactly one pair")
    bad = np.flatnonzero(a[pairs[:, 0]] + a[pairs[:, 1]] != 1)
    if bad.size:
        raise BadPair(f"pair {int(bad[0])} does not contain exactly one treated unit")


def validate_sample(raw: Sequence[Observation], require_pairs: bool = False) -> MatchedSample:
    """Build a :class:`MatchedSample` from observations, checking the design.

    Pairs are formed from ``pair_id``: units sharing an id form a pair, pairs
    are ordered by id and units inside a pair by their position in ``raw``.
    """
    if len(raw) == 0:
        raise EmptyInput("no observations")
    d_x = {len(o.x) for o in raw}
    if len(d_x) != 1:
        raise ParseError("observations have different covariate dimensions")
    y = np.array([o.y for o in raw], dtype=float)
    x = np.array([o.x for o in raw], dtype=float)
    a = np.array([o.a for o in raw], dtype=np.int8)

    ids = [o.pair_id for o in raw]
    have = [i is not None for i in ids]
    if not any(have):
        if require_pairs:
            raise MissingPairs("pair identities are required but no pair_id was given")
        return MatchedSample.from_arrays(y, x, a)
    if not all(have):
        raise BadPair("pair_id given for some observations only")

    groups: dict = {}
    for i, pid in enumerate(ids):
        groups.setdefault(int(pid), []).append(i)
    pairs = []
    for pid in sorted(groups):
        members = groups[pid]
        if len(members) != 2:
            raise BadPair(f"pair_id {pid} has {len(members)} members")
        pairs.append(members)
    return MatchedSample.from_arrays(y, x, a, np.array(pairs))


@dataclass(frozen=True)
class RoleIndex:
    """Unit indices by role.

    ``treated[j]``/``control[j]`` are the treated and control units of pair j.
    Row k of ``blocks`` holds, for pairs ``2k`` and ``2k+1`` (0-based), the
    first treated, first control, second treated and second control unit in
    that order. With an odd number of pairs the last pair is not in a block.
    """

    treated: np.ndarray
    control: np.ndarray
    blocks: np.ndarray


def pair_roles(sample: MatchedSample) -> RoleIndex:
    if sample.pairs is None:
        raise MissingPairs("pair roles need pair identities")
    p = sample.pairs
    first_treated = sample.a[p[:, 0]] == 1
    treated = np.where(first_treated, p[:, 0], p[:, 1])
    control = np.where(first_treated, p[:, 1], p[:, 0])
    m = sample.n // 2
    blocks = np.column_stack(
        [treated[0 : 2 * m : 2], control[0 : 2 * m : 2], treated[1 : 2 * m : 2], control[1 : 2 * m : 2]]
    ).astype(np.int64)
    return RoleIndex(_frozen(treated), _frozen(control), _frozen(blocks.reshape(m, 4)))


@dataclass(frozen=True)
class QuantileGrid:
    taus: tuple

    def __post_init__(self):
        taus = tuple(float(t) for t in self.taus)
        if not taus:
            raise ConfigError("quantile grid is empty")
        for t in taus:
            if not (TAU_MIN <= t <= TAU_MAX):
                raise ConfigError(f"tau={t} outside [{TAU_MIN}, {TAU_MAX}]")
        if any(b <= a for a, b in zip(taus, taus[1:])):
            raise ConfigError("quantile grid must be strictly increasing")
        object.__setattr__(self, "taus", taus)

    def __len__(self):
        return len(self.taus)

    def __iter__(self):
        return iter(self.taus)

    def index(self, tau: float) -> int:
        for i, t in enumerate(self.taus):
            if abs(t - tau) < 1e-12:
                return i
        raise ConfigError(f"tau={tau} not in grid")

    @property
    def array(self) -> np.ndarray:
        return np.array(self.taus)

    @classmethod
    def from_range(cls, spec: str) -> "QuantileGrid":
        """Parse ``lo:hi:step`` (inclusive of ``hi`` up to rounding)."""
        try:
            lo, hi, step = (float(s) for s in spec.split(":"))
        except ValueError:
            raise ConfigError(f"bad grid spec {spec!r}, expected lo:hi:step") from None
        if step <= 0 or hi < lo:
            raise ConfigError(f"bad grid spec {spec!r}")
        count = int(math.floor((hi - lo) / step + 1e-9)) + 1
        return cls(tuple(round(lo + i * step, 10) for i in range(count)))

    @classmethod
    def uniform_band_default(cls) -> "QuantileGrid":
        """0.25, 0.27, ..., 0.49, 0.50, 0.51, ..., 0.75."""
        lower = [round(0.25 + 0.02 * i, 10) for i in range(13)]
        upper = [round(0.51 + 0.02 * i, 10) for i in range(13)]
        return cls(tuple(lower + [0.5] + upper))


class Method(str, enum.Enum):
    NAIVE = "naive"
    NAIVE_PAIR = "naive-pair"
    GRADIENT = "gradient"
    IPW = "ipw"


@dataclass(frozen=True, eq=False)
class BootstrapDraws:
    """``values`` is ``B x len(taus)`` for QTE draws and length ``B`` for ATE draws."""

    method: Method
    values: np.ndarray
    seed: int
    taus: Optional[tuple] = None
    meta: dict = field(default_factory=dict)

    @property
    def B(self) -> int:
        return self.values.shape[0]

    def column(self, tau: float) -> np.ndarray:
        if self.taus is None:
            raise ConfigError("ATE draws have no tau columns")
        return self.values[:, QuantileGrid(self.taus).index(tau)]


@dataclass(frozen=True)
class ColumnMap:
    y: str
    a: str
    x: tuple
    pair: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "x", tuple(self.x))
        if not self.x:
            raise ConfigError("at least one covariate column is required")


def _parse_float(cell, name, row):
    cell = cell.strip()
    if cell == "":
        raise ParseError(f"missing value in column {name!r}", row)
    try:
        v = float(cell)
    except ValueError:
        raise ParseError(f"non-numeric value {cell!r} in column {name!r}", row) from None
    if not math.isfinite(v):
        raise ParseError(f"non-finite value {cell!r} in column {name!r}", row)
    return v


def _parse_int(cell, name, row, allowed=None):
    v = _parse_float(cell, name, row)
    if v != int(v) or v < 0 or (allowed is not None and int(v) not in allowed):
        raise ParseError(f"invalid value {cell.strip()!r} in column {name!r}", row)
    return int(v)


def load_csv(path, schema: ColumnMap, require_pairs: bool = False) -> MatchedSample:
    """Read a sample from a CSV file with a header row.

    Row numbers in errors count the header as row 1.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        wanted = [schema.y, schema.a, *schema.x] + ([schema.pair] if schema.pair else [])
        missing = [c for c in wanted if c not in header]
        if missing:
            raise ParseError(f"columns not found in header: {', '.join(missing)}")
        obs = []
        for row_no, row in enumerate(reader, start=2):
            if any(row.get(c) is None for c in wanted):
                raise ParseError("row has too few fields", row_no)
            y = _parse_float(row[schema.y], schema.y, row_no)
            a = _parse_int(row[schema.a], schema.a, row_no, allowed=(0, 1))
            x = tuple(_parse_float(row[c], c, row_no) for c in schema.x)
            pid = _parse_int(row[schema.pair], schema.pair, row_no) if schema.pair else None
            obs.append(Observation(y, x, a, pid))
    if require_pairs and schema.pair is None:
        raise MissingPairs("pair identities are required but no pair column was given")
    return validate_sample(obs, require_pairs=require_pairs)


def write_csv(sample: MatchedSample, path, schema: Optional[ColumnMap] = None) -> ColumnMap:
    """Write ``sample`` so that :func:`load_csv` with the returned map reads it back."""
    if schema is None:
        schema = ColumnMap(
            "y",
            "a",
            tuple(f"x{i + 1}" for i in range(sample.d_x)),
            "pair" if sample.has_pairs else None,
        )
    pair_of = np.full(sample.y.size, -1, dtype=np.int64)
    if sample.pairs is not None:
        for j, (u, v) in enumerate(sample.pairs):
            pair_of[u] = pair_of[v] = j
    cols = [schema.y, schema.a, *schema.x] + ([schema.pair] if schema.pair else [])
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for i in range(sample.y.size):
            row = [repr(float(sample.y[i])), int(sample.a[i])] + [repr(float(v)) for v in sample.x[i]]
            if schema.pair:
                row.append(int(pair_of[i]))
            w.writerow(row)
    return schema
