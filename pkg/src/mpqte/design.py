"""Pair formation, within-pair randomization, pair re-ordering and balance checks.

Every operation is deterministic given its inputs; ties are broken by the
smallest index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import MatchedSample, pair_roles
from .errors import MissingPairs, OddCount


def _as_matrix(covariates) -> np.ndarray:
    x = np.asarray(covariates, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    return x


def match_pairs(covariates) -> np.ndarray:
    """Pair up 2n units by covariate closeness.

    Scalar covariates are sorted and consecutive units paired. Vector
    covariates use greedy non-bipartite matching: repeatedly pair the closest
    unmatched couple in Euclidean distance.

    Returns an ``(n, 2)`` array. Scalar case: pairs in sorted order, each
    pair ordered by covariate value. Vector case: pairs ordered by their
    smaller unit index, each pair ordered by index.
    """
    x = _as_matrix(covariates)
    m = x.shape[0]
    if m == 0 or m % 2:
        raise OddCount(f"need an even, positive number of units, got {m}")
    if x.shape[1] == 1:
        order = np.argsort(x[:, 0], kind="stable")
        return order.reshape(-1, 2).astype(np.int64)

    iu, ju = np.triu_indices(m, k=1)
    dist = np.sqrt(((x[iu] - x[ju]) ** 2).sum(axis=1))
    # lexsort keys: last is primary.
    order = np.lexsort((ju, iu, dist))
    matched = np.zeros(m, dtype=bool)
    pairs = []
    for e in order:
        i, j = iu[e], ju[e]
        if matched[i] or matched[j]:
            continue
        matched[i] = matched[j] = True
        pairs.append((i, j))
        if len(pairs) * 2 == m:
            break
    pairs.sort()
    return np.array(pairs, dtype=np.int64)


def assign_treatment(pairing, rng: np.random.Generator) -> np.ndarray:
    """One fair coin per pair decides which member is treated."""
    pairing = np.asarray(pairing, dtype=np.int64).reshape(-1, 2)
    first = rng.integers(0, 2, size=pairing.shape[0]).astype(bool)
    a = np.zeros(pairing.size, dtype=np.int8)
    a[np.where(first, pairing[:, 0], pairing[:, 1])] = 1
    return a


def pair_midpoints(sample: MatchedSample) -> np.ndarray:
    if sample.pairs is None:
        raise MissingPairs("pair midpoints need pair identities")
    return 0.5 * (sample.x[sample.pairs[:, 0]] + sample.x[sample.pairs[:, 1]])


def path_length(points: np.ndarray, order=None) -> float:
    """(1/n) * sum_j ||p[order[j]] - p[order[j-1]]||_2 over consecutive points."""
    p = _as_matrix(points)
    if order is not None:
        p = p[np.asarray(order)]
    if p.shape[0] < 2:
        return 0.0
    steps = np.sqrt(((p[1:] - p[:-1]) ** 2).sum(axis=1))
    return float(steps.sum() / p.shape[0])


def _two_opt(mid: np.ndarray, order: list) -> list:
    """Reverse path segments while that strictly shortens the open path."""
    dist = np.sqrt(((mid[:, None, :] - mid[None, :, :]) ** 2).sum(axis=2)).tolist()
    n = len(order)
    improved = True
    while improved:
        improved = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                # Reversing order[i..j] swaps edges (i-1, i), (j, j+1) for (i-1, j), (i, j+1).
                a, b = order[i], order[j]
                before = after = 0.0
                if i > 0:
                    p = dist[order[i - 1]]
                    before += p[a]
                    after += p[b]
                if j < n - 1:
                    q = dist[order[j + 1]]
                    before += q[b]
                    after += q[a]
                if after < before - 1e-12:
                    order[i : j + 1] = order[i : j + 1][::-1]
                    improved = True
    return order


def reorder_permutation(midpoints) -> np.ndarray:
    """Pair order giving a short path through the pair midpoints.

    Exact for scalar covariates (sorting). For vectors, a nearest-neighbour
    walk starting from the lexicographically smallest midpoint, refined by
    2-opt segment reversals; the current order is kept if it is shorter.
    """
    mid = _as_matrix(midpoints)
    n = mid.shape[0]
    if mid.shape[1] == 1:
        return np.argsort(mid[:, 0], kind="stable")
    start = int(np.lexsort(mid.T[::-1])[0])
    visited = np.zeros(n, dtype=bool)
    order = [start]
    visited[start] = True
    cur = start
    for _ in range(n - 1):
        d = np.sqrt(((mid - mid[cur]) ** 2).sum(axis=1))
        d[visited] = np.inf
        cur = int(np.argmin(d))
        visited[cur] = True
        order.append(cur)
    order = np.array(_two_opt(mid, order), dtype=np.int64)
    if path_length(mid, order) > path_length(mid):
        return np.arange(n, dtype=np.int64)
    return order


def reorder_pairs(sample: MatchedSample) -> MatchedSample:
    """Re-order pairs so adjacent pairs have close covariates."""
    perm = reorder_permutation(pair_midpoints(sample))
    return sample.with_pairs(sample.pairs[perm])


@dataclass(frozen=True)
class DesignDiagnostics:
    """Average covariate distances, keyed by the power r in (1, 2).

    ``within_pair_dist[r]`` averages ||X_u - X_v||^r over pairs.
    ``adjacent_pair_dist[r]`` averages, over blocks of two consecutive pairs,
    the mean of ||X_u - X_v||^r across the four cross-pair unit couples.
    """

    within_pair_dist: dict
    adjacent_pair_dist: dict
    warning: bool
    factor: float

    def as_dict(self) -> dict:
        return {
            "within_pair_dist": {str(k): v for k, v in self.within_pair_dist.items()},
            "adjacent_pair_dist": {str(k): v for k, v in self.adjacent_pair_dist.items()},
            "warning": self.warning,
            "factor": self.factor,
        }


def diagnostics(sample: MatchedSample, factor: float = 10.0) -> DesignDiagnostics:
    if sample.pairs is None:
        raise MissingPairs("design diagnostics need pair identities")
    x = sample.x
    p = sample.pairs
    within_d = np.sqrt(((x[p[:, 0]] - x[p[:, 1]]) ** 2).sum(axis=1))
    roles = pair_roles(sample)
    blocks = roles.blocks
    if blocks.shape[0]:
        first = blocks[:, [0, 1]]
        second = blocks[:, [2, 3]]
        cross = [
            np.sqrt(((x[first[:, s]] - x[second[:, t]]) ** 2).sum(axis=1))
            for s in range(2)
            for t in range(2)
        ]
        cross = np.column_stack(cross)
    within, adjacent = {}, {}
    for r in (1, 2):
        within[r] = float((within_d**r).mean())
        adjacent[r] = float((cross**r).mean()) if blocks.shape[0] else 0.0
    base = within[1]
    warn = adjacent[1] > factor * base if base > 0 else adjacent[1] > 0
    return DesignDiagnostics(within, adjacent, bool(warn), factor)
