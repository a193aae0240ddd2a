"""
Bipartite matching between gate columns and prior columns.

Column i of the stacked gate map is aligned to prior column perm[i] so that
the summed per-timestep L1 distance is minimal.
"""

import logging
from dataclasses import dataclass
from itertools import permutations
from typing import List, Optional

import numpy as np

from .errors import NumericalError, RoutingError, ShapeError
from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Assignment:
    """Bijection gate column i -> prior column perm[i], with its matching cost."""

    perm: np.ndarray
    cost: float = 0.0

    def __post_init__(self):
        perm = np.array(self.perm, dtype=np.int64)
        n = perm.shape[0] if perm.ndim == 1 else -1
        if perm.ndim != 1 or not np.array_equal(np.sort(perm), np.arange(n)):
            raise RoutingError(f"not a permutation: {perm.tolist()}")
        perm.setflags(write=False)
        object.__setattr__(self, "perm", perm)

    @classmethod
    def identity(cls, n: int, cost: float = 0.0) -> "Assignment":
        return cls(np.arange(n), cost)

    def __len__(self) -> int:
        return int(self.perm.shape[0])

    def inverse(self) -> "Assignment":
        return Assignment(np.argsort(self.perm), self.cost)

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.perm, np.arange(len(self))))

    def to_json(self) -> dict:
        return {"perm": self.perm.tolist(), "cost": float(self.cost)}


def cdist(u, v) -> np.ndarray:
    """Pairwise |u_i - v_j| between the entries of two equal-length vectors."""
    u, v = np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)
    if u.ndim != 1 or u.shape != v.shape:
        raise ShapeError(f"cdist: lengths {u.shape} and {v.shape} differ")
    return np.abs(u[:, None] - v[None, :])


def assignment_cost(W_gate, W_prior, literal: bool = False) -> np.ndarray:
    """C[i, j] = sum_t |W_gate[t, i] - W_prior[t, j]|.

    For binary maps this is the Hamming distance between gate column i and
    prior column j, computed with two matrix products; `literal=True` sums
    cdist over the rows instead.
    """
    W_gate = np.atleast_2d(np.asarray(W_gate, dtype=np.float64))
    W_prior = np.atleast_2d(np.asarray(W_prior, dtype=np.float64))
    if W_gate.shape != W_prior.shape:
        raise ShapeError(f"assignment_cost: gate map {W_gate.shape} vs prior map {W_prior.shape}")
    if literal:
        C = np.zeros((W_gate.shape[1], W_gate.shape[1]))
        for gate_row, prior_row in zip(W_gate, W_prior):
            C += cdist(gate_row, prior_row)
        return C
    return W_gate.T @ (1.0 - W_prior) + (1.0 - W_gate).T @ W_prior


def _solve_potentials(C: np.ndarray):
    """Shortest augmenting path Hungarian method; returns (row_to_col, u, v)."""
    n = C.shape[0]
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    owner = np.zeros(n + 1, dtype=np.int64)  # owner[j] = 1-based row matched to column j
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        min_to = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            delta = inf
            j1 = 0
            for j in range(1, n + 1):
                if used[j]:
                    continue
                reduced = C[i0 - 1, j - 1] - u[i0] - v[j]
                if reduced < min_to[j]:
                    min_to[j] = reduced
                    way[j] = j0
                if min_to[j] < delta:
                    delta = min_to[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[owner[j]] += delta
                    v[j] -= delta
                else:
                    min_to[j] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    row_to_col = np.zeros(n, dtype=np.int64)
    for j in range(1, n + 1):
        row_to_col[owner[j] - 1] = j - 1
    return row_to_col, u[1:], v[1:]


def _augment(row: int, tight: np.ndarray, rows_ok: np.ndarray, col_owner: np.ndarray, seen: np.ndarray) -> bool:
    for col in np.flatnonzero(tight[row]):
        if seen[col]:
            continue
        seen[col] = True
        holder = col_owner[col]
        if holder < 0 or (rows_ok[holder] and _augment(holder, tight, rows_ok, col_owner, seen)):
            col_owner[col] = row
            return True
    return False


def _has_perfect_matching(tight: np.ndarray, rows: List[int], cols_free: np.ndarray) -> bool:
    n = tight.shape[0]
    allowed = tight & cols_free[None, :]
    rows_ok = np.zeros(n, dtype=bool)
    rows_ok[rows] = True
    col_owner = np.full(n, -1, dtype=np.int64)
    for row in rows:
        if not _augment(row, allowed, rows_ok, col_owner, np.zeros(n, dtype=bool)):
            return False
    return True


def hungarian(C) -> Assignment:
    """Minimum-cost perfect matching of a square cost matrix.

    Among all optimal permutations the lexicographically smallest one is
    returned: every optimal matching uses only edges that are tight under the
    optimal potentials, so rows are fixed in order to the smallest tight
    column that still admits a perfect matching of the remaining rows.
    """
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ShapeError(f"hungarian: cost matrix must be square, got {C.shape}")
    if not np.all(np.isfinite(C)):
        raise NumericalError("hungarian: cost matrix has non-finite entries")
    n = C.shape[0]
    if n == 0:
        return Assignment(np.zeros(0, dtype=np.int64), 0.0)
    _, u, v = _solve_potentials(C)
    tol = 1e-9 * max(1.0, float(np.abs(C).max()))
    tight = (C - u[:, None] - v[None, :]) <= tol

    perm = np.full(n, -1, dtype=np.int64)
    cols_free = np.ones(n, dtype=bool)
    for row in range(n):
        for col in np.flatnonzero(tight[row] & cols_free):
            cols_free[col] = False
            if _has_perfect_matching(tight, list(range(row + 1, n)), cols_free):
                perm[row] = col
                break
            cols_free[col] = True
        if perm[row] < 0:
            raise RoutingError("hungarian: tight graph lost its perfect matching")
    cost = float(C[np.arange(n), perm].sum())
    return Assignment(perm, cost)


def permute_probs(p_tot, a: Assignment):
    """Move gate column i to prior column perm[i] along the last axis (p~[perm[i]] = p[i])."""
    length = p_tot.shape[-1]
    if length != len(a):
        raise ShapeError(f"permute_probs: vector of length {length} vs permutation of {len(a)}")
    inverse = a.inverse().perm
    index = (slice(None),) * (len(p_tot.shape) - 1) + (inverse,)
    if isinstance(p_tot, Tensor):
        return p_tot[index]
    return np.asarray(p_tot)[index]


def brute_force_assignment(C) -> Assignment:
    """Exhaustive minimum over all permutations (small n, reference only)."""
    C = np.asarray(C, dtype=np.float64)
    n = C.shape[0]
    best: Optional[tuple] = None
    best_cost = np.inf
    for perm in permutations(range(n)):
        cost = C[np.arange(n), perm].sum()
        if cost < best_cost:
            best, best_cost = perm, cost
    return Assignment(np.array(best if best is not None else (), dtype=np.int64), float(best_cost if n else 0.0))
