"""
Prior task-expert activation maps.

The DTR prior gives timestep t the contiguous run of columns

    round(N(M-k) ((t-1)/T)^alpha) < c <= round(N(M-k) (t/T)^alpha) + kN

(1-based c), so early timesteps share most of their pathway and the window
slides right as t grows. Columns are 0-based everywhere in code.
"""

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .errors import ConfigError, RoutingError

logger = logging.getLogger(__name__)


def round_half_away(x) -> np.ndarray:
    """Nearest integer, ties away from zero."""
    x = np.asarray(x, dtype=np.float64)
    return (np.sign(x) * np.floor(np.abs(x) + 0.5)).astype(np.int64)


def shared_expert_lower_bound(N: int, M: int, k: int) -> int:
    """Minimum number of experts every timestep must share: max(N(2k - M), 0)."""
    return max(N * (2 * k - M), 0)


def _check_dims(N: int, M: int, k: int, T: int, alpha: float) -> None:
    if N < 1 or M < 1 or T < 1:
        raise ConfigError(f"prior dimensions must be positive (N={N}, M={M}, T={T})")
    if not 1 <= k < M:
        raise ConfigError(f"prior needs 1 <= k < M for sparsity (k={k}, M={M})")
    if alpha <= 0:
        raise ConfigError(f"prior exponent must be positive, got {alpha}")


@dataclass(frozen=True)
class PriorMask:
    """T x NM binary activation map; rows[t - 1] belongs to timestep t."""

    N: int
    M: int
    k: int
    T: int
    alpha: float
    rows: np.ndarray
    kind: str = "dtr"

    def __post_init__(self):
        rows = np.array(self.rows, dtype=np.int64)
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)

    @property
    def width(self) -> int:
        return self.N * self.M

    def row(self, t: int) -> np.ndarray:
        if not 1 <= t <= self.T:
            raise ConfigError(f"timestep {t} outside [1, {self.T}]")
        return self.rows[t - 1]

    def row_counts(self) -> np.ndarray:
        return self.rows.sum(axis=1)

    def deltas(self) -> np.ndarray:
        """Per-timestep surplus over kN active columns."""
        return self.row_counts() - self.k * self.N

    def shared_columns(self) -> np.ndarray:
        """Columns active at every timestep."""
        return np.flatnonzero(self.rows.all(axis=0))

    def intervals(self) -> np.ndarray:
        """(T, 2) array of [lo, hi) active column bounds, DTR masks only."""
        if self.kind != "dtr":
            raise RoutingError(f"{self.kind} masks have no interval structure")
        return dtr_intervals(self.N, self.M, self.k, self.T, self.alpha)

    def validate(self) -> "PriorMask":
        if self.rows.shape != (self.T, self.width):
            raise RoutingError(f"prior rows shape {self.rows.shape}, expected {(self.T, self.width)}")
        if not np.isin(self.rows, (0, 1)).all():
            raise RoutingError("prior rows must be binary")
        counts = self.row_counts()
        if counts.min() < self.k * self.N:
            raise RoutingError(f"prior row with {counts.min()} < kN={self.k * self.N} active columns")
        if self.kind == "dtr":
            if int(self.deltas().sum()) != self.N * (self.M - self.k):
                raise RoutingError("prior surplus does not telescope to N(M-k)")
            for t, (lo, hi) in enumerate(self.intervals(), start=1):
                if self.rows[t - 1, lo:hi].sum() != hi - lo or counts[t - 1] != hi - lo:
                    raise RoutingError(f"prior row {t} is not the interval [{lo}, {hi})")
        if self.shared_columns().size < shared_expert_lower_bound(self.N, self.M, self.k):
            raise RoutingError("prior shares fewer columns than the lower bound")
        return self


def dtr_intervals(N: int, M: int, k: int, T: int, alpha: float) -> np.ndarray:
    t = np.arange(1, T + 1, dtype=np.float64)
    span = N * (M - k)
    lo = round_half_away(span * ((t - 1.0) / T) ** alpha)
    hi = round_half_away(span * (t / T) ** alpha) + k * N
    return np.stack([lo, hi], axis=1)


def build_prior_mask(N: int, M: int, k: int, T: int, alpha: float = 4.0) -> PriorMask:
    """DTR prior activation map for N blocks of M experts with TopK = k."""
    _check_dims(N, M, k, T, alpha)
    rows = np.zeros((T, N * M), dtype=np.int64)
    for i, (lo, hi) in enumerate(dtr_intervals(N, M, k, T, alpha)):
        rows[i, lo:hi] = 1
    return PriorMask(N=N, M=M, k=k, T=T, alpha=float(alpha), rows=rows).validate()


def random_allocation_mask(
    N: int, M: int, k: int, T: int, seed: int, alpha: float = 4.0
) -> PriorMask:
    """Random-allocation baseline, defined for M = 3, k = 2 only.

    Per block: expert 0 is active at every timestep, expert 1 copies a
    randomly chosen column among the first N columns of the DTR prior and
    expert 2 is its complement.
    """
    if (M, k) != (3, 2):
        raise ConfigError(f"random allocation is defined for M=3, k=2 only (got M={M}, k={k})")
    dtr = build_prior_mask(N, M, k, T, alpha)
    rng = np.random.default_rng(seed)
    picks = rng.integers(0, N, size=N)
    rows = np.zeros((T, N * M), dtype=np.int64)
    for block, source in enumerate(picks):
        base = block * M
        rows[:, base] = 1
        rows[:, base + 1] = dtr.rows[:, source]
        rows[:, base + 2] = 1 - dtr.rows[:, source]
    logger.debug(f"Random allocation source columns: {picks.tolist()}")
    return PriorMask(N=N, M=M, k=k, T=T, alpha=float(alpha), rows=rows, kind="random").validate()


def mask_summary(mask: PriorMask) -> Tuple[int, int]:
    """(shared column count, lower bound) for reporting."""
    return int(mask.shared_columns().size), shared_expert_lower_bound(mask.N, mask.M, mask.k)
