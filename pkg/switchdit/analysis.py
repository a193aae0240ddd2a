"""
Routing-map analysis: denoising paths, shared experts, stabilization.
"""

from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from .gating import stacked_routing
from .losses import diffusion_prior_loss, routing_hamming
from .matching import Assignment, assignment_cost, hungarian
from .prior import round_half_away, shared_expert_lower_bound
from .tensor import Tensor, no_grad

PATH_FRACTIONS = (0.25, 0.5, 0.75, 1.0)


def path_timesteps(T: int) -> List[int]:
    """The timesteps 0.25T, 0.5T, 0.75T and T, rounded and at least 1."""
    return [max(1, int(round_half_away(f * T))) for f in PATH_FRACTIONS]


def denoising_paths(W_gate: np.ndarray, N: int, M: int) -> Dict:
    """Per-block experts used along the denoising trajectory.

    Args:
        W_gate: (T, NM) stacked activation map.

    Returns:
        dict with the path timesteps and, per block, the selected experts at
        each of them, the experts common to all of them, the timestep-specific ones
        and the experts active at every one of the T timesteps.
    """
    W_gate = np.asarray(W_gate)
    T = W_gate.shape[0]
    stops = path_timesteps(T)
    blocks = []
    shared_total = 0
    for b in range(N):
        cols = W_gate[:, b * M : (b + 1) * M].astype(bool)
        selected = {t: np.flatnonzero(cols[t - 1]).tolist() for t in stops}
        common = sorted(set.intersection(*(set(s) for s in selected.values())))
        shared_all = np.flatnonzero(cols.all(axis=0)).tolist()
        shared_total += len(shared_all)
        blocks.append(
            {
                "block": b,
                "selected": {str(t): s for t, s in selected.items()},
                "common": common,
                "specific": {str(t): sorted(set(s) - set(common)) for t, s in selected.items()},
                "shared_all_timesteps": shared_all,
            }
        )
    return {"timesteps": stops, "blocks": blocks, "shared_total": shared_total}


def shared_summary(W: np.ndarray, N: int, M: int, k: int) -> Dict:
    W = np.asarray(W)
    shared = int(np.flatnonzero(W.all(axis=0)).size)
    return {"shared_columns": shared, "lower_bound": shared_expert_lower_bound(N, M, k)}


def stabilization_step(metrics: pd.DataFrame, window: int = 200) -> Optional[int]:
    """First step after which the stacked gate map stays unchanged for `window` steps.

    Uses the `gate_stable` column, where a 1 at step s means the map entering
    step s equals the one entering step s - 1, i.e. the maps after steps
    s - 2 and s - 1 agree. A run of flags from step s0 therefore fixes the
    map left by step s0 - 2 (0 is the initial map). Returns None if no such
    run exists.
    """
    flags = metrics["gate_stable"].fillna(0).astype(int).to_numpy()
    steps = metrics["step"].to_numpy()
    run = 0
    for i, flag in enumerate(flags):
        run = run + 1 if flag else 0
        if run >= window:
            start = i - window + 1
            return int(steps[start]) - 2
    return None


def smoothed_loss(metrics: pd.DataFrame, window: int = 50, column: str = "loss_noise") -> pd.Series:
    """Trailing rolling mean of a loss column."""
    return metrics[column].rolling(window, min_periods=1).mean()


def match_report(
    model, prior, normalize: bool = True, random_allocation: bool = False, project: bool = False
) -> Dict:
    """Cost matrix, assignment and per-timestep L_dp for a model's clean gates."""
    P_tot, W_gate = stacked_routing(model)
    C = assignment_cost(W_gate, prior.rows)
    if random_allocation:
        assignment = Assignment.identity(C.shape[0], float(np.trace(C)))
    else:
        assignment = hungarian(C)
    selected = W_gate.reshape(W_gate.shape[0], prior.N, prior.M).astype(bool) if project else None
    with no_grad():
        per_t = diffusion_prior_loss(
            Tensor(P_tot), assignment, prior.rows, prior.N, prior.k, normalize, selected=selected
        )
    return {
        "cost_matrix": C.astype(int).tolist(),
        "assignment": assignment.to_json(),
        "loss_dp": per_t.data.tolist(),
        "loss_dp_mean": float(per_t.data.mean()),
        "prior_hamming": routing_hamming(W_gate, prior.rows, assignment),
        "prior_surplus": int(prior.deltas().sum()),
    }
