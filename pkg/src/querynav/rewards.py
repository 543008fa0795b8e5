"""Per-step navigation reward and the two query penalties."""
from __future__ import annotations

import math

from querynav.errors import InputError

PROGRESS_WEIGHT = 1.0
SUCCESS_REWARD = 10.0
STEP_COST = 0.01
R_NEG = -1.2
R_F = -0.5
TAU_F = 10
K_SOFT = 3
NU = 3


def nav_reward(d_prev: float, d_now: float, success: bool, binary_progress: bool = False) -> float:
    """Progress toward the goal, success bonus, and a constant time cost.

    ``binary_progress`` pays a flat +1 for any reduction instead of the
    proportional distance change.
    """
    if d_prev < 0 or d_now < 0:
        raise InputError("distances must be non-negative")
    delta = d_prev - d_now
    if binary_progress:
        delta = 1.0 if delta > 0 else (-1.0 if delta < 0 else 0.0)
    return PROGRESS_WEIGHT * delta + SUCCESS_REWARD * float(success) - STEP_COST


def zeta_q(k: int, K: int = K_SOFT, nu: int = NU, r_neg: float = R_NEG) -> float:
    """Penalty for the k-th query of an episode (1-based)."""
    if k < 1:
        raise InputError("query index k is 1-based")
    if k < K:
        return k * (r_neg + math.exp(-nu)) / nu
    return r_neg + math.exp(-k)


def zeta_f(j: int, tau_f: int = TAU_F, r_f: float = R_F) -> float:
    """Penalty for querying ``j`` steps after the previous query; j=0 marks the first query."""
    if j < 0:
        raise InputError("j must be >= 0")
    if 0 < j < tau_f:
        return r_f / j
    return 0.0
