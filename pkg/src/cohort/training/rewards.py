"""Shaped team reward, Lagrangian penalty and dual-variable updates."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..core import RewardWeights, StageOutcome


def shaped_reward(outcome: StageOutcome, fps_window: float, weights: RewardWeights) -> float:
    # time terms in seconds
    slack_pos = max(0.0, outcome.deadline_ms - (outcome.proc_ms + outcome.xfer_ms)) / 1000.0
    return (
        fps_window
        - weights.lambda_D * float(outcome.deadline_miss)
        - weights.lambda_E * outcome.energy_J
        + weights.w_slack * slack_pos
        - weights.w_rtt * outcome.rtt_ms / 1000.0
        - weights.w_proc * outcome.proc_ms / 1000.0
        - weights.w_xfer * outcome.xfer_ms / 1000.0
    )


def reward_terms(outcome: StageOutcome, fps_window: float, weights: RewardWeights) -> dict:
    """Signed contribution of each shaped-reward term; sums to shaped_reward."""
    slack_pos = max(0.0, outcome.deadline_ms - (outcome.proc_ms + outcome.xfer_ms)) / 1000.0
    return {
        "fps": fps_window,
        "miss": -weights.lambda_D * float(outcome.deadline_miss),
        "energy": -weights.lambda_E * outcome.energy_J,
        "slack": weights.w_slack * slack_pos,
        "rtt": -weights.w_rtt * outcome.rtt_ms / 1000.0,
        "proc": -weights.w_proc * outcome.proc_ms / 1000.0,
        "xfer": -weights.w_xfer * outcome.xfer_ms / 1000.0,
    }


@dataclass
class DualVariables:
    """Lagrange multipliers with their constraint limits.

    Powers enter both the penalty and the dual step divided by ``power_scale``
    (1 = watts). ``power_limits`` is in the same scaled units.
    """

    lambda_E: np.ndarray  # per robot
    lambda_D: float = 0.0
    power_limits: np.ndarray = None
    miss_limit: float = 0.2
    power_scale: np.ndarray = None

    def __post_init__(self):
        self.lambda_E = np.asarray(self.lambda_E, dtype=float)
        if self.power_limits is None:
            self.power_limits = np.full_like(self.lambda_E, np.inf)
        self.power_limits = np.asarray(self.power_limits, dtype=float)
        if self.power_scale is None:
            self.power_scale = np.ones_like(self.lambda_E)
        self.power_scale = np.asarray(self.power_scale, dtype=float)
        if np.any(self.lambda_E < 0) or self.lambda_D < 0:
            raise ValueError("dual variables must be non-negative")
        if np.any(self.power_scale <= 0):
            raise ValueError("power_scale must be > 0")

    @classmethod
    def zeros(cls, robots, power_frac=0.8, miss_limit=0.2, relative=True):
        """Zero multipliers; limits at ``power_frac`` of each robot's busy power.

        With ``relative`` the power terms are measured as fractions of busy power.
        """
        busy = np.array([p.busy_power for p in robots], dtype=float)
        if relative:
            return cls(np.zeros(len(robots)), 0.0, np.full(len(robots), power_frac), miss_limit, busy)
        return cls(np.zeros(len(robots)), 0.0, power_frac * busy, miss_limit)

    def copy(self):
        return DualVariables(self.lambda_E.copy(), self.lambda_D, self.power_limits.copy(), self.miss_limit,
                             self.power_scale.copy())


def penalized_reward(r: float, powers, miss: bool, duals: DualVariables) -> float:
    """r' = r - sum_i lambda_E_i * P_i - lambda_D * miss, with P_i in the duals' power units."""
    powers = np.asarray(powers, dtype=float)
    if np.any(duals.lambda_E < 0) or duals.lambda_D < 0:
        raise ValueError("dual variables must be non-negative")
    k = len(powers)
    scaled = powers / duals.power_scale[:k]
    return float(r - np.dot(duals.lambda_E[:k], scaled) - duals.lambda_D * float(miss))


def project_dual(lam, alpha, measured, limit):
    """[lam + alpha (measured - limit)]_+ elementwise."""
    return np.maximum(0.0, np.asarray(lam, dtype=float) + alpha * (np.asarray(measured, dtype=float) - np.asarray(limit, dtype=float)))


def dual_update(duals: DualVariables, mean_power, miss_rate: float, alpha: float) -> DualVariables:
    """One projected subgradient step on every multiplier.

    ``mean_power`` is in watts. Robots without a measurement (NaN power, e.g.
    offline) keep their multiplier.
    """
    if alpha <= 0:
        raise ValueError("dual learning rate must be > 0")
    mean_power = np.asarray(mean_power, dtype=float) / duals.power_scale
    lam_E = duals.lambda_E.copy()
    ok = np.isfinite(mean_power)
    lam_E[ok] = project_dual(lam_E[ok], alpha, mean_power[ok], duals.power_limits[ok])
    lam_D = float(project_dual(duals.lambda_D, alpha, miss_rate, duals.miss_limit))
    return DualVariables(lam_E, lam_D, duals.power_limits.copy(), duals.miss_limit, duals.power_scale.copy())


def make_reward_fn(weights: RewardWeights):
    """Reward hook for the simulator: returns (shaped, penalized)."""

    def fn(outcome, fps, powers, duals):
        r = shaped_reward(outcome, fps, weights)
        rp = penalized_reward(r, powers, outcome.deadline_miss, duals) if duals is not None else r
        return r, rp

    return fn
