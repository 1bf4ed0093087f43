"""Ground-truth speed over the collision-free constraint manifold.

The composite distance combines distance-to-manifold with the margin deficit
to obstacles through a max; the expert speed decays exponentially with its
square. Speed is maximal (1.0) exactly on the collision-free manifold and
never needs clipping.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kinematics, manifolds
from .errors import ContractViolationError


@dataclass
class SpeedModelConfig:
    """epsilon: obstacle safety margin (workspace units); lam: decay scaling;
    delta: on-manifold threshold. delta defaults to epsilon, making the
    manifold term unit-compatible with the margin term without rescaling."""

    epsilon: float = 0.1
    lam: float = 4.0
    delta: Optional[float] = None

    def __post_init__(self):
        if self.delta is None:
            self.delta = self.epsilon
        if self.epsilon <= 0 or self.lam <= 0 or self.delta <= 0:
            raise ContractViolationError("epsilon, lam, delta must be > 0")


class SpeedModel:
    """Binds a constraint, a robot, and an environment to the speed field.

    Residual units and workspace units generally differ, so the manifold
    distance is rescaled by epsilon/delta before entering the max: a
    configuration at the delta band edge is penalized like one at margin
    epsilon from an obstacle.
    """

    def __init__(
        self,
        spec: manifolds.ConstraintSpec,
        robot,
        env: kinematics.Environment,
        config: Optional[SpeedModelConfig] = None,
    ):
        self.spec = spec
        self.robot = robot
        self.env = env
        self.config = config or SpeedModelConfig()
        self._dm_scale = self.config.epsilon / self.config.delta

    # -- distances -----------------------------------------------------------

    def manifold_distance(self, q) -> float:
        return manifolds.manifold_distance(self.spec, q)

    def clearance(self, q) -> float:
        return kinematics.clearance(self.robot, self.env, q)

    def composite_distance(self, q) -> float:
        """max of scaled manifold distance and obstacle margin deficit (>= 0)."""
        d_m = self.manifold_distance(q) * self._dm_scale
        d_c = self.clearance(q)
        return float(max(d_m, self.config.epsilon - d_c))

    def composite_distance_batch(self, Q: np.ndarray) -> np.ndarray:
        Q = np.atleast_2d(Q)
        d_m = manifolds.manifold_distance_batch(self.spec, Q) * self._dm_scale
        d_c = kinematics.clearance_batch(self.robot, self.env, Q)
        return np.maximum(d_m, self.config.epsilon - d_c)

    # -- speeds ----------------------------------------------------------------

    def speed_from_distance(self, d) -> np.ndarray:
        d = np.asarray(d, dtype=float)
        return np.exp(-(d ** 2) / (self.config.lam * self.config.epsilon ** 2))

    def expert_speed(self, q) -> float:
        """exp(-d^2 / (lam * epsilon^2)), always in (0, 1]."""
        return float(self.speed_from_distance(self.composite_distance(q)))

    def expert_speed_batch(self, Q: np.ndarray) -> np.ndarray:
        return self.speed_from_distance(self.composite_distance_batch(Q))

    def scheduled_speed(self, q, beta: float) -> float:
        """Convex blend (1 - beta) + beta * expert_speed(q)."""
        _check_beta(beta)
        return (1.0 - beta) + beta * self.expert_speed(q)


def scheduled_speed_from_expert(s_star, beta: float) -> np.ndarray:
    """Blend precomputed expert speeds toward 1 (used by the trainer)."""
    _check_beta(beta)
    return (1.0 - beta) + beta * np.asarray(s_star, dtype=float)


def _check_beta(beta: float) -> None:
    if not (0.0 <= beta <= 1.0):
        raise ContractViolationError(f"beta must be in [0, 1], got {beta}")
