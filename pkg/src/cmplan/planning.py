"""Path extraction by bidirectional tangential gradient descent, plus validation."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field as dc_field
from typing import List, Optional

import numpy as np
import torch

from . import kinematics, manifolds
from .errors import ContractViolationError, PlannerFailureError
from .field import TimeFieldNet, _derivatives


@dataclass
class PlannerConfig:
    r_g: float = 0.05                # goal region radius
    alpha: float = 0.0               # step size; 0 -> 0.5 * r_g
    max_steps: int = 2000
    margin_tol: float = 0.05
    clearance_min: float = 0.0
    eta: float = 0.0                 # viscosity used for step-speed evaluation
    reproject_every: int = 10        # 0 disables drift re-projection
    reproject_tol: float = 1e-8
    densify_resolution: float = 0.0  # 0 -> r_g / 2

    def __post_init__(self):
        if self.r_g <= 0 or self.max_steps < 1:
            raise ContractViolationError("r_g must be > 0 and max_steps >= 1")
        if self.alpha == 0.0:
            self.alpha = 0.5 * self.r_g
        if self.alpha <= 0:
            raise ContractViolationError("alpha must be > 0")
        if self.densify_resolution == 0.0:
            self.densify_resolution = self.r_g / 2.0


@dataclass
class PathResult:
    waypoints: np.ndarray            # (n, m)
    success: bool
    plan_time: float
    length: float
    margin_profile: np.ndarray       # per-waypoint distance to the manifold
    min_clearance: float
    n_steps: int = 0
    converged: bool = False
    method: str = "field"
    arrival_history: Optional[np.ndarray] = None

    @property
    def margin_mean(self) -> float:
        return float(self.margin_profile.mean()) if len(self.margin_profile) else 0.0

    @property
    def margin_max(self) -> float:
        return float(self.margin_profile.max()) if len(self.margin_profile) else 0.0


@dataclass
class ValidityReport:
    passed: bool
    max_margin: float
    min_clearance: float
    failed_index: int = -1           # waypoint (or segment) index of first violation
    reason: str = ""


def path_length(waypoints: np.ndarray) -> float:
    """Sum of consecutive waypoint gaps."""
    w = np.asarray(waypoints, dtype=float)
    if len(w) < 2:
        return 0.0
    return float(np.linalg.norm(np.diff(w, axis=0), axis=1).sum())


def _margins(spec, waypoints: np.ndarray) -> np.ndarray:
    return manifolds.manifold_distance_batch(spec, waypoints)


def _clearances(robot, env, waypoints: np.ndarray) -> np.ndarray:
    return kinematics.clearance_batch(robot, env, waypoints)


def _time_gradients(net: TimeFieldNet, q0: np.ndarray, qT: np.ndarray, eta: float):
    """Arrival time, its endpoint gradients, and endpoint speeds at one pair."""
    t0 = net.tensor(q0)
    tT = net.tensor(qT)
    need_lap = eta != 0.0
    tau_t, g0_t, gT_t, lap0_t, lapT_t = _derivatives(
        net, t0, tT, need_laplacian=need_lap
    )
    tau = float(tau_t[0])
    g0 = g0_t[0].detach().numpy()
    gT = gT_t[0].detach().numpy()
    diff = qT - q0
    dist = float(np.linalg.norm(diff))
    T = dist / tau
    # Chain rule of T = ||q0 - qT|| / tau.
    gradT_q0 = (-diff) / (dist * tau) - dist * g0 / tau ** 2
    gradT_qT = diff / (dist * tau) - dist * gT / tau ** 2
    lap0 = float(lap0_t[0]) if need_lap else 0.0
    lapT = float(lapT_t[0]) if need_lap else 0.0
    S0 = 1.0 / (eta * lap0 + np.linalg.norm(gradT_q0))
    ST = 1.0 / (eta * lapT + np.linalg.norm(gradT_qT))
    return T, gradT_q0, gradT_qT, S0, ST


def planner_step(
    net: TimeFieldNet, spec, q0: np.ndarray, qT: np.ndarray, alpha: float,
    eta: float = 0.0,
):
    """One simultaneous bidirectional update; steps are tangential at each end."""
    T, gradT_q0, gradT_qT, S0, ST = _time_gradients(net, q0, qT, eta)
    if not (np.all(np.isfinite(gradT_q0)) and np.all(np.isfinite(gradT_qT))
            and np.isfinite(S0) and np.isfinite(ST)):
        raise PlannerFailureError("non-finite gradient during planning")
    step0 = -alpha * S0 ** 2 * manifolds.tangent_project(spec, q0, gradT_q0)
    stepT = -alpha * ST ** 2 * manifolds.tangent_project(spec, qT, gradT_qT)
    return q0 + step0, qT + stepT, T, step0, stepT


def plan(
    net: TimeFieldNet,
    spec: manifolds.ConstraintSpec,
    robot,
    env: kinematics.Environment,
    q0,
    qT,
    cfg: Optional[PlannerConfig] = None,
) -> PathResult:
    """Walk both endpoints toward each other along the learned time field.

    Each side moves by -alpha * S^2 * (tangential component of grad T); the
    walk stops when the gap drops below r_g or the step budget runs out.
    Waypoints are optionally re-projected to the manifold every
    reproject_every steps. The result is the forward chain concatenated with
    the reversed backward chain; success additionally requires the validity
    check to pass.
    """
    cfg = cfg or PlannerConfig()
    q0 = np.asarray(q0, dtype=float).copy()
    qT = np.asarray(qT, dtype=float).copy()
    t_start = time.perf_counter()

    fwd: List[np.ndarray] = [q0.copy()]
    bwd: List[np.ndarray] = [qT.copy()]
    alpha = cfg.alpha
    converged = bool(np.linalg.norm(q0 - qT) < cfg.r_g)
    arrival_history: List[float] = []
    steps = 0

    while not converged and steps < cfg.max_steps:
        dist_before = np.linalg.norm(q0 - qT)
        q0_new, qT_new, T, _, _ = planner_step(net, spec, q0, qT, alpha, cfg.eta)
        arrival_history.append(T)
        dist_after = np.linalg.norm(q0_new - qT_new)
        if dist_after - dist_before > 10.0 * alpha:
            # Guard against untrained regions blowing the iterate apart.
            alpha = max(alpha * 0.5, 1e-4 * cfg.alpha)
            steps += 1
            continue
        q0, qT = q0_new, qT_new
        steps += 1
        if cfg.reproject_every and steps % cfg.reproject_every == 0:
            try:
                q0 = manifolds.project_to_manifold(spec, q0, tol=cfg.reproject_tol)
                qT = manifolds.project_to_manifold(spec, qT, tol=cfg.reproject_tol)
            except Exception:
                pass  # keep the unprojected iterate; validation will judge it
        fwd.append(q0.copy())
        bwd.append(qT.copy())
        if np.linalg.norm(q0 - qT) < cfg.r_g:
            converged = True

    way = fwd + bwd[::-1]
    if len(way) >= 2 and np.array_equal(way[len(fwd) - 1], way[len(fwd)]):
        way.pop(len(fwd))  # collapse coincident meeting points
    waypoints = np.stack(way)

    margins = _margins(spec, waypoints)
    clears = _clearances(robot, env, waypoints)
    result = PathResult(
        waypoints=waypoints,
        success=False,
        plan_time=time.perf_counter() - t_start,
        length=path_length(waypoints),
        margin_profile=margins,
        min_clearance=float(clears.min()),
        n_steps=steps,
        converged=converged,
        arrival_history=np.asarray(arrival_history),
    )
    if converged:
        report = validate_path(result.waypoints, spec, robot, env, cfg)
        result.success = report.passed
    return result


def validate_path(
    waypoints,
    spec: manifolds.ConstraintSpec,
    robot,
    env: kinematics.Environment,
    cfg: PlannerConfig,
) -> ValidityReport:
    """Check manifold margins and clearance on waypoints and densified segments."""
    w = np.atleast_2d(np.asarray(waypoints, dtype=float))
    if len(w) == 0:
        raise ContractViolationError("path is empty")
    margins = _margins(spec, w)
    clears = _clearances(robot, env, w)
    for i in range(len(w)):
        if margins[i] > cfg.margin_tol:
            return ValidityReport(False, float(margins[i]), float(clears.min()),
                                  failed_index=i, reason="margin")
        if clears[i] < cfg.clearance_min:
            return ValidityReport(False, float(margins.max()), float(clears[i]),
                                  failed_index=i, reason="clearance")
    max_margin = float(margins.max())
    min_clear = float(clears.min())
    res = cfg.densify_resolution
    for i in range(len(w) - 1):
        gap = np.linalg.norm(w[i + 1] - w[i])
        n_mid = int(np.ceil(gap / res)) - 1
        if n_mid <= 0:
            continue
        ts = np.linspace(0.0, 1.0, n_mid + 2)[1:-1]
        mids = w[i][None, :] + ts[:, None] * (w[i + 1] - w[i])[None, :]
        mid_margins = _margins(spec, mids)
        mid_clears = _clearances(robot, env, mids)
        max_margin = max(max_margin, float(mid_margins.max()))
        min_clear = min(min_clear, float(mid_clears.min()))
        if np.any(mid_margins > cfg.margin_tol):
            return ValidityReport(False, float(mid_margins.max()), min_clear,
                                  failed_index=i, reason="segment margin")
        if np.any(mid_clears < cfg.clearance_min):
            return ValidityReport(False, max_margin, float(mid_clears.min()),
                                  failed_index=i, reason="segment clearance")
    return ValidityReport(True, max_margin, min_clear)


# ---------------------------------------------------------------------------
# Path files


def save_path_csv(result: PathResult, path) -> None:
    """One waypoint per row; metrics in comment headers."""
    with open(path, "w") as fh:
        fh.write(f"# success={result.success}\n")
        fh.write(f"# length={result.length:.9g}\n")
        fh.write(f"# margin_mean={result.margin_mean:.9g}\n")
        fh.write(f"# margin_max={result.margin_max:.9g}\n")
        fh.write(f"# min_clearance={result.min_clearance:.9g}\n")
        fh.write(f"# plan_time={result.plan_time:.6f}\n")
        m = result.waypoints.shape[1] if result.waypoints.ndim == 2 else 0
        fh.write(",".join(f"q{i}" for i in range(m)) + "\n")
        for row in np.atleast_2d(result.waypoints):
            fh.write(",".join(f"{x:.10g}" for x in row) + "\n")


def load_path_csv(path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#") or line.startswith("q") or not line.strip():
                continue
            rows.append([float(x) for x in line.split(",")])
    return np.asarray(rows)


def path_result_record(result: PathResult, include_time: bool = False) -> dict:
    rec = {
        "success": bool(result.success),
        "converged": bool(result.converged),
        "length": float(result.length),
        "margin_mean": result.margin_mean,
        "margin_max": result.margin_max,
        "min_clearance": float(result.min_clearance),
        "n_waypoints": int(len(result.waypoints)),
        "n_steps": int(result.n_steps),
        "method": result.method,
        "waypoints": np.asarray(result.waypoints).tolist(),
    }
    if include_time:
        rec["plan_time"] = float(result.plan_time)
    return rec


def save_path_jsonl(results, path, include_time: bool = False) -> None:
    """One JSON object per result, full waypoint lists included."""
    with open(path, "w") as fh:
        for r in results:
            fh.write(json.dumps(path_result_record(r, include_time=include_time),
                                sort_keys=True) + "\n")
