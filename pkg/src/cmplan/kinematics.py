"""Kinematic chains, sphere-decomposed collision geometry, and obstacle SDFs."""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import geometry
from .errors import CheckpointError, ContractViolationError, IKFailureError

EMPTY_ENV_CLEARANCE = 1e6


# ---------------------------------------------------------------------------
# Robot models


@dataclass
class Joint:
    axis: np.ndarray                 # unit 3-vector in the parent frame
    origin: np.ndarray               # rigid transform parent -> joint frame
    type: str = "revolute"           # "revolute" | "prismatic"
    limits: Tuple[float, float] = (-np.pi, np.pi)

    def __post_init__(self):
        self.axis = np.asarray(self.axis, dtype=float).reshape(3)
        n = np.linalg.norm(self.axis)
        if n == 0:
            raise ContractViolationError("joint axis must be nonzero")
        self.axis = self.axis / n
        self.origin = np.asarray(self.origin, dtype=float).reshape(4, 4)
        if self.type not in ("revolute", "prismatic"):
            raise ContractViolationError(f"unknown joint type {self.type!r}")
        if self.limits[0] > self.limits[1]:
            raise ContractViolationError("joint limits must satisfy lo <= hi")


def _axis_rotations(axis: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """Batch of rotation matrices about one unit axis, shape (B, 3, 3)."""
    k = axis
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    s = np.sin(angles)[:, None, None]
    c = np.cos(angles)[:, None, None]
    return np.eye(3) + s * K + (1.0 - c) * (K @ K)


class KinematicChain:
    """Serial chain with per-link collision spheres.

    link_spheres[i] lists (center, radius) pairs expressed in the frame that
    follows joint i's motion; the optional end-effector offset is a fixed
    transform appended after the last joint.
    """

    def __init__(
        self,
        joints: Sequence[Joint],
        link_spheres: Optional[Sequence[Sequence[Tuple[np.ndarray, float]]]] = None,
        ee_offset: Optional[np.ndarray] = None,
        name: str = "chain",
    ):
        if not joints:
            raise ContractViolationError("chain needs at least one joint")
        self.joints = list(joints)
        self.ee_offset = (
            np.eye(4) if ee_offset is None else np.asarray(ee_offset, dtype=float)
        )
        self.name = name
        if link_spheres is None:
            link_spheres = [[] for _ in self.joints]
        if len(link_spheres) != len(self.joints):
            raise ContractViolationError("link_spheres must have one entry per joint")
        self.link_spheres = [
            [(np.asarray(c, dtype=float).reshape(3), float(r)) for c, r in spheres]
            for spheres in link_spheres
        ]
        for spheres in self.link_spheres:
            if any(r <= 0 for _, r in spheres):
                raise ContractViolationError("sphere radii must be > 0")
        # Flattened sphere table (link index, local center, radius).
        self._sphere_link = np.array(
            [i for i, sp in enumerate(self.link_spheres) for _ in sp], dtype=int
        )
        self._sphere_local = (
            np.array([c for sp in self.link_spheres for c, _ in sp])
            if self._sphere_link.size else np.zeros((0, 3))
        )
        self.sphere_radii = np.array(
            [r for sp in self.link_spheres for _, r in sp], dtype=float
        )

    @property
    def dof(self) -> int:
        return len(self.joints)

    @property
    def joint_limits(self) -> np.ndarray:
        return np.array([j.limits for j in self.joints])

    def _check_q(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float).reshape(-1)
        if q.shape[0] != self.dof:
            raise ContractViolationError(
                f"configuration has length {q.shape[0]}, expected {self.dof}"
            )
        lims = self.joint_limits
        if np.any(q < lims[:, 0] - 1e-9) or np.any(q > lims[:, 1] + 1e-9):
            warnings.warn("configuration outside joint limits", stacklevel=3)
        return q

    def link_transforms(self, q) -> List[np.ndarray]:
        """World transform after each joint, plus the end-effector frame."""
        q = self._check_q(q)
        T = np.eye(4)
        frames = []
        for joint, qi in zip(self.joints, q):
            T = T @ joint.origin
            if joint.type == "revolute":
                T = T @ geometry.rotation(joint.axis, qi)
            else:
                T = T @ geometry.translation(joint.axis * qi)
            frames.append(T.copy())
        frames.append(frames[-1] @ self.ee_offset)
        return frames

    def link_transforms_batch(self, Q: np.ndarray) -> np.ndarray:
        """Batched frames, shape (B, dof + 1, 4, 4); last entry is the EE."""
        Q = np.asarray(Q, dtype=float).reshape(-1, self.dof)
        B = Q.shape[0]
        T = np.broadcast_to(np.eye(4), (B, 4, 4)).copy()
        frames = np.empty((B, self.dof + 1, 4, 4))
        for i, joint in enumerate(self.joints):
            M = np.broadcast_to(np.eye(4), (B, 4, 4)).copy()
            if joint.type == "revolute":
                M[:, :3, :3] = _axis_rotations(joint.axis, Q[:, i])
            else:
                M[:, :3, 3] = Q[:, i, None] * joint.axis
            T = T @ joint.origin @ M
            frames[:, i] = T
        frames[:, -1] = frames[:, -2] @ self.ee_offset
        return frames

    def end_effector_pose(self, q) -> np.ndarray:
        return self.link_transforms(q)[-1]

    def sphere_centers(self, q) -> np.ndarray:
        """World-frame collision sphere centers, shape (n_spheres, 3)."""
        return self.sphere_centers_batch(np.asarray(q, dtype=float)[None])[0]

    def sphere_centers_batch(self, Q: np.ndarray) -> np.ndarray:
        frames = self.link_transforms_batch(Q)
        if self._sphere_link.size == 0:
            return np.zeros((frames.shape[0], 0, 3))
        F = frames[:, self._sphere_link]              # (B, S, 4, 4)
        local = self._sphere_local                    # (S, 3)
        return np.einsum("bsij,sj->bsi", F[:, :, :3, :3], local) + F[:, :, :3, 3]

    def jacobian(self, q) -> np.ndarray:
        """Geometric end-effector Jacobian, rows [v; omega], shape (6, dof)."""
        q = self._check_q(q)
        frames = self.link_transforms(q)
        p_ee = frames[-1][:3, 3]
        J = np.zeros((6, self.dof))
        T = np.eye(4)
        for i, joint in enumerate(self.joints):
            T_joint = T @ joint.origin
            z = T_joint[:3, :3] @ joint.axis
            p = T_joint[:3, 3]
            if joint.type == "revolute":
                J[:3, i] = np.cross(z, p_ee - p)
                J[3:, i] = z
            else:
                J[:3, i] = z
            T = frames[i]
        return J


def forward_kinematics(chain: KinematicChain, q):
    """Per-link world transforms (end-effector last) and collision spheres.

    Returns (frames, sphere_centers, sphere_radii).
    """
    frames = chain.link_transforms(q)
    centers = chain.sphere_centers(q)
    return frames, centers, chain.sphere_radii


class PointRobot:
    """A single sphere at the configuration point (ambient C-space scenes)."""

    def __init__(self, dimension: int = 3, radius: float = 0.0):
        if dimension < 1 or dimension > 3:
            raise ContractViolationError("point robot dimension must be 1..3")
        self.dimension = dimension
        self.radius = float(radius)

    @property
    def dof(self) -> int:
        return self.dimension

    def workspace_point(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float).reshape(-1)
        out = np.zeros(3)
        out[: self.dimension] = q[: self.dimension]
        return out

    def sphere_centers(self, q) -> np.ndarray:
        return self.workspace_point(q)[None, :]

    def sphere_centers_batch(self, Q: np.ndarray) -> np.ndarray:
        Q = np.asarray(Q, dtype=float).reshape(-1, self.dimension)
        out = np.zeros((Q.shape[0], 1, 3))
        out[:, 0, : self.dimension] = Q
        return out

    @property
    def sphere_radii(self) -> np.ndarray:
        return np.array([self.radius])


# ---------------------------------------------------------------------------
# Environment obstacles


class BoxObstacle:
    """Axis-aligned box with exact signed distance."""

    def __init__(self, lo, hi):
        self.lo = np.asarray(lo, dtype=float).reshape(3)
        self.hi = np.asarray(hi, dtype=float).reshape(3)
        if np.any(self.lo >= self.hi):
            raise ContractViolationError("box requires lo < hi per axis")
        self.center = (self.lo + self.hi) / 2.0
        self.half = (self.hi - self.lo) / 2.0

    def sdf(self, P: np.ndarray) -> np.ndarray:
        P = np.atleast_2d(P)
        d = np.abs(P - self.center) - self.half
        outside = np.linalg.norm(np.maximum(d, 0.0), axis=1)
        inside = np.minimum(np.max(d, axis=1), 0.0)
        return outside + inside


class SphereObstacle:
    def __init__(self, center, radius: float):
        if radius <= 0:
            raise ContractViolationError("sphere radius must be > 0")
        self.center = np.asarray(center, dtype=float).reshape(3)
        self.radius = float(radius)

    def sdf(self, P: np.ndarray) -> np.ndarray:
        P = np.atleast_2d(P)
        return np.linalg.norm(P - self.center, axis=1) - self.radius


class MeshObstacle:
    """Triangle-mesh obstacle; signed distance only when watertight."""

    def __init__(self, mesh):
        self.mesh = mesh

    def sdf(self, P: np.ndarray) -> np.ndarray:
        P = np.atleast_2d(P)
        if self.mesh.watertight:
            return np.array([self.mesh.signed_distance(p) for p in P])
        return np.array([self.mesh.unsigned_distance(p) for p in P])


@dataclass
class Environment:
    obstacles: list = field(default_factory=list)
    sdf_grid: Optional["SdfGrid"] = None
    empty_clearance: float = EMPTY_ENV_CLEARANCE

    @property
    def is_empty(self) -> bool:
        return not self.obstacles and self.sdf_grid is None

    def sdf(self, P: np.ndarray) -> np.ndarray:
        """Min signed distance over obstacles, batched over points (n, 3)."""
        P = np.atleast_2d(np.asarray(P, dtype=float))
        if self.is_empty:
            return np.full(P.shape[0], self.empty_clearance)
        if self.sdf_grid is not None:
            inside = self.sdf_grid.contains(P)
            out = np.empty(P.shape[0])
            if np.any(inside):
                out[inside] = self.sdf_grid.interpolate(P[inside])
            if np.any(~inside):
                rest = P[~inside]
                if self.obstacles:
                    out[~inside] = self._analytic_sdf(rest)
                else:
                    out[~inside] = self.sdf_grid.boundary_estimate(rest)
            return out
        return self._analytic_sdf(P)

    def _analytic_sdf(self, P: np.ndarray) -> np.ndarray:
        vals = np.stack([ob.sdf(P) for ob in self.obstacles], axis=0)
        return vals.min(axis=0)


def env_sdf(env: Environment, x) -> float:
    """Signed distance of a single workspace point to the environment."""
    x = np.asarray(x, dtype=float).reshape(3)
    if not np.all(np.isfinite(x)):
        raise ContractViolationError("query point has non-finite entries")
    return float(env.sdf(x[None])[0])


def clearance(robot, env: Environment, q) -> float:
    """Min over robot spheres of (environment SDF at center - radius)."""
    if env.is_empty:
        return env.empty_clearance
    centers = robot.sphere_centers(q)
    if centers.shape[0] == 0:
        return env.empty_clearance
    d = env.sdf(centers) - robot.sphere_radii
    return float(d.min())


def clearance_batch(robot, env: Environment, Q: np.ndarray) -> np.ndarray:
    Q = np.atleast_2d(Q)
    if env.is_empty:
        return np.full(Q.shape[0], env.empty_clearance)
    centers = robot.sphere_centers_batch(Q)           # (B, S, 3)
    B, S, _ = centers.shape
    if S == 0:
        return np.full(B, env.empty_clearance)
    d = env.sdf(centers.reshape(B * S, 3)).reshape(B, S) - robot.sphere_radii
    return d.min(axis=1)


# ---------------------------------------------------------------------------
# Precomputed SDF grids

_GRID_MAGIC = b"CMPSDF01"


class SdfGrid:
    """Regular grid of SDF samples with trilinear interpolation."""

    def __init__(self, origin, spacing, values: np.ndarray):
        self.origin = np.asarray(origin, dtype=float).reshape(3)
        spacing = np.asarray(spacing, dtype=float).reshape(-1)
        self.spacing = np.full(3, spacing[0]) if spacing.size == 1 else spacing.reshape(3)
        if np.any(self.spacing <= 0):
            raise ContractViolationError("grid spacing must be > 0")
        self.values = np.asarray(values, dtype=np.float32)
        if self.values.ndim != 3:
            raise ContractViolationError("grid values must be 3-dimensional")
        self.dims = np.array(self.values.shape, dtype=np.int64)
        self.upper = self.origin + (self.dims - 1) * self.spacing

    def contains(self, P: np.ndarray) -> np.ndarray:
        P = np.atleast_2d(P)
        return np.all((P >= self.origin) & (P <= self.upper), axis=1)

    def interpolate(self, P: np.ndarray) -> np.ndarray:
        P = np.atleast_2d(P)
        u = (P - self.origin) / self.spacing
        i0 = np.clip(np.floor(u).astype(int), 0, self.dims - 2)
        f = u - i0
        v = self.values
        ix, iy, iz = i0[:, 0], i0[:, 1], i0[:, 2]
        fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
        c000 = v[ix, iy, iz]
        c100 = v[ix + 1, iy, iz]
        c010 = v[ix, iy + 1, iz]
        c110 = v[ix + 1, iy + 1, iz]
        c001 = v[ix, iy, iz + 1]
        c101 = v[ix + 1, iy, iz + 1]
        c011 = v[ix, iy + 1, iz + 1]
        c111 = v[ix + 1, iy + 1, iz + 1]
        c00 = c000 * (1 - fx) + c100 * fx
        c10 = c010 * (1 - fx) + c110 * fx
        c01 = c001 * (1 - fx) + c101 * fx
        c11 = c011 * (1 - fx) + c111 * fx
        c0 = c00 * (1 - fy) + c10 * fy
        c1 = c01 * (1 - fy) + c11 * fy
        return (c0 * (1 - fz) + c1 * fz).astype(float)

    def boundary_estimate(self, P: np.ndarray) -> np.ndarray:
        """Monotone estimate outside the grid: boundary value + distance to box."""
        P = np.atleast_2d(P)
        clamped = np.clip(P, self.origin, self.upper)
        gap = np.linalg.norm(P - clamped, axis=1)
        return self.interpolate(clamped) + gap

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(_GRID_MAGIC)
            fh.write(struct.pack("<3d", *self.origin))
            fh.write(struct.pack("<3d", *self.spacing))
            fh.write(struct.pack("<3q", *self.dims))
            fh.write(np.ascontiguousarray(self.values, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> "SdfGrid":
        path = Path(path)
        with open(path, "rb") as fh:
            magic = fh.read(8)
            if magic != _GRID_MAGIC:
                raise CheckpointError(f"{path}: not an SDF grid file")
            origin = struct.unpack("<3d", fh.read(24))
            spacing = struct.unpack("<3d", fh.read(24))
            dims = struct.unpack("<3q", fh.read(24))
            n = dims[0] * dims[1] * dims[2]
            payload = fh.read(4 * n)
            if len(payload) != 4 * n:
                raise CheckpointError(f"{path}: truncated SDF payload")
            values = np.frombuffer(payload, dtype="<f4").reshape(dims)
        return cls(origin, spacing, values)


def build_sdf_grid(env: Environment, lo, hi, dims=(64, 64, 64)) -> SdfGrid:
    """Sample the analytic environment SDF on a regular grid."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    dims = np.asarray(dims, dtype=int)
    spacing = (hi - lo) / (dims - 1)
    axes = [np.linspace(lo[i], hi[i], dims[i]) for i in range(3)]
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    pts = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])
    vals = env.sdf(pts).reshape(dims).astype(np.float32)
    return SdfGrid(lo, spacing, vals)


# ---------------------------------------------------------------------------
# Inverse kinematics


def ik_solve(
    chain: KinematicChain,
    target: np.ndarray,
    seed,
    tol: float = 1e-6,
    max_iters: int = 200,
    rot_weight: float = 0.5,
    damping: float = 0.05,
    return_info: bool = False,
):
    """Damped-least-squares IK toward a rigid target pose.

    The pose error is ||dt|| + rot_weight * angle(dR); success requires it to
    drop below tol. On failure an IKFailureError carrying the best iterate is
    raised. Iterates are clamped to joint limits (flagged in info).
    """
    if tol <= 0:
        raise ContractViolationError("ik tol must be > 0")
    target = np.asarray(target, dtype=float)
    q = np.asarray(seed, dtype=float).reshape(-1).copy()
    lims = chain.joint_limits
    clamped = False

    def pose_error(qv):
        T = chain.end_effector_pose(qv)
        dt = target[:3, 3] - T[:3, 3]
        w = geometry.rotation_log(target[:3, :3] @ T[:3, :3].T)
        angle = np.linalg.norm(w)
        return dt, w, float(np.linalg.norm(dt) + rot_weight * angle)

    best_q, best_err = q.copy(), np.inf
    err = np.inf
    for it in range(max_iters):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            dt, w, err = pose_error(q)
        if err < best_err:
            best_q, best_err = q.copy(), err
        if err <= tol:
            info = {"iterations": it, "error": err, "clamped": clamped}
            return (q, info) if return_info else q
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            J = chain.jacobian(q)
        e6 = np.concatenate([dt, rot_weight * w])
        Jw = J.copy()
        Jw[3:] *= rot_weight
        A = Jw @ Jw.T + (damping ** 2) * np.eye(6)
        dq = Jw.T @ np.linalg.solve(A, e6)
        step = np.linalg.norm(dq)
        if step > 0.5:
            dq *= 0.5 / step
        q = q + dq
        q_clamped = np.clip(q, lims[:, 0], lims[:, 1])
        if not np.array_equal(q_clamped, q):
            clamped = True
            q = q_clamped
    raise IKFailureError(
        f"IK did not converge: error {best_err:.3e} > tol {tol:.1e}",
        best_q=best_q,
        best_error=best_err,
    )
