"""Implicit constraint manifolds: residuals, distances, projections, tangent ops.

A constraint manifold is the zero set {q : f(q) = 0} of a residual function
f: R^m -> R^k. Everything here is a pure function of immutable inputs and is
safe to call concurrently.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from . import geometry
from .errors import ContractViolationError, ProjectionFailureError


def as_config(q, m: Optional[int] = None) -> np.ndarray:
    """Validate and return a configuration as a float vector."""
    q = np.asarray(q, dtype=float).reshape(-1)
    if m is not None and q.shape[0] != m:
        raise ContractViolationError(
            f"configuration has length {q.shape[0]}, expected {m}"
        )
    if not np.all(np.isfinite(q)):
        raise ContractViolationError("configuration has non-finite entries")
    return q


def finite_difference_jacobian(
    fn: Callable[[np.ndarray], np.ndarray], q: np.ndarray, step: float = 1e-6
) -> np.ndarray:
    """Central-difference Jacobian of fn at q, one column per coordinate."""
    q = np.asarray(q, dtype=float)
    f0 = np.atleast_1d(fn(q))
    J = np.zeros((f0.shape[0], q.shape[0]))
    for i in range(q.shape[0]):
        dq = np.zeros_like(q)
        dq[i] = step
        J[:, i] = (np.atleast_1d(fn(q + dq)) - np.atleast_1d(fn(q - dq))) / (2 * step)
    return J


class ConstraintSpec:
    """Implicit kinematic constraint f(q) = 0 with residual and Jacobian.

    Parameters
    ----------
    dimension : ambient C-space dimension m.
    codimension : residual dimension k.
    residual_fn : maps a length-m configuration to a length-k residual.
    jacobian_fn : maps a configuration to the k x m Jacobian of the residual.
        When omitted, a central finite-difference Jacobian is used.
    delta : on-manifold acceptance threshold (strictly positive).
    """

    def __init__(
        self,
        dimension: int,
        codimension: int,
        residual_fn: Callable[[np.ndarray], np.ndarray],
        jacobian_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None,
        delta: float = 0.05,
        name: str = "constraint",
    ):
        if delta <= 0:
            raise ContractViolationError("delta must be > 0")
        self.dimension = int(dimension)
        self.codimension = int(codimension)
        self._residual_fn = residual_fn
        self._jacobian_fn = jacobian_fn
        self.delta = float(delta)
        self.name = name

    def residual(self, q) -> np.ndarray:
        q = as_config(q, self.dimension)
        r = np.atleast_1d(np.asarray(self._residual_fn(q), dtype=float))
        if r.shape[0] != self.codimension:
            raise ContractViolationError(
                f"residual has length {r.shape[0]}, expected {self.codimension}"
            )
        return r

    def jacobian(self, q) -> np.ndarray:
        q = as_config(q, self.dimension)
        if self._jacobian_fn is not None:
            J = np.asarray(self._jacobian_fn(q), dtype=float)
        else:
            J = finite_difference_jacobian(self._residual_fn, q)
        return J.reshape(self.codimension, self.dimension)

    def residual_batch(self, Q: np.ndarray) -> np.ndarray:
        """Residuals for a stack of configurations, shape (B, k).

        Subclasses override where a vectorized evaluation exists; the
        fallback loops.
        """
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        return np.stack([self.residual(q) for q in Q])

    def is_on_manifold(self, q, tol: Optional[float] = None) -> bool:
        tol = self.delta if tol is None else tol
        return manifold_distance(self, q) <= tol

    def project(self, q, tol: float = 1e-8, max_iters: int = 100) -> np.ndarray:
        """Damped Gauss-Newton projection; subclasses may override."""
        return _gauss_newton_project(self, q, tol, max_iters)


def residual(spec: ConstraintSpec, q) -> np.ndarray:
    """Constraint residual f(q), length k."""
    return spec.residual(q)


def manifold_distance(spec: ConstraintSpec, q) -> float:
    """Euclidean norm of the residual; zero iff q is on the manifold."""
    return float(np.linalg.norm(spec.residual(q)))


def manifold_distance_batch(spec: ConstraintSpec, Q: np.ndarray) -> np.ndarray:
    return np.linalg.norm(spec.residual_batch(Q), axis=1)


def _gauss_newton_project(
    spec: ConstraintSpec, q, tol: float, max_iters: int, damping: float = 1e-6
) -> np.ndarray:
    if tol <= 0:
        raise ContractViolationError("projection tol must be > 0")
    q = as_config(q, spec.dimension)
    r = spec.residual(q)
    rnorm = np.linalg.norm(r)
    for _ in range(max_iters):
        if rnorm <= tol:
            return q
        J = spec.jacobian(q)
        JJt = J @ J.T + damping * np.eye(spec.codimension)
        dq = -J.T @ np.linalg.solve(JJt, r)
        # Halve the step while the residual norm fails to decrease.
        alpha = 1.0
        while alpha > 1e-8:
            q_new = q + alpha * dq
            r_new = spec.residual(q_new)
            if np.linalg.norm(r_new) < rnorm:
                break
            alpha *= 0.5
        else:
            raise ProjectionFailureError(
                f"projection stalled at residual {rnorm:.3e}",
                last_iterate=q,
                residual_norm=float(rnorm),
            )
        q, r = q_new, r_new
        rnorm = np.linalg.norm(r)
    if rnorm <= tol:
        return q
    raise ProjectionFailureError(
        f"projection did not reach tol {tol:.1e} in {max_iters} iters "
        f"(residual {rnorm:.3e})",
        last_iterate=q,
        residual_norm=float(rnorm),
    )


def project_to_manifold(
    spec: ConstraintSpec, q, tol: float = 1e-8, max_iters: int = 100
) -> np.ndarray:
    """Locally project q onto the manifold so that ||f(q')|| <= tol."""
    return spec.project(q, tol=tol, max_iters=max_iters)


def tangent_project(spec: ConstraintSpec, q, v, sv_cutoff: float = 1e-8) -> np.ndarray:
    """Remove the component of v lying in the row space of the Jacobian at q.

    Jacobian rows are orthonormalized by SVD; singular values below
    sv_cutoff * sigma_max are treated as zero so rank-deficient points
    degrade gracefully. If every row is null, v is returned unchanged.
    """
    q = as_config(q, spec.dimension)
    v = np.asarray(v, dtype=float).reshape(-1)
    if v.shape[0] != spec.dimension:
        raise ContractViolationError("vector length does not match dimension")
    J = spec.jacobian(q)
    _, s, Vt = np.linalg.svd(J, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return v.copy()
    rows = Vt[s > sv_cutoff * s[0]]
    if rows.shape[0] == 0:
        return v.copy()
    return v - rows.T @ (rows @ v)


def check_jacobian(
    spec: ConstraintSpec, q, rel_tol: float = 1e-4, step_scale: float = 1e-5
) -> bool:
    """Verify jacobian against central finite differences of the residual."""
    q = as_config(q, spec.dimension)
    scale = max(1.0, float(np.max(np.abs(q))))
    J = spec.jacobian(q)
    J_fd = finite_difference_jacobian(spec.residual, q, step=step_scale * scale)
    denom = max(np.max(np.abs(J_fd)), 1e-12)
    return bool(np.max(np.abs(J - J_fd)) / denom <= rel_tol)


# ---------------------------------------------------------------------------
# Analytic constraint factories


def plane_constraint(dimension: int, axis: int = -1, offset: float = 0.0,
                     delta: float = 0.05) -> ConstraintSpec:
    """Hyperplane q[axis] = offset."""
    axis = axis % dimension

    def res(q):
        return np.array([q[axis] - offset])

    def jac(q):
        J = np.zeros((1, dimension))
        J[0, axis] = 1.0
        return J

    spec = ConstraintSpec(dimension, 1, res, jac, delta=delta, name="plane")
    spec.residual_batch = lambda Q: (np.atleast_2d(Q)[:, axis] - offset)[:, None]
    return spec


def affine_constraint(A: np.ndarray, b: np.ndarray, delta: float = 0.05) -> ConstraintSpec:
    """Linear constraint A q = b."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))

    spec = ConstraintSpec(
        A.shape[1], A.shape[0],
        lambda q: A @ q - b,
        lambda q: A,
        delta=delta, name="affine",
    )
    spec.residual_batch = lambda Q: np.atleast_2d(Q) @ A.T - b
    return spec


def sphere_constraint(dimension: int = 3, center=None, radius: float = 1.0,
                      delta: float = 0.05) -> ConstraintSpec:
    """Sphere ||q - center|| = radius; residual is the radial offset."""
    c = np.zeros(dimension) if center is None else np.asarray(center, dtype=float)

    def res(q):
        return np.array([np.linalg.norm(q - c) - radius])

    def jac(q):
        d = q - c
        n = np.linalg.norm(d)
        if n < 1e-12:
            return np.zeros((1, dimension))
        return (d / n).reshape(1, dimension)

    spec = ConstraintSpec(dimension, 1, res, jac, delta=delta, name="sphere")

    # Radial projection is exact; skip Gauss-Newton.
    def project(q, tol=1e-8, max_iters=100):
        q = as_config(q, dimension)
        d = q - c
        n = np.linalg.norm(d)
        if n < 1e-12:
            raise ProjectionFailureError(
                "sphere projection undefined at the center",
                last_iterate=q, residual_norm=radius,
            )
        return c + d * (radius / n)

    spec.project = project
    spec.residual_batch = lambda Q: (
        np.linalg.norm(np.atleast_2d(Q) - c, axis=1) - radius
    )[:, None]
    return spec


def paraboloid_constraint(curvature: float = 1.0, delta: float = 0.05) -> ConstraintSpec:
    """Surface z = curvature * (x^2 + y^2) in 3D."""

    def res(q):
        return np.array([q[2] - curvature * (q[0] ** 2 + q[1] ** 2)])

    def jac(q):
        return np.array([[-2 * curvature * q[0], -2 * curvature * q[1], 1.0]])

    spec = ConstraintSpec(3, 1, res, jac, delta=delta, name="paraboloid")
    spec.residual_batch = lambda Q: (
        np.atleast_2d(Q)[:, 2]
        - curvature * (np.atleast_2d(Q)[:, 0] ** 2 + np.atleast_2d(Q)[:, 1] ** 2)
    )[:, None]
    return spec


def cylinder_constraint(radius: float = 1.0, delta: float = 0.05) -> ConstraintSpec:
    """Cylinder sqrt(x^2 + y^2) = radius about the z axis in 3D."""

    def res(q):
        return np.array([np.hypot(q[0], q[1]) - radius])

    def jac(q):
        r = np.hypot(q[0], q[1])
        if r < 1e-12:
            return np.zeros((1, 3))
        return np.array([[q[0] / r, q[1] / r, 0.0]])

    spec = ConstraintSpec(3, 1, res, jac, delta=delta, name="cylinder")
    spec.residual_batch = lambda Q: (
        np.hypot(np.atleast_2d(Q)[:, 0], np.atleast_2d(Q)[:, 1]) - radius
    )[:, None]
    return spec


# ---------------------------------------------------------------------------
# Mesh surface constraint


class MeshSurfaceConstraint(ConstraintSpec):
    """Constraint manifold given by a triangle-mesh surface in 3D.

    The residual is the distance to the surface: signed when the mesh is
    watertight, unsigned otherwise (open meshes are flagged). The Jacobian
    row is the unit direction of increasing distance; exactly on the surface
    it degrades to the local pseudonormal.
    """

    def __init__(self, mesh, delta: float = 0.05, name: str = "mesh_surface"):
        self.mesh = mesh
        mesh.warn_degenerate()
        self.signed = bool(mesh.watertight)
        super().__init__(
            dimension=3,
            codimension=1,
            residual_fn=self._distance_residual,
            jacobian_fn=self._distance_jacobian,
            delta=delta,
            name=name,
        )

    def _distance_residual(self, q):
        d = self.mesh.signed_distance(q) if self.signed else self.mesh.unsigned_distance(q)
        return np.array([d])

    def _distance_jacobian(self, q):
        d, closest, fid = self.mesh.closest_point(q)
        if d > 1e-9:
            g = (q - closest) / d
            if self.signed and self.mesh.signed_distance(q) < 0:
                g = -g
        else:
            g = self.mesh.surface_normal(q)
        return g.reshape(1, 3)

    def project(self, q, tol: float = 1e-8, max_iters: int = 100) -> np.ndarray:
        # Closest-point projection is exact for a mesh surface.
        _, closest, _ = self.mesh.closest_point(as_config(q, 3))
        return closest


# ---------------------------------------------------------------------------
# Task-space-region constraint for kinematic chains


class TSRConstraint(ConstraintSpec):
    """Task space region: constrains selected end-effector pose coordinates.

    The end-effector pose is expressed in the region frame w via
    T0w^-1 * T_ee(q) * Twe^-1 and converted to a 6-vector
    [x, y, z, roll, pitch, yaw] (intrinsic XYZ Euler). The residual selects
    the coordinates of that vector constrained to zero. Bw stores per
    coordinate [lo, hi] ranges used when sampling poses for the free
    coordinates; acceptance of a configuration is governed purely by the
    delta ball on the residual norm.
    """

    POSE_COORDS = ("x", "y", "z", "roll", "pitch", "yaw")

    def __init__(
        self,
        chain,
        T0w: np.ndarray,
        Twe: np.ndarray,
        Bw: np.ndarray,
        constraint_selector: Sequence[int],
        delta: float = 0.05,
        name: str = "tsr",
    ):
        T0w = np.asarray(T0w, dtype=float)
        Twe = np.asarray(Twe, dtype=float)
        if not geometry.is_rigid(T0w) or not geometry.is_rigid(Twe):
            raise ContractViolationError("T0w and Twe must be rigid transforms")
        Bw = np.asarray(Bw, dtype=float)
        if Bw.shape != (6, 2):
            raise ContractViolationError("Bw must be a 6x2 bound matrix")
        if np.any(Bw[:, 0] > Bw[:, 1]):
            raise ContractViolationError("Bw rows must satisfy lo <= hi")
        selector = sorted(int(i) for i in constraint_selector)
        if any(i < 0 or i > 5 for i in selector):
            raise ContractViolationError("selector indices must be in 0..5")

        self.chain = chain
        self.T0w = T0w
        self.Twe = Twe
        self.Bw = Bw
        self.selector = selector
        self._inv_T0w = geometry.inverse(T0w)
        self._inv_Twe = geometry.inverse(Twe)

        super().__init__(
            dimension=chain.dof,
            codimension=len(selector),
            residual_fn=self._tsr_residual,
            jacobian_fn=None,  # central finite differences of the pose map
            delta=delta,
            name=name,
        )

    def pose_in_region_frame(self, q) -> np.ndarray:
        T0e = self.chain.end_effector_pose(q)
        return self._inv_T0w @ T0e @ self._inv_Twe

    def pose_coordinates(self, q) -> np.ndarray:
        return geometry.pose_vector(self.pose_in_region_frame(q))

    def _tsr_residual(self, q):
        return self.pose_coordinates(q)[self.selector]

    def residual_batch(self, Q: np.ndarray) -> np.ndarray:
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        frames = self.chain.link_transforms_batch(Q)
        Tw = np.einsum(
            "ij,bjk,kl->bil", self._inv_T0w, frames[:, -1], self._inv_Twe
        )
        out = np.empty((Q.shape[0], self.codimension))
        for b in range(Q.shape[0]):
            out[b] = geometry.pose_vector(Tw[b])[self.selector]
        return out

    def sample_region_pose(self, rng: np.random.Generator) -> np.ndarray:
        """World end-effector pose with free coordinates drawn inside Bw."""
        vec = np.zeros(6)
        for i in range(6):
            if i in self.selector:
                continue
            lo, hi = self.Bw[i]
            vec[i] = rng.uniform(lo, hi) if hi > lo else lo
        return self.T0w @ geometry.pose_matrix(vec) @ self.Twe
