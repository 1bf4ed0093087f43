"""Independent ground-truth solvers used to judge learned paths.

- Fast marching on triangle meshes (first-arrival times under a speed field)
  with virtual-support unfolding at obtuse corners.
- A k-NN graph over on-manifold samples solved exactly by Dijkstra.
- A projection-based bidirectional RRT baseline.
"""

from __future__ import annotations

import heapq
import time
import warnings
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra as _sp_dijkstra
from scipy.spatial import cKDTree

from . import kinematics, manifolds
from .errors import ContractViolationError, NoPathError
from .meshes import TriangleMesh
from .planning import PathResult, path_length
from .speed import SpeedModel

# ---------------------------------------------------------------------------
# Fast marching on triangle meshes


def _bary_gradients(A, B, C):
    """In-plane gradients of the barycentric coordinates of B and C."""
    e = C - A
    w = B - A
    hB = w - e * (np.dot(w, e) / np.dot(e, e))
    e2 = B - A
    w2 = C - A
    hC = w2 - e2 * (np.dot(w2, e2) / np.dot(e2, e2))
    nB = np.dot(hB, hB)
    nC = np.dot(hC, hC)
    if nB < 1e-300 or nC < 1e-300:
        return None, None
    return hB / nB, hC / nC


def _two_point_update(pa, pb, pc, ta, tb, inv_speed):
    """Arrival at C from a planar front consistent with values at A and B.

    Returns None when no causal two-point solution exists (the caller falls
    back to one-point edge updates).
    """
    gB, gC = _bary_gradients(pa, pb, pc)
    if gB is None:
        return None
    u = tb - ta
    a = np.dot(gC, gC)
    b = 2.0 * u * np.dot(gB, gC)
    c = u * u * np.dot(gB, gB) - inv_speed * inv_speed
    disc = b * b - 4.0 * a * c
    if disc < 0.0:
        return None
    s = (-b + np.sqrt(disc)) / (2.0 * a)
    t = ta + s
    if t < max(ta, tb) - 1e-15:
        return None
    # The characteristic must come from inside the triangle: -grad decomposes
    # on (A - C, B - C) with nonnegative coefficients.
    g = u * gB + s * gC
    M = np.column_stack([pa - pc, pb - pc])
    coeffs, *_ = np.linalg.lstsq(M, -g, rcond=None)
    if coeffs[0] < -1e-9 or coeffs[1] < -1e-9:
        return None
    return t


def _unfold_apex(L2, R2, dL, dR):
    """2D position of the far-side apex given distances to both edge ends."""
    e = R2 - L2
    d2 = np.dot(e, e)
    if d2 < 1e-300:
        return None
    x = (d2 + dL * dL - dR * dR) / (2.0 * d2)
    h2 = dL * dL - x * x * d2
    if h2 < 0:
        h2 = 0.0
    h = np.sqrt(h2)
    n = np.array([e[1], -e[0]]) / np.sqrt(d2)
    # Two candidates on either side of LR; pick the one below the u-side.
    p1 = L2 + x * e + h * n
    p2 = L2 + x * e - h * n
    return p1 if p1[1] < p2[1] else p2


class FmmSolver:
    """Reusable fast-marching structure for one mesh."""

    MAX_UNFOLD = 32

    def __init__(self, mesh: TriangleMesh):
        self.mesh = mesh
        mesh.warn_degenerate()
        n = len(mesh.vertices)
        self.neighbors: List[set] = [set() for _ in range(n)]
        for (i, j, k) in mesh.faces:
            self.neighbors[i].update((j, k))
            self.neighbors[j].update((i, k))
            self.neighbors[k].update((i, j))
        self.neighbors = [np.array(sorted(s), dtype=np.int64) for s in self.neighbors]

        # Faces adjacent to each undirected edge (for unfolding).
        self._edge_faces = {}
        for fi, (i, j, k) in enumerate(mesh.faces):
            for e in ((i, j), (j, k), (k, i)):
                key = (min(e), max(e))
                self._edge_faces.setdefault(key, []).append(fi)

        self.supports: List[List[Tuple]] = [[] for _ in range(n)]
        self.trigger: List[List[Tuple[int, int]]] = [[] for _ in range(n)]
        n_obtuse = 0
        n_unresolved = 0
        V = mesh.vertices
        for fi, face in enumerate(mesh.faces):
            if mesh.face_areas[fi] <= 1e-14:
                continue  # degenerate faces keep edge updates only
            for c in range(3):
                u = face[c]
                ia, ib = face[(c + 1) % 3], face[(c + 2) % 3]
                va = V[ia] - V[u]
                vb = V[ib] - V[u]
                cosang = np.dot(va, vb) / (np.linalg.norm(va) * np.linalg.norm(vb))
                if cosang >= -1e-12:
                    self._add_support(u, ia, ib, V[ia], V[ib], V[u])
                else:
                    n_obtuse += 1
                    if not self._add_unfolded_supports(fi, u, ia, ib):
                        n_unresolved += 1
                        self._add_support(u, ia, ib, V[ia], V[ib], V[u])
        if n_unresolved:
            warnings.warn(
                f"{n_unresolved}/{n_obtuse} obtuse corners could not be "
                "unfolded; falling back to edge updates there",
                stacklevel=2,
            )

    def _add_support(self, u, ia, ib, pa, pb, pu):
        self.supports[u].append((int(ia), int(ib), np.asarray(pa, dtype=float),
                                 np.asarray(pb, dtype=float),
                                 np.asarray(pu, dtype=float)))
        si = len(self.supports[u]) - 1
        self.trigger[ia].append((u, si))
        self.trigger[ib].append((u, si))

    def _add_unfolded_supports(self, fi, u, ia, ib) -> bool:
        """Split the obtuse corner at u by unfolding across the opposite edge."""
        V = self.mesh.vertices
        va = V[ia] - V[u]
        vb = V[ib] - V[u]
        # Local 2D frame: u at origin, A on +x, B in the upper half plane.
        e1 = va / np.linalg.norm(va)
        b_perp = vb - e1 * np.dot(vb, e1)
        nb = np.linalg.norm(b_perp)
        if nb < 1e-14:
            return False
        e2 = b_perp / nb
        A2 = np.array([np.linalg.norm(va), 0.0])
        B2 = np.array([np.dot(vb, e1), np.dot(vb, e2)])
        L_id, R_id = ia, ib
        L2, R2 = A2, B2
        cur_face = fi
        for _ in range(self.MAX_UNFOLD):
            key = (min(L_id, R_id), max(L_id, R_id))
            faces = self._edge_faces.get(key, [])
            nxt = [f for f in faces if f != cur_face]
            if not nxt:
                return False
            nxt_face = nxt[0]
            tri = list(self.mesh.faces[nxt_face])
            d_id = [v for v in tri if v != L_id and v != R_id]
            if len(d_id) != 1:
                return False
            d_id = d_id[0]
            dL = np.linalg.norm(V[d_id] - V[L_id])
            dR = np.linalg.norm(V[d_id] - V[R_id])
            D2 = _unfold_apex(L2, R2, dL, dR)
            if D2 is None:
                return False
            # D2 must sit on the far side of edge LR, i.e. above the u level.
            if D2[1] <= 0:
                D2[1] = max(D2[1], 1e-12)
            dotA = np.dot(D2, A2)
            dotB = np.dot(D2, B2)
            if dotA >= 0 and dotB >= 0:
                u2 = np.zeros(2)
                self._add_support(u, ia, d_id, A2, D2, u2)
                self._add_support(u, d_id, ib, D2, B2, u2)
                return True
            if dotA < 0:
                # Split direction is on the A side; continue across (L, D).
                R_id, R2 = d_id, D2
            else:
                L_id, L2 = d_id, D2
            cur_face = nxt_face
        return False

    def solve(self, speed_per_vertex, source_vertex: int) -> "FmmSolution":
        speeds = np.asarray(speed_per_vertex, dtype=float)
        if speeds.ndim == 0:
            speeds = np.full(len(self.mesh.vertices), float(speeds))
        if np.any(speeds <= 0):
            raise ContractViolationError("speeds must be > 0")
        n = len(self.mesh.vertices)
        V = self.mesh.vertices
        T = np.full(n, np.inf)
        frozen = np.zeros(n, dtype=bool)
        T[source_vertex] = 0.0
        heap = [(0.0, int(source_vertex))]
        inv_speed = 1.0 / speeds

        while heap:
            t, v = heapq.heappop(heap)
            if frozen[v]:
                continue
            frozen[v] = True
            for u in self.neighbors[v]:
                if frozen[u]:
                    continue
                cand = t + np.linalg.norm(V[u] - V[v]) * inv_speed[u]
                if cand < T[u]:
                    T[u] = cand
                    heapq.heappush(heap, (cand, int(u)))
            for (u, si) in self.trigger[v]:
                if frozen[u]:
                    continue
                ia, ib, pa, pb, pu = self.supports[u][si]
                if not (frozen[ia] and frozen[ib]):
                    continue
                cand = _two_point_update(pa, pb, pu, T[ia], T[ib], inv_speed[u])
                if cand is not None and cand < T[u]:
                    T[u] = cand
                    heapq.heappush(heap, (float(cand), int(u)))
        return FmmSolution(self.mesh, self.neighbors, T, int(source_vertex))


@dataclass
class FmmSolution:
    mesh: TriangleMesh
    neighbors: list
    distances: np.ndarray
    source: int

    def distance(self, target: int) -> float:
        return float(self.distances[target])

    def backtrack(self, target: int) -> np.ndarray:
        """Vertex-index path from source to target by steepest arrival descent."""
        if not np.isfinite(self.distances[target]):
            raise NoPathError(f"vertex {target} is unreachable from the source")
        path = [int(target)]
        cur = int(target)
        while self.distances[cur] > 0.0:
            nbrs = self.neighbors[cur]
            nxt = int(nbrs[np.argmin(self.distances[nbrs])])
            if self.distances[nxt] >= self.distances[cur]:
                break
            path.append(nxt)
            cur = nxt
        return np.array(path[::-1], dtype=np.int64)

    def path_points(self, target: int) -> np.ndarray:
        return self.mesh.vertices[self.backtrack(target)]

    def path_result(self, target: int) -> PathResult:
        pts = self.path_points(target)
        return PathResult(
            waypoints=pts, success=True, plan_time=0.0,
            length=path_length(pts),
            margin_profile=np.zeros(len(pts)), min_clearance=np.inf,
            converged=True, method="fmm",
        )


def fmm_geodesic(
    mesh: TriangleMesh, speed_per_vertex, source_vertex: int
) -> FmmSolution:
    """First-arrival times from a source vertex under a per-vertex speed."""
    solver = getattr(mesh, "_fmm_solver", None)
    if solver is None:
        solver = FmmSolver(mesh)
        mesh._fmm_solver = solver
    return solver.solve(speed_per_vertex, source_vertex)


# ---------------------------------------------------------------------------
# Dense-graph shortest paths over on-manifold samples


@dataclass
class ManifoldGraph:
    nodes: np.ndarray
    k: int
    lengths: csr_matrix            # symmetric edge lengths in C-space units
    times: csr_matrix              # lengths / mean endpoint expert speed
    isolated: np.ndarray
    tree: cKDTree

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def nearest_node(self, q, require_connected: bool = True) -> int:
        q = np.asarray(q, dtype=float)
        if require_connected and np.any(~self.isolated):
            ok = np.flatnonzero(~self.isolated)
            d = np.linalg.norm(self.nodes[ok] - q, axis=1)
            return int(ok[np.argmin(d)])
        return int(self.tree.query(q)[1])


def build_manifold_graph(
    nodes: np.ndarray,
    speed_model: SpeedModel,
    k: int = 12,
    validate_edges: bool = True,
) -> ManifoldGraph:
    """k-NN graph with edges rejected when the chord midpoint leaves the band
    or penetrates an obstacle."""
    nodes = np.asarray(nodes, dtype=float)
    n = len(nodes)
    if n < 2:
        raise ContractViolationError("graph needs at least two nodes")
    tree = cKDTree(nodes)
    kk = min(k + 1, n)
    _, idx = tree.query(nodes, k=kk)
    pairs = set()
    for i in range(n):
        for j in idx[i, 1:]:
            j = int(j)
            pairs.add((min(i, j), max(i, j)))
    pairs = np.array(sorted(pairs), dtype=np.int64)

    if validate_edges and len(pairs):
        mids = (nodes[pairs[:, 0]] + nodes[pairs[:, 1]]) / 2.0
        d_m = manifolds.manifold_distance_batch(speed_model.spec, mids)
        clear = kinematics.clearance_batch(speed_model.robot, speed_model.env, mids)
        keep = (d_m <= speed_model.spec.delta) & (clear >= 0.0)
        pairs = pairs[keep]

    speeds = speed_model.expert_speed_batch(nodes)
    i, j = pairs[:, 0], pairs[:, 1]
    lengths = np.linalg.norm(nodes[i] - nodes[j], axis=1)
    mean_speed = (speeds[i] + speeds[j]) / 2.0
    times = lengths / np.maximum(mean_speed, 1e-12)

    def sym(vals):
        M = csr_matrix((np.concatenate([vals, vals]),
                        (np.concatenate([i, j]), np.concatenate([j, i]))),
                       shape=(n, n))
        return M

    Ml = sym(lengths)
    Mt = sym(times)
    degree = np.asarray((Ml > 0).sum(axis=1)).ravel()
    isolated = degree == 0
    if np.any(isolated):
        warnings.warn(f"{int(isolated.sum())} isolated graph nodes", stacklevel=2)
    return ManifoldGraph(nodes, k, Ml, Mt, isolated, tree)


def dijkstra_path(
    graph: ManifoldGraph, a: int, b: int, weight: str = "length"
) -> Tuple[np.ndarray, float]:
    """Exact shortest path between node indices; returns (indices, C-space length)."""
    M = graph.lengths if weight == "length" else graph.times
    dist, pred = _sp_dijkstra(
        M, directed=False, indices=a, return_predecessors=True
    )
    if not np.isfinite(dist[b]):
        raise NoPathError(f"nodes {a} and {b} are disconnected")
    path = [b]
    while path[-1] != a:
        p = pred[path[-1]]
        if p < 0:
            raise NoPathError("predecessor chain broke during reconstruction")
        path.append(int(p))
    idx = np.array(path[::-1], dtype=np.int64)
    length = path_length(graph.nodes[idx])
    return idx, length


def oracle_path_between(
    graph: ManifoldGraph, qa, qb, weight: str = "length"
) -> Tuple[np.ndarray, float]:
    """Shortest graph path between arbitrary configurations, snapped to the
    nearest connected nodes; the snap gaps are included in the length."""
    qa = np.asarray(qa, dtype=float)
    qb = np.asarray(qb, dtype=float)
    a = graph.nearest_node(qa)
    b = graph.nearest_node(qb)
    idx, length = dijkstra_path(graph, a, b, weight=weight)
    pts = np.concatenate([qa[None], graph.nodes[idx], qb[None]], axis=0)
    return pts, path_length(pts)


# ---------------------------------------------------------------------------
# Projection-based bidirectional RRT baseline


@dataclass
class RRTConfig:
    step: float = 0.1
    max_iters: int = 2000
    seed: int = 0
    projection_tol: float = 1e-6
    projection_iters: int = 50
    clearance_min: float = 0.0
    check_resolution: float = 0.0   # 0 -> step / 2

    def __post_init__(self):
        if self.step <= 0 or self.max_iters < 1:
            raise ContractViolationError("step must be > 0 and max_iters >= 1")
        if self.check_resolution == 0.0:
            self.check_resolution = self.step / 2.0


class _Tree:
    def __init__(self, root: np.ndarray):
        self.nodes = [np.asarray(root, dtype=float)]
        self.parents = [-1]

    def nearest(self, q: np.ndarray) -> int:
        d = np.linalg.norm(np.stack(self.nodes) - q, axis=1)
        return int(np.argmin(d))

    def add(self, q: np.ndarray, parent: int) -> int:
        self.nodes.append(q)
        self.parents.append(parent)
        return len(self.nodes) - 1

    def branch(self, i: int) -> List[np.ndarray]:
        out = []
        while i >= 0:
            out.append(self.nodes[i])
            i = self.parents[i]
        return out[::-1]


def cbirrt_lite(
    spec: manifolds.ConstraintSpec,
    robot,
    env: kinematics.Environment,
    q0,
    qT,
    lo,
    hi,
    cfg: Optional[RRTConfig] = None,
) -> PathResult:
    """Bidirectional RRT whose every extension is projected to the manifold.

    New nodes must satisfy the projection tolerance on the residual and the
    clearance threshold; connecting segments are checked at
    check_resolution. Returns the first path found (no optimality).
    """
    cfg = cfg or RRTConfig()
    rng = np.random.default_rng(cfg.seed)
    q0 = np.asarray(q0, dtype=float)
    qT = np.asarray(qT, dtype=float)
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    t_start = time.perf_counter()

    def finish(waypoints, success):
        w = np.atleast_2d(np.stack(waypoints))
        return PathResult(
            waypoints=w,
            success=success,
            plan_time=time.perf_counter() - t_start,
            length=path_length(w),
            margin_profile=manifolds.manifold_distance_batch(spec, w),
            min_clearance=float(
                kinematics.clearance_batch(robot, env, w).min()
            ),
            converged=success,
            method="cbirrt",
        )

    if np.linalg.norm(q0 - qT) <= cfg.step:
        if _segment_ok(spec, robot, env, q0, qT, cfg):
            return finish([q0] if np.allclose(q0, qT) else [q0, qT], True)

    ta, tb = _Tree(q0), _Tree(qT)
    for _ in range(cfg.max_iters):
        q_rand = rng.uniform(lo, hi)
        new_a = _extend(ta, q_rand, spec, robot, env, lo, hi, cfg)
        if new_a is not None:
            # Greedily grow the other tree toward the fresh node.
            target = ta.nodes[new_a]
            last = None
            while True:
                new_b = _extend(tb, target, spec, robot, env, lo, hi, cfg)
                if new_b is None:
                    break
                last = new_b
                gap = np.linalg.norm(tb.nodes[new_b] - target)
                if gap <= cfg.step:
                    if _segment_ok(spec, robot, env, tb.nodes[new_b], target, cfg):
                        branch_a = ta.branch(new_a)
                        branch_b = tb.branch(new_b)
                        path = branch_a + branch_b[::-1]
                        ordered = path if np.allclose(path[0], q0) else path[::-1]
                        return finish(ordered, True)
                    break
        ta, tb = tb, ta
    return finish([q0, qT], False)


def _extend(tree, q_target, spec, robot, env, lo, hi, cfg: RRTConfig):
    near = tree.nearest(q_target)
    q_near = tree.nodes[near]
    d = q_target - q_near
    dist = np.linalg.norm(d)
    if dist < 1e-12:
        return None
    q_new = q_near + d * min(1.0, cfg.step / dist)
    try:
        q_new = manifolds.project_to_manifold(
            spec, np.clip(q_new, lo, hi),
            tol=cfg.projection_tol, max_iters=cfg.projection_iters,
        )
    except Exception:
        return None
    if np.any(q_new < lo) or np.any(q_new > hi):
        return None
    if kinematics.clearance(robot, env, q_new) < cfg.clearance_min:
        return None
    if not _segment_ok(spec, robot, env, q_near, q_new, cfg):
        return None
    return tree.add(q_new, near)


def _segment_ok(spec, robot, env, qa, qb, cfg: RRTConfig) -> bool:
    gap = np.linalg.norm(qb - qa)
    n_mid = int(np.ceil(gap / cfg.check_resolution)) - 1
    if n_mid <= 0:
        return True
    ts = np.linspace(0.0, 1.0, n_mid + 2)[1:-1]
    mids = qa[None, :] + ts[:, None] * (qb - qa)[None, :]
    clear = kinematics.clearance_batch(robot, env, mids)
    if np.any(clear < cfg.clearance_min):
        return False
    d_m = manifolds.manifold_distance_batch(spec, mids)
    return bool(np.all(d_m <= spec.delta))
