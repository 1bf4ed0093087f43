"""Triangle meshes: IO, closest-point queries, signed distance, sampling.

Closest-point queries are accelerated by a KD-tree over triangle centroids
with radius pruning, so distance evaluation stays fast on meshes with
thousands of faces.
"""

from __future__ import annotations

import warnings
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import ContractViolationError, MeshFormatError


def _closest_points_on_triangles(p, a, b, c):
    """Closest point to p on each triangle (a[i], b[i], c[i]).

    Vectorized over triangles; returns (points, squared distances).
    Region classification follows the standard barycentric case split.
    """
    ab = b - a
    ac = c - a
    ap = p - a

    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)

    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    out = np.empty_like(a)
    done = np.zeros(a.shape[0], dtype=bool)

    def assign(mask, pts):
        m = mask & ~done
        if np.any(m):
            out[m] = pts[m] if pts.shape == out.shape else pts
            done[m] = True

    assign((d1 <= 0) & (d2 <= 0), a)  # vertex region A
    assign((d3 >= 0) & (d4 <= d3), b)  # vertex region B
    assign((d6 >= 0) & (d5 <= d6), c)  # vertex region C

    # Edge AB
    m = (vc <= 0) & (d1 >= 0) & (d3 <= 0) & ~done
    if np.any(m):
        v = d1[m] / (d1[m] - d3[m])
        out[m] = a[m] + v[:, None] * ab[m]
        done[m] = True
    # Edge AC
    m = (vb <= 0) & (d2 >= 0) & (d6 <= 0) & ~done
    if np.any(m):
        w = d2[m] / (d2[m] - d6[m])
        out[m] = a[m] + w[:, None] * ac[m]
        done[m] = True
    # Edge BC
    m = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0) & ~done
    if np.any(m):
        w = (d4[m] - d3[m]) / ((d4[m] - d3[m]) + (d5[m] - d6[m]))
        out[m] = b[m] + w[:, None] * (c[m] - b[m])
        done[m] = True
    # Face interior
    m = ~done
    if np.any(m):
        denom = va[m] + vb[m] + vc[m]
        denom = np.where(np.abs(denom) < 1e-300, 1.0, denom)
        v = vb[m] / denom
        w = vc[m] / denom
        out[m] = a[m] + v[:, None] * ab[m] + w[:, None] * ac[m]

    d = p - out
    return out, np.einsum("ij,ij->i", d, d)


class TriangleMesh:
    """Indexed triangle mesh with cached acceleration structures."""

    def __init__(self, vertices, faces):
        self.vertices = np.asarray(vertices, dtype=float).reshape(-1, 3)
        self.faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (
            self.faces.min() < 0 or self.faces.max() >= len(self.vertices)
        ):
            raise MeshFormatError("face indices out of range")

        tri = self.vertices[self.faces]
        self._a, self._b, self._c = tri[:, 0], tri[:, 1], tri[:, 2]
        n = np.cross(self._b - self._a, self._c - self._a)
        self.face_areas = 0.5 * np.linalg.norm(n, axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            self.face_normals = np.where(
                self.face_areas[:, None] > 1e-14,
                n / (2.0 * self.face_areas[:, None] + 1e-300),
                0.0,
            )
        self.centroids = tri.mean(axis=1)
        self._tri_radius = np.linalg.norm(
            tri - self.centroids[:, None, :], axis=2
        ).max(axis=1)
        self._rmax = float(self._tri_radius.max()) if len(self.faces) else 0.0
        self._tree = cKDTree(self.centroids) if len(self.faces) else None

        self.watertight = self._check_watertight()
        self._vertex_normals = None
        self._edge_normals = None

    # -- basic properties ---------------------------------------------------

    @property
    def bbox(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    @property
    def bbox_diagonal(self) -> float:
        lo, hi = self.bbox
        return float(np.linalg.norm(hi - lo))

    @property
    def total_area(self) -> float:
        return float(self.face_areas.sum())

    def edge_lengths(self) -> np.ndarray:
        e = np.concatenate([
            self._b - self._a, self._c - self._b, self._a - self._c
        ])
        return np.linalg.norm(e, axis=1)

    def _check_watertight(self) -> bool:
        if len(self.faces) == 0:
            return False
        edges = np.concatenate([
            self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]
        ])
        key = np.sort(edges, axis=1)
        _, counts = np.unique(key, axis=0, return_counts=True)
        return bool(np.all(counts == 2))

    # -- pseudonormals (sign queries for watertight meshes) ------------------

    def _build_pseudonormals(self):
        vn = np.zeros_like(self.vertices)
        en = {}
        V, F = self.vertices, self.faces
        for fi in range(len(F)):
            i, j, k = F[fi]
            n = self.face_normals[fi]
            pts = V[[i, j, k]]
            for local, vid in enumerate((i, j, k)):
                e1 = pts[(local + 1) % 3] - pts[local]
                e2 = pts[(local + 2) % 3] - pts[local]
                cosang = np.dot(e1, e2) / (
                    np.linalg.norm(e1) * np.linalg.norm(e2) + 1e-300
                )
                vn[vid] += np.arccos(np.clip(cosang, -1.0, 1.0)) * n
            for e in ((i, j), (j, k), (k, i)):
                key = (min(e), max(e))
                en[key] = en.get(key, 0.0) + n
        self._vertex_normals = vn
        self._edge_normals = en

    def _pseudonormal(self, face_id: int, closest: np.ndarray) -> np.ndarray:
        """Angle-weighted pseudonormal of the feature containing the point."""
        if self._vertex_normals is None:
            self._build_pseudonormals()
        i, j, k = self.faces[face_id]
        a, b, c = self.vertices[i], self.vertices[j], self.vertices[k]
        # Barycentric coordinates of the closest point.
        T = np.column_stack([b - a, c - a])
        sol, *_ = np.linalg.lstsq(T, closest - a, rcond=None)
        v, w = sol
        u = 1.0 - v - w
        eps = 1e-6
        bary = np.array([u, v, w])
        on = bary > eps
        if on.sum() == 3:
            return self.face_normals[face_id]
        if on.sum() == 1:
            vid = [i, j, k][int(np.argmax(bary))]
            return self._vertex_normals[vid]
        pair = [[i, j, k][t] for t in range(3) if on[t]]
        key = (min(pair), max(pair))
        n = self._edge_normals.get(key)
        return self.face_normals[face_id] if n is None else n

    # -- distance queries -----------------------------------------------------

    def closest_point(self, p):
        """Closest surface point to p; returns (distance, point, face_id)."""
        p = np.asarray(p, dtype=float).reshape(3)
        _, i0 = self._tree.query(p)
        pts, d2 = _closest_points_on_triangles(
            p, self._a[i0:i0 + 1], self._b[i0:i0 + 1], self._c[i0:i0 + 1]
        )
        d_ub = float(np.sqrt(d2[0]))
        idx = self._tree.query_ball_point(p, d_ub + self._rmax + 1e-12)
        idx = np.asarray(idx, dtype=np.int64)
        cand_pts, cand_d2 = _closest_points_on_triangles(
            p, self._a[idx], self._b[idx], self._c[idx]
        )
        best = int(np.argmin(cand_d2))
        return float(np.sqrt(cand_d2[best])), cand_pts[best], int(idx[best])

    def unsigned_distance(self, p) -> float:
        return self.closest_point(p)[0]

    def signed_distance(self, p) -> float:
        """Signed distance (negative inside). Requires a watertight mesh."""
        d, closest, fid = self.closest_point(np.asarray(p, dtype=float))
        if not self.watertight:
            return d
        n = self._pseudonormal(fid, closest)
        sign = 1.0 if np.dot(np.asarray(p, dtype=float) - closest, n) >= 0 else -1.0
        return sign * d

    def surface_normal(self, p) -> np.ndarray:
        """Outward unit direction of increasing distance at/near p."""
        p = np.asarray(p, dtype=float)
        d, closest, fid = self.closest_point(p)
        if d > 1e-9:
            g = (p - closest) / d
            if self.watertight and np.dot(g, self._pseudonormal(fid, closest)) < 0:
                g = -g  # keep the outward orientation for interior points
            return g
        n = self._pseudonormal(fid, closest)
        return n / (np.linalg.norm(n) + 1e-300)

    # -- sampling ---------------------------------------------------------------

    def sample_surface(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Area-weighted uniform surface samples, shape (n, 3)."""
        if self.total_area <= 0:
            raise ContractViolationError("mesh has zero surface area")
        probs = self.face_areas / self.total_area
        fids = rng.choice(len(self.faces), size=n, p=probs)
        r1 = np.sqrt(rng.random(n))
        r2 = rng.random(n)
        u = 1.0 - r1
        v = r1 * (1.0 - r2)
        w = r1 * r2
        return (
            u[:, None] * self._a[fids]
            + v[:, None] * self._b[fids]
            + w[:, None] * self._c[fids]
        )

    def warn_degenerate(self, area_tol: float = 1e-12) -> int:
        n_bad = int(np.sum(self.face_areas <= area_tol))
        if n_bad:
            warnings.warn(f"mesh has {n_bad} degenerate triangles", stacklevel=2)
        return n_bad


# ---------------------------------------------------------------------------
# File IO (ASCII OBJ / PLY)


def load_mesh(path) -> TriangleMesh:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        return _load_obj(path)
    if suffix == ".ply":
        return _load_ply(path)
    raise MeshFormatError(f"unsupported mesh format: {suffix}")


def _load_obj(path: Path) -> TriangleMesh:
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(tok.split("/")[0]) for tok in parts[1:]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                for t in range(1, len(idx) - 1):  # fan-triangulate polygons
                    faces.append([idx[0], idx[t], idx[t + 1]])
    if not verts:
        raise MeshFormatError(f"no vertices found in {path}")
    return TriangleMesh(np.array(verts), np.array(faces, dtype=np.int64))


def _load_ply(path: Path) -> TriangleMesh:
    with open(path) as fh:
        line = fh.readline().strip()
        if line != "ply":
            raise MeshFormatError("missing ply magic")
        n_vert = n_face = 0
        fmt = None
        element = None
        vert_props = []
        while True:
            line = fh.readline()
            if not line:
                raise MeshFormatError("unterminated ply header")
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "format":
                fmt = parts[1]
            elif parts[0] == "element":
                element = parts[1]
                if element == "vertex":
                    n_vert = int(parts[2])
                elif element == "face":
                    n_face = int(parts[2])
            elif parts[0] == "property" and element == "vertex":
                vert_props.append(parts[-1])
            elif parts[0] == "end_header":
                break
        if fmt != "ascii":
            raise MeshFormatError("only ascii ply is supported")
        try:
            cols = [vert_props.index(c) for c in ("x", "y", "z")]
        except ValueError as exc:
            raise MeshFormatError("ply vertices lack x/y/z properties") from exc
        verts = np.empty((n_vert, 3))
        for i in range(n_vert):
            vals = fh.readline().split()
            verts[i] = [float(vals[c]) for c in cols]
        faces = []
        for _ in range(n_face):
            vals = fh.readline().split()
            cnt = int(vals[0])
            idx = [int(v) for v in vals[1:1 + cnt]]
            for t in range(1, cnt - 1):
                faces.append([idx[0], idx[t], idx[t + 1]])
    return TriangleMesh(verts, np.array(faces, dtype=np.int64))


def save_obj(mesh: TriangleMesh, path) -> None:
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


# ---------------------------------------------------------------------------
# Procedural meshes


def icosphere(subdivisions: int = 3, radius: float = 1.0) -> TriangleMesh:
    """Unit icosahedron subdivided and projected to a sphere."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=float)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [v for v in verts]
    for _ in range(subdivisions):
        cache = {}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                m /= np.linalg.norm(m)
                verts.append(m)
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for (i, j, k) in faces:
            a, b, c = midpoint(i, j), midpoint(j, k), midpoint(k, i)
            new_faces += [(i, a, c), (j, b, a), (k, c, b), (a, b, c)]
        faces = new_faces
    return TriangleMesh(radius * np.array(verts), np.array(faces, dtype=np.int64))


def grid_mesh(nx: int, ny: int, size_x: float = 1.0, size_y: float = 1.0,
              shear: float = 0.0) -> TriangleMesh:
    """Flat rectangular mesh in the z=0 plane; shear skews x by y."""
    xs = np.linspace(0.0, size_x, nx + 1)
    ys = np.linspace(0.0, size_y, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    X = X + shear * Y
    verts = np.column_stack([X.ravel(), Y.ravel(), np.zeros(X.size)])

    def vid(i, j):
        return i * (ny + 1) + j

    faces = []
    for i in range(nx):
        for j in range(ny):
            faces.append([vid(i, j), vid(i + 1, j), vid(i + 1, j + 1)])
            faces.append([vid(i, j), vid(i + 1, j + 1), vid(i, j + 1)])
    return TriangleMesh(verts, np.array(faces, dtype=np.int64))
