"""Geometry extraction from a trained field.

Depth and point clouds come from the steepest drop of transmittance along
camera rays. Meshes come from marching cubes over a sampled grid, get vertex
colors from field queries along their normals, and can be unwrapped with
least-squares conformal maps and baked into a texture atlas.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, cg

from ._mc_tables import CORNERS, EDGES, TRIANGLES
from .errors import FormatError, TopologyError, UsageError
from .render import Camera, Ray, RayBundle, RaySamples, camera_bundle, composite, sample_along_ray, sdf_tau
from .fields import truncate_sdf


@dataclass
class PointCloud:
    points: np.ndarray
    colors: np.ndarray
    # (camera index, pixel i, pixel j) per point, when known
    source: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if self.points.shape[0] != self.colors.shape[0]:
            raise UsageError("points and colors must have the same length")

    def __len__(self):
        return self.points.shape[0]


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    colors: np.ndarray | None = None
    uv: np.ndarray | None = None
    texture: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise UsageError("triangle index out of range")
        if self.uv is not None and len(self.uv) != len(self.vertices):
            raise UsageError("uv must have one entry per vertex")

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    def face_normals(self, normalize=True) -> np.ndarray:
        v = self.vertices[self.triangles]
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        if normalize:
            n = n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
        return n

    def areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(normalize=False), axis=1)

    def vertex_normals(self) -> np.ndarray:
        """Area-weighted average of incident face normals, normalized."""
        fn = self.face_normals(normalize=False)  # length = 2 * area
        vn = np.zeros_like(self.vertices)
        for k in range(3):
            np.add.at(vn, self.triangles[:, k], fn)
        norm = np.linalg.norm(vn, axis=1, keepdims=True)
        return np.where(norm > 0, vn / np.maximum(norm, 1e-300), np.array([0.0, 0.0, 1.0]))


# --------------------------------------------------------------------------
# depth and point clouds


def _ray_quantities(fld, bundle: RayBundle, n: int):
    """Per-ray samples, compositing weights, opacity and the field outputs needed for colors."""
    valid = bundle.t_far > bundle.t_near
    sub = bundle.subset(valid)
    if len(sub) == 0:
        return valid, None, None, None
    samples = sample_along_ray(sub, n)
    x = sub.origins[:, None, :] + samples.t[..., None] * sub.directions[:, None, :]
    d = np.repeat(sub.directions, n, axis=0)
    V = samples.t.shape[0]
    if fld.backend == "density":
        sigma, col = fld.density_color(x.reshape(-1, 3), d)
        tau = np.asarray(sigma, dtype=np.float64).reshape(V, n) * samples.deltas
    else:
        f, col = fld.sdf_color(x.reshape(-1, 3), d)
        tau, _ = sdf_tau(np.asarray(f, dtype=np.float64).reshape(V, n), fld.b)
    comp = composite(tau, np.zeros((V, n, 3)), samples.t, (0.0, 0.0, 0.0))
    return valid, samples, comp, sub


def _surface_index(comp, samples, threshold):
    # steepest drop of T: argmin (T_{i+1} - T_i) / delta_i = argmax w_i / delta_i
    rate = comp.weights / samples.deltas
    i = np.argmax(rate, axis=1)
    hit = comp.opacity > threshold
    return i, hit


def estimate_depth(ray: Ray, fld, samples: RaySamples, threshold: float = 0.5):
    """t of the steepest transmittance drop, or None (no surface) when opacity <= threshold."""
    t = np.asarray(samples.t, dtype=np.float64)
    x = ray.origin + t[:, None] * ray.direction
    d = np.broadcast_to(ray.direction, x.shape)
    if fld.backend == "density":
        sigma, _ = fld.density_color(x, d)
        tau = np.asarray(sigma, dtype=np.float64) * samples.deltas
    else:
        f, _ = fld.sdf_color(x, d)
        tau, _ = sdf_tau(np.asarray(f, dtype=np.float64), fld.b)
    comp = composite(tau[None], np.zeros((1, len(t), 3)), t[None], (0.0, 0.0, 0.0))
    if comp.opacity[0] <= threshold:
        return None
    rate = comp.weights[0] / samples.deltas
    return float(t[int(np.argmax(rate))])


def estimate_depths(fld, bundle: RayBundle, n: int = 128, threshold: float = 0.5) -> np.ndarray:
    """Batched `estimate_depth`; NaN marks rays without a surface."""
    out = np.full(len(bundle), np.nan)
    valid, samples, comp, _ = _ray_quantities(fld, bundle, n)
    if samples is None:
        return out
    i, hit = _surface_index(comp, samples, threshold)
    t = samples.t[np.arange(len(i)), i]
    vals = np.where(hit, t, np.nan)
    out[valid] = vals
    return out


def _field_bbox(fld):
    if hasattr(fld, "bbox"):
        return fld.bbox
    return (fld.config.grid.bbox_min, fld.config.grid.bbox_max)


def query_colors(fld, x, d) -> np.ndarray:
    if fld.backend == "density":
        _, c = fld.density_color(x, d)
    else:
        _, c = fld.sdf_color(x, d)
    return np.clip(np.asarray(c, dtype=np.float64), 0.0, 1.0)


def extract_pointcloud(fld, cameras, stride: int = 1, n: int = 128, threshold: float = 0.5,
                       chunk: int = 8192) -> PointCloud:
    """One point per strided pixel whose ray finds a surface, colored by the field at that point."""
    cameras = list(cameras)
    if not cameras:
        raise UsageError("need at least one camera")
    if stride < 1:
        raise UsageError("stride must be >= 1")
    bbox = _field_bbox(fld)
    pts, cols, src = [], [], []
    for ci, cam in enumerate(cameras):
        jj, ii = np.mgrid[0 : cam.height : stride, 0 : cam.width : stride]
        ii, jj = ii.ravel(), jj.ravel()
        bundle = camera_bundle(cam, ii, jj, bbox=bbox)
        for s in range(0, len(bundle), chunk):
            b = bundle.subset(slice(s, s + chunk))
            t = estimate_depths(fld, b, n, threshold)
            hit = np.isfinite(t)
            if not np.any(hit):
                continue
            o, d = b.origins[hit], b.directions[hit]
            p = o + t[hit, None] * d
            pts.append(p)
            cols.append(query_colors(fld, p, d))
            src.append(np.stack([np.full(hit.sum(), ci), ii[s : s + chunk][hit], jj[s : s + chunk][hit]], 1))
    if not pts:
        return PointCloud(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    return PointCloud(np.concatenate(pts), np.concatenate(cols), np.concatenate(src).astype(np.int64))


# --------------------------------------------------------------------------
# marching cubes

# axis and base-corner offset of each of the 12 cell edges
_EDGE_AXIS = np.array([int(np.flatnonzero(CORNERS[a] != CORNERS[b])[0]) for a, b in EDGES])
_EDGE_BASE = np.array([np.minimum(CORNERS[a], CORNERS[b]) for a, b in EDGES])


def marching_cubes(values, iso: float = 0.0, bbox=((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0)),
                   refine=None, refine_steps: int = 30) -> TriangleMesh:
    """Triangulate {values == iso} on a regular grid spanning `bbox` (corner samples inclusive).

    Points with value < iso are inside. Vertices are shared between cells
    through global edge ids, so a surface that never touches the grid
    boundary comes out closed. Edge crossings use linear interpolation, or,
    when `refine(x) -> values` is given, bisection on the sign of
    refine(x) - iso along the edge (exact zero crossing of the underlying
    function, and identical for any monotone remapping of it that fixes iso).
    Triangles face the outside (increasing value).
    """
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 3 or min(v.shape) < 2:
        raise UsageError("need a 3-D grid with at least 2 samples per axis")
    shape = np.array(v.shape)
    lo = np.asarray(bbox[0], dtype=np.float64)
    hi = np.asarray(bbox[1], dtype=np.float64)
    spacing = (hi - lo) / (shape - 1)
    inside = v < iso
    nx, ny, nz = v.shape
    case = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.int64)
    for k, (dx, dy, dz) in enumerate(CORNERS):
        case |= inside[dx : nx - 1 + dx, dy : ny - 1 + dy, dz : nz - 1 + dz].astype(np.int64) << k
    active = np.nonzero((case > 0) & (case < 255))
    if active[0].size == 0:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    cells = np.stack(active, axis=1)  # (C, 3), C order
    tri_edges = TRIANGLES[case[active]]  # (C, 16)
    c_idx, slot = np.nonzero(tri_edges >= 0)
    local = tri_edges[c_idx, slot]
    base = cells[c_idx] + _EDGE_BASE[local]
    axis = _EDGE_AXIS[local]
    nvox = nx * ny * nz
    gid = axis * nvox + np.ravel_multi_index(base.T, v.shape)
    uniq, inverse = np.unique(gid, return_inverse=True)
    tris = inverse.reshape(-1, 3)[:, [0, 2, 1]]

    e_axis = uniq // nvox
    e_base = np.stack(np.unravel_index(uniq % nvox, v.shape), axis=1)
    step = np.eye(3, dtype=np.int64)[e_axis]
    e_tip = e_base + step
    p0 = lo + e_base * spacing
    p1 = lo + e_tip * spacing
    s0 = v[tuple(e_base.T)] - iso
    s1 = v[tuple(e_tip.T)] - iso
    if refine is None:
        with np.errstate(invalid="ignore", divide="ignore"):
            t = np.where(s0 != s1, s0 / (s0 - s1), 0.5)
        t = np.clip(t, 0.0, 1.0)
        verts = p0 + t[:, None] * (p1 - p0)
    else:
        verts = _bisect_edges(refine, iso, p0, p1, s0 < 0, refine_steps)
    return _clean_mesh(verts, tris)


def _bisect_edges(fn, iso, p0, p1, first_inside, steps):
    a = np.where(first_inside[:, None], p0, p1)  # inside end
    b = np.where(first_inside[:, None], p1, p0)
    for _ in range(steps):
        m = 0.5 * (a + b)
        ins = np.asarray(fn(m), dtype=np.float64).reshape(-1) < iso
        a = np.where(ins[:, None], m, a)
        b = np.where(ins[:, None], b, m)
    return 0.5 * (a + b)


def _clean_mesh(verts, tris, area_eps=1e-12) -> TriangleMesh:
    """Merge identical positions, drop degenerate triangles and unused vertices."""
    uniq, inv = np.unique(verts, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    tris = inv[tris]
    keep = (tris[:, 0] != tris[:, 1]) & (tris[:, 1] != tris[:, 2]) & (tris[:, 0] != tris[:, 2])
    tris = tris[keep]
    if len(tris):
        p = uniq[tris]
        area = 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)
        tris = tris[area > area_eps]
    used = np.unique(tris)
    remap = np.full(len(uniq), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return TriangleMesh(uniq[used], remap[tris])


def grid_points(resolution, bbox) -> np.ndarray:
    """(r, r, r, 3) lattice including both box faces; r may also be a 3-tuple."""
    res = np.broadcast_to(np.asarray(resolution, dtype=np.int64), (3,))
    axes = [np.linspace(bbox[0][k], bbox[1][k], int(res[k])) for k in range(3)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def field_values(fld, x, kind: str = "auto", chunk: int = 65536) -> np.ndarray:
    """Scalar used for meshing: raw f ("sdf"), pi(f) ("tsdf") or -sigma ("density")."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    if kind == "auto":
        kind = "density" if fld.backend == "density" else "sdf"
    out = np.empty(x.shape[0])
    for s in range(0, x.shape[0], chunk):
        xs = x[s : s + chunk]
        if kind == "density":
            out[s : s + chunk] = -np.asarray(fld.density(xs), dtype=np.float64)
        elif kind == "sdf":
            out[s : s + chunk] = fld.sdf(xs)
        elif kind == "tsdf":
            out[s : s + chunk] = truncate_sdf(np.asarray(fld.sdf(xs), dtype=np.float64), fld.b)
        else:
            raise UsageError(f"unknown field kind {kind!r}")
    return out


def extract_mesh(fld, resolution: int = 64, iso: float | None = None, kind: str = "auto",
                 bbox=None, refine: bool = True) -> TriangleMesh:
    """Mesh a field: SDF iso 0 on f (or pi(f)); density iso = threshold on sigma (default 25)."""
    bbox = bbox or _field_bbox(fld)
    if kind == "auto":
        kind = "density" if fld.backend == "density" else "sdf"
    if iso is None:
        iso = 25.0 if kind == "density" else 0.0
    level = -iso if kind == "density" else iso
    grid = grid_points(resolution, bbox)
    vals = field_values(fld, grid.reshape(-1, 3), kind).reshape(grid.shape[:3])
    fn = (lambda x: field_values(fld, x, kind)) if refine else None
    return marching_cubes(vals, level, bbox, refine=fn)


def color_vertices(mesh: TriangleMesh, fld) -> TriangleMesh:
    """Per-vertex color from a field query at the vertex, viewed along the inward normal."""
    if mesh.n_vertices == 0:
        raise UsageError("mesh has no vertices")
    n = mesh.vertex_normals()
    cols = []
    for s in range(0, mesh.n_vertices, 65536):
        cols.append(query_colors(fld, mesh.vertices[s : s + 65536], -n[s : s + 65536]))
    return TriangleMesh(mesh.vertices, mesh.triangles, np.concatenate(cols), mesh.uv, mesh.texture)


# --------------------------------------------------------------------------
# LSCM


def _edge_table(tris):
    e = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    key = np.sort(e, axis=1)
    uniq, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    return e, uniq, inv.reshape(-1), counts


def check_disk(mesh: TriangleMesh) -> np.ndarray:
    """Boundary loop (vertex ids in order) of a disk-topology patch; TopologyError otherwise."""
    tris = mesh.triangles
    if len(tris) == 0:
        raise TopologyError("empty patch")
    e, uniq, inv, counts = _edge_table(tris)
    if np.any(counts > 2):
        raise TopologyError("patch is not edge-manifold; segment the mesh into charts first")
    # consistent orientation: interior edges must appear once in each direction
    directed = {tuple(x) for x in e}
    if len(directed) != len(e):
        raise TopologyError("patch has inconsistent triangle orientation")
    bmask = counts[inv] == 1
    if not np.any(bmask):
        raise TopologyError("patch is closed; segment the mesh into disk charts first")
    used = np.unique(tris)
    V, E, F = len(used), len(uniq), len(tris)
    nxt = {}
    for a, b in e[bmask]:
        if a in nxt:
            raise TopologyError("boundary is pinched at a vertex; segment the mesh first")
        nxt[int(a)] = int(b)
    start = next(iter(nxt))
    loop = [start]
    cur = nxt[start]
    while cur != start:
        loop.append(cur)
        cur = nxt[cur]
    if len(loop) != len(nxt):
        raise TopologyError("patch has more than one boundary loop; segment the mesh first")
    if V - E + F != 1:
        raise TopologyError("patch is not a topological disk; segment the mesh first")
    if _components(tris, mesh.n_vertices) != 1:
        raise TopologyError("patch is not connected")
    return np.asarray(loop)


def _components(tris, nv) -> int:
    from scipy.sparse.csgraph import connected_components

    rows = np.concatenate([tris[:, 0], tris[:, 1], tris[:, 2]])
    cols = np.concatenate([tris[:, 1], tris[:, 2], tris[:, 0]])
    g = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(nv, nv))
    used = np.unique(tris)
    _, labels = connected_components(g, directed=False)
    return len(np.unique(labels[used]))


def _local_frames(mesh: TriangleMesh):
    """Per-triangle 2-D coordinates (F, 3, 2) in the triangle's own plane and areas."""
    p = mesh.vertices[mesh.triangles]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    n = np.cross(e1, e2)
    area2 = np.linalg.norm(n, axis=1)
    ax = e1 / np.linalg.norm(e1, axis=1, keepdims=True)
    ay = np.cross(n / area2[:, None], ax)
    q = np.zeros((len(p), 3, 2))
    q[:, 1, 0] = np.linalg.norm(e1, axis=1)
    q[:, 2, 0] = np.einsum("ij,ij->i", e2, ax)
    q[:, 2, 1] = np.einsum("ij,ij->i", e2, ay)
    return q, 0.5 * area2


def _lscm_matrix(mesh: TriangleMesh):
    """Sparse A (2F x 2V) with energy = |A [U; V]|^2 = sum_T area |grad V - rot90 grad U|^2."""
    q, area = _local_frames(mesh)
    F = len(q)
    nv = mesh.n_vertices
    # gradient of the hat function of corner j: rot90(opposite edge) / (2 area)
    opp = np.stack([q[:, 2] - q[:, 1], q[:, 0] - q[:, 2], q[:, 1] - q[:, 0]], axis=1)  # (F, 3, 2)
    g = np.stack([-opp[..., 1], opp[..., 0]], axis=-1) / (2.0 * area[:, None, None])
    s = np.sqrt(area)[:, None]
    # residual r = sum_j V_j g_j - U_j rot90(g_j), rot90(a, b) = (-b, a)
    rows, cols, vals = [], [], []
    tri = mesh.triangles
    r0 = 2 * np.arange(F)
    for j in range(3):
        vj = tri[:, j]
        gx, gy = g[:, j, 0], g[:, j, 1]
        # x component: V_j gx - U_j (-gy) = V_j gx + U_j gy
        rows += [r0, r0]
        cols += [vj, nv + vj]
        vals += [s[:, 0] * gy, s[:, 0] * gx]
        # y component: V_j gy - U_j gx
        rows += [r0 + 1, r0 + 1]
        cols += [vj, nv + vj]
        vals += [-s[:, 0] * gx, s[:, 0] * gy]
    A = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(2 * F, 2 * nv)
    )
    return A


def lscm_energy(mesh: TriangleMesh, uv) -> float:
    A = _lscm_matrix(mesh)
    x = np.concatenate([uv[:, 0], uv[:, 1]])
    r = A @ x
    return float(r @ r)


def farthest_boundary_pair(mesh: TriangleMesh, loop) -> tuple[int, int]:
    pts = mesh.vertices[loop]
    best, pair = -1.0, (int(loop[0]), int(loop[-1]))
    for s in range(0, len(pts), 1024):
        d = np.linalg.norm(pts[s : s + 1024, None, :] - pts[None, :, :], axis=-1)
        k = np.unravel_index(np.argmax(d), d.shape)
        if d[k] > best:
            best = float(d[k])
            pair = (int(loop[s + k[0]]), int(loop[k[1]]))
    return pair


def lscm_unwrap(mesh: TriangleMesh, pins=None, tol: float = 1e-10) -> np.ndarray:
    """Conformal uv (V, 2) for a disk patch.

    Two pinned vertices fix the similarity freedom; by default the two
    boundary vertices farthest apart, at (0, 0) and (|ab|, 0). The free
    unknowns solve the normal equations by Jacobi-preconditioned conjugate
    gradients. Vertices not referenced by any triangle get uv (0, 0).
    """
    loop = check_disk(mesh)
    nv = mesh.n_vertices
    if pins is None:
        a, b = farthest_boundary_pair(mesh, loop)
        dist = float(np.linalg.norm(mesh.vertices[a] - mesh.vertices[b]))
        pins = {a: (0.0, 0.0), b: (dist, 0.0)}
    if len(pins) < 2:
        raise UsageError("LSCM needs at least two pinned vertices")
    A = _lscm_matrix(mesh).tocsc()
    fixed = np.zeros(2 * nv, dtype=bool)
    xfix = np.zeros(2 * nv)
    for vid, (u, v) in pins.items():
        fixed[vid] = fixed[nv + vid] = True
        xfix[vid], xfix[nv + vid] = u, v
    used = np.zeros(nv, dtype=bool)
    used[np.unique(mesh.triangles)] = True
    free = ~fixed & np.concatenate([used, used])
    Af = A[:, free]
    rhs = -(A[:, fixed] @ xfix[fixed])
    N = (Af.T @ Af).tocsr()
    bvec = Af.T @ rhs
    diag = N.diagonal()
    M = LinearOperator(N.shape, matvec=lambda r: r / diag, dtype=np.float64)
    x, info = cg(N, bvec, rtol=tol, atol=0.0, maxiter=20 * N.shape[0] + 100, M=M)
    if info != 0:
        # fall back to a direct solve when CG stalls
        from scipy.sparse.linalg import spsolve

        x = spsolve(N.tocsc(), bvec)
    sol = xfix.copy()
    sol[free] = x
    return np.stack([sol[:nv], sol[nv:]], axis=1)


def quasi_conformal_distortion(mesh: TriangleMesh, uv) -> np.ndarray:
    """Per-triangle ratio of singular values of the 3-D -> uv map (1 = conformal)."""
    q, _ = _local_frames(mesh)
    t = uv[mesh.triangles]
    P = np.stack([q[:, 1] - q[:, 0], q[:, 2] - q[:, 0]], axis=2)  # (F, 2, 2) columns
    Q = np.stack([t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]], axis=2)
    J = Q @ np.linalg.inv(P)
    s = np.linalg.svd(J, compute_uv=False)
    return s[:, 0] / np.maximum(s[:, 1], 1e-300)


# --------------------------------------------------------------------------
# charts and atlas


def _triangle_adjacency(tris):
    e, uniq, inv, counts = _edge_table(tris)
    F = len(tris)
    face = np.tile(np.arange(F), 3)
    order = np.argsort(inv, kind="stable")
    inv_s, face_s = inv[order], face[order]
    adj = [[] for _ in range(F)]
    same = inv_s[1:] == inv_s[:-1]
    for k in np.flatnonzero(same):
        a, b = face_s[k], face_s[k + 1]
        # only manifold edges connect charts
        if counts[inv_s[k]] == 2:
            adj[a].append(b)
            adj[b].append(a)
    return adj


def segment_charts(mesh: TriangleMesh, max_angle_deg: float = 60.0, _faces=None) -> list[np.ndarray]:
    """Split triangles into disk-topology charts by normal-cone region growing.

    Each chart grows from its lowest-index seed over edge neighbors whose
    normal lies within `max_angle_deg` of the seed normal. Charts that are
    not disks are re-segmented with half the angle.
    """
    faces = np.arange(mesh.n_triangles) if _faces is None else _faces
    sub = TriangleMesh(mesh.vertices, mesh.triangles[faces])
    normals = sub.face_normals()
    adj = _triangle_adjacency(sub.triangles)
    cos_t = math.cos(math.radians(max_angle_deg))
    label = np.full(len(faces), -1)
    charts = []
    for seed in range(len(faces)):
        if label[seed] >= 0:
            continue
        cid = len(charts)
        label[seed] = cid
        members = [seed]
        stack = [seed]
        ns = normals[seed]
        while stack:
            f = stack.pop()
            for g in adj[f]:
                if label[g] < 0 and normals[g] @ ns >= cos_t:
                    label[g] = cid
                    members.append(g)
                    stack.append(g)
        charts.append(np.sort(np.asarray(members)))
    out = []
    for members in charts:
        global_faces = faces[members]
        patch = TriangleMesh(mesh.vertices, mesh.triangles[global_faces])
        try:
            check_disk(patch)
            out.append(global_faces)
        except TopologyError:
            if len(global_faces) == 1:
                raise
            out.extend(segment_charts(mesh, max_angle_deg / 2.0, global_faces))
    return out


def submesh(mesh: TriangleMesh, faces) -> tuple[TriangleMesh, np.ndarray]:
    """Compact mesh of the given triangles and the original ids of its vertices."""
    tris = mesh.triangles[faces]
    used, inv = np.unique(tris, return_inverse=True)
    colors = None if mesh.colors is None else mesh.colors[used]
    return TriangleMesh(mesh.vertices[used], inv.reshape(-1, 3), colors), used


@dataclass
class Atlas:
    mesh: TriangleMesh  # seam vertices duplicated, uv in [0, 1]^2
    chart_of_face: np.ndarray
    source_vertex: np.ndarray  # index into the input mesh


def build_atlas(mesh: TriangleMesh, texture_size: int = 1024, padding_texels: int = 3,
                max_angle_deg: float = 60.0) -> Atlas:
    """Segment, unwrap every chart with LSCM and shelf-pack the charts into the unit square.

    Charts are scaled so uv area matches surface area, which keeps texel
    density uniform across the atlas.
    """
    if mesh.n_triangles == 0:
        raise UsageError("mesh has no triangles")
    charts = segment_charts(mesh, max_angle_deg)
    pieces = []
    for faces in charts:
        m, src = submesh(mesh, faces)
        uv = lscm_unwrap(m)
        area3 = m.areas().sum()
        t = uv[m.triangles]
        e1, e2 = t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]
        area2 = 0.5 * np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]).sum()
        if area2 > 0:
            uv = uv * math.sqrt(area3 / area2)
        uv = uv - uv.min(axis=0)
        pieces.append((m, src, uv, faces))
    sizes = np.array([p[2].max(axis=0) for p in pieces])
    total = float(np.sum(np.prod(np.maximum(sizes, 1e-12), axis=1)))
    side_est = math.sqrt(total) * 1.3
    pad = padding_texels * side_est / texture_size
    offsets, extent = _shelf_pack(sizes + pad, max(side_est, float(sizes[:, 0].max() + pad)))
    scale = 1.0 / max(extent)
    verts, tris, uvs, chart_ids, src_ids = [], [], [], [], []
    base = 0
    for k, ((m, src, uv, faces), off) in enumerate(zip(pieces, offsets)):
        verts.append(m.vertices)
        tris.append(m.triangles + base)
        uvs.append((uv + off + 0.5 * pad) * scale)
        chart_ids.append(np.full(m.n_triangles, k))
        src_ids.append(src)
        base += m.n_vertices
    colors = None
    if mesh.colors is not None:
        colors = mesh.colors[np.concatenate(src_ids)]
    out = TriangleMesh(np.concatenate(verts), np.concatenate(tris), colors, np.concatenate(uvs))
    # faces come out grouped by chart; keep the ordering explicit
    return Atlas(out, np.concatenate(chart_ids), np.concatenate(src_ids))


def _shelf_pack(sizes, width):
    order = np.argsort(-sizes[:, 1], kind="stable")
    offsets = np.zeros_like(sizes)
    x = y = shelf_h = 0.0
    used_w = 0.0
    for k in order:
        w, h = sizes[k]
        if x > 0 and x + w > width:
            y += shelf_h
            x = shelf_h = 0.0
        offsets[k] = (x, y)
        x += w
        used_w = max(used_w, x)
        shelf_h = max(shelf_h, h)
    return offsets, (used_w, y + shelf_h)


# --------------------------------------------------------------------------
# texture baking


@numba.njit(cache=True)
def _rasterize(uvpix, tris, H, W, tri_map, bary):
    for f in range(tris.shape[0]):
        a = uvpix[tris[f, 0]]
        b = uvpix[tris[f, 1]]
        c = uvpix[tris[f, 2]]
        x0 = max(int(math.floor(min(a[0], b[0], c[0]))) - 1, 0)
        x1 = min(int(math.ceil(max(a[0], b[0], c[0]))) + 1, W - 1)
        y0 = max(int(math.floor(min(a[1], b[1], c[1]))) - 1, 0)
        y1 = min(int(math.ceil(max(a[1], b[1], c[1]))) + 1, H - 1)
        det = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1])
        if abs(det) < 1e-18:
            continue
        for y in range(y0, y1 + 1):
            for x in range(x0, x1 + 1):
                if tri_map[y, x] >= 0:
                    continue
                px = x + 0.5
                py = y + 0.5
                l1 = ((px - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (py - a[1])) / det
                l2 = ((b[0] - a[0]) * (py - a[1]) - (px - a[0]) * (b[1] - a[1])) / det
                l0 = 1.0 - l1 - l2
                if l0 >= -1e-9 and l1 >= -1e-9 and l2 >= -1e-9:
                    tri_map[y, x] = f
                    bary[y, x, 0] = l0
                    bary[y, x, 1] = l1
                    bary[y, x, 2] = l2


def uv_to_pixels(uv, size) -> np.ndarray:
    """uv (v up, OBJ convention) -> continuous pixel coords (x right, y down)."""
    H, W = size
    return np.stack([uv[:, 0] * W, (1.0 - uv[:, 1]) * H], axis=1)


@dataclass
class BakedTexture:
    image: np.ndarray  # (H, W, 3) float in [0, 1]
    triangle: np.ndarray  # (H, W) triangle per texel, -1 outside charts
    barycentric: np.ndarray  # (H, W, 3)
    material: str = "material0"

    def surface_points(self, mesh: TriangleMesh) -> tuple[np.ndarray, np.ndarray]:
        """Texel (rows, cols) inside charts and their 3-D surface points."""
        r, c = np.nonzero(self.triangle >= 0)
        t = self.triangle[r, c]
        p = np.einsum("nk,nkj->nj", self.barycentric[r, c], mesh.vertices[mesh.triangles[t]])
        return np.stack([r, c], axis=1), p


def bake_texture(mesh: TriangleMesh, fld, size=1024, dilate: int = 8, material: str = "material0") -> BakedTexture:
    """Color every chart texel by a field query at its surface point, then dilate across borders."""
    if mesh.uv is None:
        raise UsageError("mesh has no uv coordinates; build an atlas first")
    H, W = (size, size) if np.isscalar(size) else size
    tri_map = np.full((H, W), -1, dtype=np.int64)
    bary = np.zeros((H, W, 3))
    _rasterize(uv_to_pixels(mesh.uv, (H, W)), mesh.triangles, H, W, tri_map, bary)
    img = np.zeros((H, W, 3))
    tex = BakedTexture(img, tri_map, bary, material)
    rc, p = tex.surface_points(mesh)
    if len(p):
        n = mesh.face_normals()[tri_map[rc[:, 0], rc[:, 1]]]
        cols = []
        for s in range(0, len(p), 65536):
            cols.append(query_colors(fld, p[s : s + 65536], -n[s : s + 65536]))
        img[rc[:, 0], rc[:, 1]] = np.concatenate(cols)
    tex.image = _dilate(img, tri_map >= 0, dilate)
    return tex


def _dilate(img, filled, iterations):
    img = img.copy()
    filled = filled.copy()
    for _ in range(iterations):
        if filled.all():
            break
        acc = np.zeros_like(img)
        cnt = np.zeros(filled.shape)
        for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1), (-1, -1), (-1, 1), (1, -1), (1, 1)):
            src = np.roll(np.roll(filled, dy, 0), dx, 1)
            val = np.roll(np.roll(img, dy, 0), dx, 1)
            # no wrap-around across image borders
            if dy == -1:
                src[-1] = False
            if dy == 1:
                src[0] = False
            if dx == -1:
                src[:, -1] = False
            if dx == 1:
                src[:, 0] = False
            acc += val * src[..., None]
            cnt += src
        grow = (~filled) & (cnt > 0)
        img[grow] = acc[grow] / cnt[grow][:, None]
        filled |= grow
    return img


# --------------------------------------------------------------------------
# file formats


def write_ply(path, pc: PointCloud) -> None:
    """Binary little-endian PLY: float x y z, uchar red green blue."""
    n = len(pc)
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {n}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    ).encode("ascii")
    rec = np.zeros(n, dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("r", "u1"), ("g", "u1"), ("b", "u1")])
    rec["x"], rec["y"], rec["z"] = pc.points.T
    rgb = np.clip(np.floor(pc.colors * 255.0 + 0.5), 0, 255).astype(np.uint8)
    rec["r"], rec["g"], rec["b"] = rgb.T
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(rec.tobytes())


def read_ply(path) -> PointCloud:
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply\n") or end < 0:
        raise FormatError(f"{path}: not a PLY file")
    header = raw[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise FormatError(f"{path}: only binary little-endian PLY is supported")
    n = 0
    props = []
    types = {"float": "<f4", "double": "<f8", "uchar": "u1", "int": "<i4", "uint": "<u4"}
    in_vertex = False
    for line in header:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            n, in_vertex = int(parts[2]), True
        elif parts and parts[0] == "element":
            in_vertex = False
        elif parts and parts[0] == "property" and in_vertex:
            if parts[1] not in types:
                raise FormatError(f"{path}: unsupported property type {parts[1]}")
            props.append((parts[2], types[parts[1]]))
    rec = np.frombuffer(raw, dtype=np.dtype(props), count=n, offset=end + len(b"end_header\n"))
    pts = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
    if "red" in rec.dtype.names:
        cols = np.stack([rec["red"], rec["green"], rec["blue"]], axis=1) / 255.0
    else:
        cols = np.zeros_like(pts)
    return PointCloud(pts, cols)


def write_obj(path, mesh: TriangleMesh, texture_file: str | None = None, material: str = "material0") -> None:
    """OBJ with per-vertex colors as extra v columns, or uv + MTL reference when textured."""
    path = Path(path)
    lines = []
    if texture_file is not None:
        mtl = path.with_suffix(".mtl")
        mtl.write_text(
            f"newmtl {material}\nKa 1 1 1\nKd 1 1 1\nKs 0 0 0\nillum 1\nmap_Kd {texture_file}\n"
        )
        lines.append(f"mtllib {mtl.name}")
    v = mesh.vertices
    if mesh.colors is not None and texture_file is None:
        c = np.clip(mesh.colors, 0.0, 1.0)
        lines += [f"v {a:.9g} {b:.9g} {d:.9g} {r:.6g} {g:.6g} {bb:.6g}" for (a, b, d), (r, g, bb) in zip(v, c)]
    else:
        lines += [f"v {a:.9g} {b:.9g} {d:.9g}" for a, b, d in v]
    tri = mesh.triangles + 1
    if mesh.uv is not None:
        lines += [f"vt {u:.9g} {w:.9g}" for u, w in mesh.uv]
        if texture_file is not None:
            lines.append(f"usemtl {material}")
        lines += [f"f {a}/{a} {b}/{b} {c}/{c}" for a, b, c in tri]
    else:
        lines += [f"f {a} {b} {c}" for a, b, c in tri]
    path.write_text("\n".join(lines) + "\n")


def read_obj(path) -> TriangleMesh:
    verts, cols, uvs, faces = [], [], [], []
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
                if len(parts) >= 7:
                    cols.append([float(x) for x in parts[4:7]])
            elif parts[0] == "vt":
                uvs.append([float(x) for x in parts[1:3]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
        except ValueError:
            raise FormatError(f"{path}:{n}: malformed OBJ line") from None
    colors = np.asarray(cols) if cols and len(cols) == len(verts) else None
    uv = np.asarray(uvs) if uvs and len(uvs) == len(verts) else None
    return TriangleMesh(np.asarray(verts).reshape(-1, 3), np.asarray(faces, dtype=np.int64).reshape(-1, 3),
                        colors, uv)


def sample_surface(mesh: TriangleMesh, n: int, rng=None) -> np.ndarray:
    """n points uniformly distributed over the mesh area."""
    rng = np.random.default_rng(rng)
    area = mesh.areas()
    f = rng.choice(len(area), size=n, p=area / area.sum())
    r1, r2 = rng.uniform(size=(2, n))
    s = np.sqrt(r1)
    w = np.stack([1 - s, s * (1 - r2), s * r2], axis=1)
    return np.einsum("nk,nkj->nj", w, mesh.vertices[mesh.triangles[f]])
