"""Geometric evaluation: nose-tip cropping, similarity ICP, point-to-plane and
point-to-point RMSE."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)

BVH_THRESHOLD = 10_000   # triangles; at or above this, queries go through the BVH
CROP_RADIUS = 95.0       # mm around the nose tip
TRIM_FRACTION = 0.1
TIE_RTOL = 1e-10         # squared distances this close count as a tie; lowest triangle wins


def _tie_bound(d2):
    return d2 * (1.0 + TIE_RTOL) + 1e-300


class DegenerateAlignmentError(ValueError):
    pass


@dataclass
class Mesh:
    vertices: np.ndarray
    triangles: np.ndarray
    nose_tip: int | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    def triangle_corners(self):
        t = self.triangles
        v = self.vertices
        return v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]

    def triangle_normals(self) -> np.ndarray:
        a, b, c = self.triangle_corners()
        n = np.cross(b - a, c - a)
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return np.divide(n, norm, out=np.zeros_like(n), where=norm > 0)


def crop_mesh(mesh: Mesh, center, radius: float = CROP_RADIUS) -> Mesh:
    """Keep vertices within ``radius`` of ``center`` and triangles whose three corners survive."""
    keep = np.linalg.norm(mesh.vertices - np.asarray(center, dtype=np.float64), axis=1) <= radius
    if not keep.any():
        raise ValueError("crop removed every vertex")
    remap = np.full(len(mesh.vertices), -1, dtype=np.int64)
    remap[keep] = np.arange(keep.sum())
    tri_keep = keep[mesh.triangles].all(axis=1)
    nose = None
    if mesh.nose_tip is not None and keep[mesh.nose_tip]:
        nose = int(remap[mesh.nose_tip])
    return Mesh(mesh.vertices[keep], remap[mesh.triangles[tri_keep]], nose)


# ------------------------------------------------------------ closest points

def closest_point_on_triangles(p, a, b, c) -> np.ndarray:
    """Closest points on triangles (a, b, c) to points p; all arrays broadcast to (..., 3).

    Region tests follow the standard Voronoi-region walk over vertices, edges
    and face.
    """
    p, a, b, c = np.broadcast_arrays(*(np.asarray(v, dtype=np.float64) for v in (p, a, b, c)))
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("...i,...i", ab, ap)
    d2 = np.einsum("...i,...i", ac, ap)
    bp = p - b
    d3 = np.einsum("...i,...i", ab, bp)
    d4 = np.einsum("...i,...i", ac, bp)
    cp = p - c
    d5 = np.einsum("...i,...i", ab, cp)
    d6 = np.einsum("...i,...i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v_face = vb / denom
        w_face = vc / denom
        out = a + ab * v_face[..., None] + ac * w_face[..., None]
        done = np.zeros(p.shape[:-1], dtype=bool)

        def put(cond, val):
            nonlocal out, done
            sel = cond & ~done
            out = np.where(sel[..., None], val, out)
            done = done | sel

        put((d1 <= 0) & (d2 <= 0), a)
        put((d3 >= 0) & (d4 <= d3), b)
        put((d6 >= 0) & (d5 <= d6), c)
        v_ab = d1 / (d1 - d3)
        put((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + ab * v_ab[..., None])
        w_ac = d2 / (d2 - d6)
        put((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + ac * w_ac[..., None])
        w_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        put((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + (c - b) * w_bc[..., None])
    return out


def _nearest_exhaustive(points, a, b, c, chunk: int = 256):
    n = len(points)
    best_pt = np.empty((n, 3))
    best_tri = np.empty(n, dtype=np.int64)
    best_d2 = np.empty(n)
    for s in range(0, n, chunk):
        P = points[s:s + chunk, None, :]
        q = closest_point_on_triangles(P, a[None], b[None], c[None])
        d2 = np.sum((q - P) ** 2, axis=-1)
        # first index within the tie bound of the minimum
        i = np.argmax(d2 <= _tie_bound(d2.min(axis=1, keepdims=True)), axis=1)
        r = np.arange(len(i))
        best_tri[s:s + chunk] = i
        best_pt[s:s + chunk] = q[r, i]
        best_d2[s:s + chunk] = d2[r, i]
    return best_pt, best_tri, best_d2


@dataclass
class _Node:
    lo: np.ndarray
    hi: np.ndarray
    left: "_Node | None" = None
    right: "_Node | None" = None
    tris: np.ndarray | None = None


class TriangleBVH:
    """Axis-aligned bounding-volume hierarchy over triangles for exact
    nearest-surface queries. Ties go to the lowest triangle index, matching
    the exhaustive search."""

    def __init__(self, mesh: Mesh, leaf_size: int = 8):
        self.a, self.b, self.c = mesh.triangle_corners()
        corners = np.stack([self.a, self.b, self.c], axis=1)
        self.lo = corners.min(axis=1)
        self.hi = corners.max(axis=1)
        self.centroid = corners.mean(axis=1)
        self.leaf_size = leaf_size
        self.root = self._build(np.arange(len(self.a)))

    def _build(self, idx) -> _Node:
        node = _Node(self.lo[idx].min(axis=0), self.hi[idx].max(axis=0))
        if len(idx) <= self.leaf_size:
            node.tris = np.sort(idx)
            return node
        cen = self.centroid[idx]
        axis = int(np.argmax(cen.max(axis=0) - cen.min(axis=0)))
        order = idx[np.argsort(cen[:, axis], kind="stable")]
        half = len(order) // 2
        node.left = self._build(order[:half])
        node.right = self._build(order[half:])
        return node

    @staticmethod
    def _box_d2(p, lo, hi) -> float:
        d = np.maximum(np.maximum(lo - p, 0.0), p - hi)
        return float(d @ d)

    def query(self, p):
        p = np.asarray(p, dtype=np.float64)
        best_d2 = np.inf
        cands = []  # (d2, tri, point) within the tie bound of the running minimum
        stack = [self.root]
        while stack:
            node = stack.pop()
            if self._box_d2(p, node.lo, node.hi) > _tie_bound(best_d2):
                continue
            if node.tris is not None:
                t = node.tris
                q = closest_point_on_triangles(p[None], self.a[t], self.b[t], self.c[t])
                d2 = np.sum((q - p) ** 2, axis=1)
                best_d2 = min(best_d2, float(d2.min()))
                cands += [(d2[k], int(t[k]), q[k]) for k in range(len(t)) if d2[k] <= _tie_bound(best_d2)]
                continue
            dl = self._box_d2(p, node.left.lo, node.left.hi)
            dr = self._box_d2(p, node.right.lo, node.right.hi)
            # push the farther child first so the nearer one is explored first
            if dl <= dr:
                stack += [node.right, node.left]
            else:
                stack += [node.left, node.right]
        bound = _tie_bound(best_d2)
        d2, tri, q = min((c for c in cands if c[0] <= bound), key=lambda c: c[1])
        return q, tri, d2

    def query_many(self, points):
        points = np.asarray(points, dtype=np.float64)
        pts = np.empty((len(points), 3))
        tri = np.empty(len(points), dtype=np.int64)
        d2 = np.empty(len(points))
        for i, p in enumerate(points):
            pts[i], tri[i], d2[i] = self.query(p)
        return pts, tri, d2


def nearest_surface(points, mesh: Mesh, method: str = "auto", bvh: TriangleBVH | None = None):
    """Closest surface points, their triangle indices and squared distances."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(mesh.triangles) == 0:
        raise ValueError("target mesh has no triangles")
    if method == "auto":
        method = "bvh" if len(mesh.triangles) >= BVH_THRESHOLD or bvh is not None else "exhaustive"
    if method == "bvh":
        return (bvh or TriangleBVH(mesh)).query_many(points)
    if method != "exhaustive":
        raise ValueError(f"unknown nearest-surface method {method!r}")
    return _nearest_exhaustive(points, *mesh.triangle_corners())


def point_to_plane_distances(points, mesh: Mesh, method: str = "auto", bvh=None) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    q, tri, _ = nearest_surface(points, mesh, method, bvh)
    n = mesh.triangle_normals()[tri]
    return np.abs(np.sum((points - q) * n, axis=1))


def point_to_plane_rmse(points, mesh: Mesh, method: str = "auto") -> float:
    d = point_to_plane_distances(points, mesh, method)
    return float(np.sqrt(np.mean(d * d)))


def point_to_point_rmse(source, target) -> float:
    d, _ = cKDTree(np.asarray(target, dtype=np.float64)).query(np.asarray(source, dtype=np.float64))
    return float(np.sqrt(np.mean(d * d)))


# -------------------------------------------------------------------- ICP

def umeyama(src, dst, with_scale: bool = True):
    """Least-squares similarity (s, R, t) with dst ~ s R src + t."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    var_s = np.mean(np.sum(xs * xs, axis=1))
    cov = xd.T @ xs / len(src)
    U, D, Vt = np.linalg.svd(cov)
    if var_s <= 1e-18 or D[1] <= 1e-12 * max(D[0], 1e-300):
        raise DegenerateAlignmentError("degenerate cross-covariance (collinear or coincident points)")
    S = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2] = -1.0
    R = (U * S) @ Vt
    s = float(np.sum(D * S) / var_s) if with_scale else 1.0
    t = mu_d - s * R @ mu_s
    return s, R, t


@dataclass
class ICPResult:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray
    rmse_trace: list = field(default_factory=list)
    converged: bool = False

    def apply(self, points) -> np.ndarray:
        return self.scale * np.asarray(points) @ self.rotation.T + self.translation


def _trimmed(d2: np.ndarray, trim: float) -> np.ndarray:
    n_keep = len(d2) - int(np.floor(trim * len(d2)))
    return np.argsort(d2, kind="stable")[:max(n_keep, 3)]


def _initial_candidates(src, dst):
    yield 1.0, np.eye(3), np.zeros(3)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    cs = np.cov((src - mu_s).T, bias=True)
    cd = np.cov((dst - mu_d).T, bias=True)
    ws, Us = np.linalg.eigh(cs)
    wd, Ud = np.linalg.eigh(cd)
    s = float(np.sqrt(wd.sum() / ws.sum())) if ws.sum() > 0 else 1.0
    for signs in ((1, 1, 1), (1, -1, -1), (-1, 1, -1), (-1, -1, 1)):
        R = (Ud * np.array(signs, dtype=float)) @ Us.T
        if np.linalg.det(R) < 0:
            R = (Ud * -np.array(signs, dtype=float)) @ Us.T
        yield s, R, mu_d - s * R @ mu_s


def icp_isotropic(source, target: Mesh, max_iter: int = 100, tol: float = 1e-6,
                  trim: float = TRIM_FRACTION, init: str = "pca", method: str = "auto") -> ICPResult:
    """Trimmed point-to-surface ICP with a similarity transform (isotropic scale).

    ``init`` is "identity", "centroid" or "pca" (best of identity and the four
    proper principal-axis alignments by initial trimmed RMSE).
    """
    src = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    if len(src) < 3:
        raise DegenerateAlignmentError("ICP needs at least 3 source points")
    bvh = TriangleBVH(target) if (method == "bvh" or (method == "auto" and len(target.triangles) >= BVH_THRESHOLD)) else None
    m = "bvh" if bvh is not None else "exhaustive"

    def trimmed_rmse(s, R, t):
        q, _, d2 = nearest_surface(s * src @ R.T + t, target, m, bvh)
        keep = _trimmed(d2, trim)
        return float(np.sqrt(np.mean(d2[keep]))), q, keep

    if init == "identity":
        s, R, t = 1.0, np.eye(3), np.zeros(3)
    elif init == "centroid":
        s, R, t = 1.0, np.eye(3), target.vertices.mean(axis=0) - src.mean(axis=0)
    elif init == "pca":
        s, R, t = min(_initial_candidates(src, target.vertices), key=lambda c: trimmed_rmse(*c)[0])
    else:
        raise ValueError(f"unknown ICP init {init!r}")

    result = ICPResult(s, R, t)
    prev = np.inf
    for _ in range(max_iter):
        rmse, q, keep = trimmed_rmse(s, R, t)
        result.rmse_trace.append(rmse)
        result.scale, result.rotation, result.translation = s, R, t
        if prev - rmse < tol:
            result.converged = True
            break
        prev = rmse
        s, R, t = umeyama(src[keep], q[keep])
    if not result.converged:
        log.debug("ICP stopped after %d iterations without meeting the tolerance", max_iter)
    return result


# --------------------------------------------------------------- protocol

def shape_error(pred_vertices, gt: Mesh, radius: float = CROP_RADIUS, metric: str = "plane") -> float:
    """Crop the ground truth around its nose tip, align the prediction with
    similarity ICP and report the RMSE in mm."""
    if gt.nose_tip is None:
        raise ValueError("ground-truth mesh needs a nose-tip index")
    cropped = crop_mesh(gt, gt.vertices[gt.nose_tip], radius)
    icp = icp_isotropic(pred_vertices, cropped)
    aligned = icp.apply(pred_vertices)
    if metric == "point":
        return point_to_point_rmse(aligned, cropped.vertices)
    return point_to_plane_rmse(aligned, cropped)
