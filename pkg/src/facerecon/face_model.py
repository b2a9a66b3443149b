"""Linear 3D morphable face model: container, evaluation, and binary I/O.

Vertex data is stored flat and interleaved (x0, y0, z0, x1, ...), the same
layout the bases use along their rows. Units are millimeters for geometry and
[0, 1] RGB for albedo.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

MAGIC = b"M3DM"
VERSION = 1

# 68-point convention: nose (27-35) and inner mouth (60-67) get weight 20.
NOSE_LANDMARKS = tuple(range(27, 36))
INNER_MOUTH_LANDMARKS = tuple(range(60, 68))
HEAVY_LANDMARK_WEIGHT = 20.0
NOSE_TIP_LANDMARK = 30

FULL_SCALE_DIMS = {"K_id": 80, "K_exp": 64, "K_tex": 80}


class ModelFormatError(ValueError):
    """Base class for face-model container failures."""


class BadMagicError(ModelFormatError):
    pass


class VersionMismatchError(ModelFormatError):
    pass


class TruncatedContainerError(ModelFormatError):
    pass


class InvariantViolationError(ModelFormatError):
    pass


class DimensionError(ValueError):
    pass


def default_landmark_weights(n: int = 68) -> np.ndarray:
    w = np.ones(n)
    if n == 68:
        w[list(NOSE_LANDMARKS + INNER_MOUTH_LANDMARKS)] = HEAVY_LANDMARK_WEIGHT
    return w


@dataclass(frozen=True, eq=False)
class MorphableModel:
    mean_shape: np.ndarray      # (3V,)
    mean_texture: np.ndarray    # (3V,)
    basis_id: np.ndarray        # (3V, K_id)
    basis_exp: np.ndarray       # (3V, K_exp)
    basis_tex: np.ndarray       # (3V, K_tex)
    triangles: np.ndarray       # (T, 3) int
    landmark_vertices: np.ndarray
    landmark_weights: np.ndarray
    skin_region_vertices: np.ndarray
    nose_tip_vertex: int

    @property
    def n_vertices(self) -> int:
        return self.mean_shape.shape[0] // 3

    @property
    def n_id(self) -> int:
        return self.basis_id.shape[1]

    @property
    def n_exp(self) -> int:
        return self.basis_exp.shape[1]

    @property
    def n_tex(self) -> int:
        return self.basis_tex.shape[1]

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.n_id, self.n_exp, self.n_tex

    def validate(self) -> None:
        """Raise InvariantViolationError on the first broken invariant."""
        V = self.n_vertices
        if self.mean_shape.shape != (3 * V,) or self.mean_texture.shape != (3 * V,):
            raise InvariantViolationError("mean shape/texture must both have length 3V")
        for name in ("basis_id", "basis_exp", "basis_tex"):
            b = getattr(self, name)
            if b.ndim != 2 or b.shape[0] != 3 * V or b.shape[1] < 1:
                raise InvariantViolationError(f"{name} has shape {b.shape}, expected (3V={3 * V}, K>=1)")
        _check_indices("triangle", self.triangles.ravel(), V)
        _check_indices("landmark", self.landmark_vertices, V)
        _check_indices("skin-region", self.skin_region_vertices, V)
        _check_indices("nose-tip", np.array([self.nose_tip_vertex]), V)
        if self.landmark_weights.shape != self.landmark_vertices.shape:
            raise InvariantViolationError("one weight per landmark required")
        if np.any(self.landmark_weights <= 0):
            raise InvariantViolationError("landmark weights must be positive")
        if np.any(self.mean_texture < 0) or np.any(self.mean_texture > 1):
            raise InvariantViolationError("mean texture outside [0, 1]")
        arrays = (self.mean_shape, self.mean_texture, self.basis_id, self.basis_exp, self.basis_tex)
        if not all(np.all(np.isfinite(a)) for a in arrays):
            raise InvariantViolationError("non-finite model data")


def _check_indices(kind: str, idx: np.ndarray, V: int) -> None:
    bad = idx[(idx < 0) | (idx >= V)]
    if bad.size:
        raise InvariantViolationError(f"{kind} index {int(bad[0])} out of range for V={V}")


@dataclass
class CoefficientVector:
    """The unknowns of one image: identity, expression, texture, lighting, pose.

    pose = (pitch, yaw, roll) in radians followed by translation in mm.
    """
    alpha: np.ndarray
    beta: np.ndarray
    delta: np.ndarray
    gamma: np.ndarray = field(default_factory=lambda: np.zeros(9))
    pose: np.ndarray = field(default_factory=lambda: np.zeros(6))

    BLOCKS = ("alpha", "beta", "delta", "gamma", "pose")

    def __post_init__(self):
        for name in self.BLOCKS:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64).ravel())
        if self.gamma.size != 9:
            raise DimensionError(f"gamma must have 9 entries, got {self.gamma.size}")
        if self.pose.size != 6:
            raise DimensionError(f"pose must have 6 entries, got {self.pose.size}")

    @classmethod
    def zeros(cls, n_id: int, n_exp: int, n_tex: int) -> "CoefficientVector":
        return cls(np.zeros(n_id), np.zeros(n_exp), np.zeros(n_tex))

    @classmethod
    def for_model(cls, model: MorphableModel, gamma=None, pose=None) -> "CoefficientVector":
        x = cls.zeros(*model.dims)
        if gamma is not None:
            x.gamma = np.asarray(gamma, dtype=np.float64).copy()
        if pose is not None:
            x.pose = np.asarray(pose, dtype=np.float64).copy()
        return x

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.alpha.size, self.beta.size, self.delta.size

    def __len__(self) -> int:
        return sum(self.dims) + 15

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.alpha, self.beta, self.delta, self.gamma, self.pose])

    @classmethod
    def unflatten(cls, flat, dims: tuple[int, int, int]) -> "CoefficientVector":
        flat = np.asarray(flat, dtype=np.float64)
        ki, ke, kt = dims
        if flat.size != ki + ke + kt + 15:
            raise DimensionError(f"flat vector has {flat.size} entries, expected {ki + ke + kt + 15}")
        splits = np.cumsum([ki, ke, kt, 9])
        a, b, d, g, p = np.split(flat, splits)
        return cls(a.copy(), b.copy(), d.copy(), g.copy(), p.copy())

    def block_slices(self) -> dict[str, slice]:
        return block_slices(self.dims)

    def copy(self) -> "CoefficientVector":
        return CoefficientVector.unflatten(self.flatten(), self.dims)

    def to_json(self) -> dict:
        return {name: getattr(self, name).tolist() for name in self.BLOCKS}

    @classmethod
    def from_json(cls, data: dict) -> "CoefficientVector":
        return cls(*(data[name] for name in cls.BLOCKS))


def block_slices(dims: tuple[int, int, int]) -> dict[str, slice]:
    ki, ke, kt = dims
    o = np.cumsum([0, ki, ke, kt, 9, 6])
    return {name: slice(int(o[i]), int(o[i + 1])) for i, name in enumerate(CoefficientVector.BLOCKS)}


def evaluate_shape(model: MorphableModel, alpha, beta) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if alpha.shape != (model.n_id,) or beta.shape != (model.n_exp,):
        raise DimensionError(
            f"alpha/beta lengths {alpha.shape}/{beta.shape} do not match bases ({model.n_id}, {model.n_exp})")
    S = model.mean_shape + model.basis_id @ alpha + model.basis_exp @ beta
    return S.reshape(-1, 3)


def evaluate_texture_raw(model: MorphableModel, delta) -> np.ndarray:
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != (model.n_tex,):
        raise DimensionError(f"delta length {delta.shape} does not match K_tex={model.n_tex}")
    return (model.mean_texture + model.basis_tex @ delta).reshape(-1, 3)


def evaluate_texture(model: MorphableModel, delta) -> tuple[np.ndarray, int]:
    """Per-vertex albedo clamped to [0, 1], plus the number of clamped entries."""
    raw = evaluate_texture_raw(model, delta)
    clamped = np.clip(raw, 0.0, 1.0)
    n_clamped = int(np.count_nonzero((raw < 0.0) | (raw > 1.0)))
    if n_clamped:
        log.debug("texture clamp touched %d entries", n_clamped)
    return clamped, n_clamped


def face_normals(positions: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Un-normalized face normals; their length is twice the triangle area."""
    p0 = positions[triangles[:, 0]]
    return np.cross(positions[triangles[:, 1]] - p0, positions[triangles[:, 2]] - p0)


def vertex_normals(positions, triangles, return_flags: bool = False):
    """Area-weighted unit vertex normals.

    Vertices with no incident area (isolated or all-degenerate faces) fall back
    to (0, 0, 1); those are reported when ``return_flags`` is set.
    """
    positions = np.asarray(positions, dtype=np.float64)
    triangles = np.asarray(triangles)
    V = positions.shape[0]
    fn = face_normals(positions, triangles)
    acc = np.zeros((V, 3))
    for k in range(3):
        for c in range(3):
            acc[:, c] += np.bincount(triangles[:, k], weights=fn[:, c], minlength=V)
    norm = np.linalg.norm(acc, axis=1)
    degenerate = norm <= 1e-300
    out = np.empty_like(acc)
    out[~degenerate] = acc[~degenerate] / norm[~degenerate, None]
    out[degenerate] = (0.0, 0.0, 1.0)
    if return_flags:
        return out, degenerate
    return out


def vertex_normals_backward(positions, triangles, grad_normals) -> np.ndarray:
    """Vector-Jacobian product of ``vertex_normals`` w.r.t. the positions."""
    V = positions.shape[0]
    fn = face_normals(positions, triangles)
    acc = np.zeros((V, 3))
    for k in range(3):
        for c in range(3):
            acc[:, c] += np.bincount(triangles[:, k], weights=fn[:, c], minlength=V)
    norm = np.linalg.norm(acc, axis=1)
    ok = norm > 1e-300
    n = np.zeros_like(acc)
    n[ok] = acc[ok] / norm[ok, None]
    g_acc = np.zeros_like(acc)
    g = grad_normals[ok]
    g_acc[ok] = (g - n[ok] * np.sum(n[ok] * g, axis=1, keepdims=True)) / norm[ok, None]
    g_fn = g_acc[triangles[:, 0]] + g_acc[triangles[:, 1]] + g_acc[triangles[:, 2]]
    p0 = positions[triangles[:, 0]]
    a = positions[triangles[:, 1]] - p0
    b = positions[triangles[:, 2]] - p0
    g_a = np.cross(b, g_fn)
    g_b = np.cross(g_fn, a)
    grad = np.zeros((V, 3))
    for c in range(3):
        grad[:, c] += np.bincount(triangles[:, 1], weights=g_a[:, c], minlength=V)
        grad[:, c] += np.bincount(triangles[:, 2], weights=g_b[:, c], minlength=V)
        grad[:, c] -= np.bincount(triangles[:, 0], weights=g_a[:, c] + g_b[:, c], minlength=V)
    return grad


# ---------------------------------------------------------------- container I/O

_HEADER = struct.Struct("<4s7I")


def save_model(model: MorphableModel, path) -> None:
    model.validate()
    V = model.n_vertices
    parts = [_HEADER.pack(MAGIC, VERSION, V, model.n_id, model.n_exp, model.n_tex,
                          model.triangles.shape[0], model.landmark_vertices.size)]
    f64 = lambda a: np.ascontiguousarray(a, dtype="<f8").tobytes()
    u32 = lambda a: np.ascontiguousarray(a, dtype="<u4").tobytes()
    parts += [f64(model.mean_shape), f64(model.mean_texture),
              f64(model.basis_id.T), f64(model.basis_exp.T), f64(model.basis_tex.T)]  # column-major
    parts += [u32(model.triangles.ravel()), u32(model.landmark_vertices), f64(model.landmark_weights)]
    parts += [u32([model.skin_region_vertices.size]), u32(model.skin_region_vertices),
              u32([model.nose_tip_vertex])]
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, dtype: str, count: int) -> np.ndarray:
        nbytes = np.dtype(dtype).itemsize * count
        if self.pos + nbytes > len(self.buf):
            raise TruncatedContainerError(
                f"truncated container: need {nbytes} bytes at offset {self.pos}, file has {len(self.buf)}")
        out = np.frombuffer(self.buf, dtype=dtype, count=count, offset=self.pos).copy()
        self.pos += nbytes
        return out


def load_model(path) -> MorphableModel:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < _HEADER.size:
        if not MAGIC.startswith(buf[:4]):
            raise BadMagicError(f"bad magic {buf[:4]!r}")
        raise TruncatedContainerError("truncated container: header incomplete")
    magic, version, V, ki, ke, kt, T, N = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise VersionMismatchError(f"container version {version}, expected {VERSION}")
    r = _Reader(buf)
    r.pos = _HEADER.size
    mean_shape = r.take("<f8", 3 * V)
    mean_texture = r.take("<f8", 3 * V)
    bid = r.take("<f8", 3 * V * ki).reshape(ki, 3 * V).T.copy()
    bexp = r.take("<f8", 3 * V * ke).reshape(ke, 3 * V).T.copy()
    btex = r.take("<f8", 3 * V * kt).reshape(kt, 3 * V).T.copy()
    tris = r.take("<u4", 3 * T).reshape(T, 3).astype(np.int64)
    lmk = r.take("<u4", N).astype(np.int64)
    lmk_w = r.take("<f8", N)
    n_skin = int(r.take("<u4", 1)[0])
    skin = r.take("<u4", n_skin).astype(np.int64)
    nose = int(r.take("<u4", 1)[0])
    if r.pos != len(buf):
        raise ModelFormatError(f"{len(buf) - r.pos} trailing bytes after container payload")
    model = MorphableModel(mean_shape, mean_texture, bid, bexp, btex, tris, lmk, lmk_w, skin, nose)
    model.validate()
    return model


# ------------------------------------------------------------- synthetic models

def _similarity_subspace(points: np.ndarray) -> np.ndarray:
    """Orthonormal basis (3V x 7) of infinitesimal similarity motions at ``points``."""
    V = points.shape[0]
    cols = []
    for axis in range(3):
        t = np.zeros((V, 3))
        t[:, axis] = 1.0
        cols.append(t.ravel())
        w = np.zeros(3)
        w[axis] = 1.0
        cols.append(np.cross(w, points).ravel())
    cols.append(points.ravel())
    q, _ = np.linalg.qr(np.stack(cols, axis=1))
    return q


def _smooth_fields(xy: np.ndarray, n: int, rng: np.random.Generator, order: int = 3) -> np.ndarray:
    """``n`` random smooth scalar fields over normalized 2D coordinates."""
    u, v = xy[:, 0], xy[:, 1]
    feats = [u ** i * v ** j for i in range(order + 1) for j in range(order + 1 - i)]
    for f in (1.0, 2.0):
        feats += [np.cos(np.pi * f * u), np.sin(np.pi * f * u), np.cos(np.pi * f * v), np.sin(np.pi * f * v)]
    F = np.stack(feats, axis=1)
    return F @ rng.standard_normal((F.shape[1], n))


def synthesize_toy_model(V: int = 100, K_id: int = 8, K_exp: int = 6, K_tex: int = 8,
                         seed: int = 0) -> MorphableModel:
    """Deterministic face-like test model: a bumped spherical cap facing -Z.

    The cap lies on a sphere of radius 90 mm with a nose bump at its apex, so
    that an identity pose at t = (0, 0, 600) presents the face to the camera.
    Shape bases carry no rigid/scale component and identity and expression
    bases are mutually orthogonal.
    """
    from scipy.spatial import Delaunay

    if V < 4 or min(K_id, K_exp, K_tex) < 1:
        raise ValueError("need V >= 4 and every K >= 1")
    rng = np.random.default_rng(seed)
    radius, disk = 90.0, 55.0
    k = np.arange(V)
    r = disk * np.sqrt((k + 0.5) / V)
    theta = k * np.pi * (3.0 - np.sqrt(5.0))
    x = r * np.cos(theta)
    y = 1.15 * r * np.sin(theta)
    rho2 = x ** 2 + y ** 2
    z = -np.sqrt(radius ** 2 - rho2) - 14.0 * np.exp(-rho2 / (2 * 11.0 ** 2))
    z += 2.0 * np.sin(x / 17.0 + rng.uniform(0, 2 * np.pi)) * np.cos(y / 23.0)
    pts = np.stack([x, y, z], axis=1)
    pts -= pts.mean(axis=0)

    tris = Delaunay(pts[:, :2]).simplices.astype(np.int64)
    fn = face_normals(pts, tris)
    flip = fn[:, 2] > 0
    tris[flip] = tris[flip][:, [0, 2, 1]]

    xy = np.stack([x / disk, y / (1.15 * disk)], axis=1)
    rigid = _similarity_subspace(pts)
    shape_raw = np.empty((3 * V, K_id + K_exp))
    for c in range(3):
        shape_raw[c::3] = _smooth_fields(xy, K_id + K_exp, rng)
    # expression fields concentrate on the lower face
    lower = 1.0 / (1.0 + np.exp(4.0 * xy[:, 1]))
    shape_raw[:, K_id:] *= np.repeat(lower, 3)[:, None]
    shape_raw -= rigid @ (rigid.T @ shape_raw)
    q, _ = np.linalg.qr(shape_raw)
    q = q[:, :K_id + K_exp]
    sd_id = 4.0 * 0.85 ** np.arange(K_id)
    sd_exp = 3.0 * 0.85 ** np.arange(K_exp)
    basis_id = q[:, :K_id] * sd_id * np.sqrt(V)
    basis_exp = q[:, K_id:] * sd_exp * np.sqrt(V)

    skin_tone = np.array([0.78, 0.58, 0.48])
    # albedo varies mostly in brightness along the skin tone, with a little chroma
    fields = [_smooth_fields(xy, K_tex, rng, order=2) for _ in range(3)]
    lum = sum(fields) / np.sqrt(3.0)
    tex_raw = np.empty((3 * V, K_tex))
    for c in range(3):
        tex_raw[c::3] = skin_tone[c] / skin_tone.mean() * lum + 0.3 * fields[c]
    qt, _ = np.linalg.qr(tex_raw)
    basis_tex = qt[:, :K_tex] * (0.06 * 0.85 ** np.arange(K_tex)) * np.sqrt(V)

    mean_tex = skin_tone + 0.03 * np.tanh(_smooth_fields(xy, 3, rng, order=2))
    mean_tex = np.clip(mean_tex, 0.0, 1.0).ravel()

    nose = int(np.argmin(pts[:, 2]))
    n_lmk = 68
    lmk = np.full(n_lmk, -1, dtype=np.int64)
    # nose landmarks: the tip and its nearest neighbours; inner mouth: a lower-face cluster
    near_nose = np.argsort(np.linalg.norm(pts[:, :2] - pts[nose, :2], axis=1), kind="stable")
    near_nose = near_nose[near_nose != nose]
    nose_slots = [i for i in NOSE_LANDMARKS if i != NOSE_TIP_LANDMARK]
    lmk[NOSE_TIP_LANDMARK] = nose
    lmk[nose_slots] = np.resize(near_nose, len(nose_slots))
    mouth_center = np.array([0.0, -0.45 * 1.15 * disk])
    near_mouth = np.argsort(np.linalg.norm(pts[:, :2] - mouth_center, axis=1), kind="stable")
    near_mouth = near_mouth[~np.isin(near_mouth, lmk)]
    if near_mouth.size == 0:
        near_mouth = np.arange(V)
    lmk[list(INNER_MOUTH_LANDMARKS)] = np.resize(near_mouth, len(INNER_MOUTH_LANDMARKS))
    free = np.flatnonzero(lmk < 0)
    pool = np.setdiff1d(np.arange(V), lmk)
    lmk[free] = rng.choice(pool if pool.size else np.arange(V), size=free.size, replace=pool.size < free.size)
    skin = np.flatnonzero(rho2 <= (0.75 * disk) ** 2).astype(np.int64)
    if skin.size < 2:
        skin = np.arange(V, dtype=np.int64)

    model = MorphableModel(pts.ravel(), mean_tex, basis_id, basis_exp, basis_tex, tris,
                           lmk, default_landmark_weights(n_lmk), skin, nose)
    model.validate()
    return model
