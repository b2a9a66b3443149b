"""Hybrid reconstruction loss: photometric, landmark, perceptual, coefficient
prior and texture flattening terms, each with its analytic gradient."""
from __future__ import annotations

import functools
import logging
import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import face_model as fm
from .rasterizer import RenderBuffer, render_backward, render_scene
from .scene import Camera

log = logging.getLogger(__name__)

PHOTO_EPS = 1e-9  # inside the sqrt of the per-pixel norm, gradient only


@dataclass(frozen=True)
class LossWeights:
    photo: float = 1.9
    lan: float = 1.6e-3
    per: float = 0.2
    coef: float = 3e-4
    tex: float = 5.0
    omega_alpha: float = 1.0
    omega_beta: float = 0.8
    omega_gamma: float = 1.7e-3  # applies to the texture coefficients delta
    photo_norm: str = "l2"       # "l2" or "squared"

    def __post_init__(self):
        for k, v in asdict(self).items():
            if k != "photo_norm" and not v >= 0:
                raise ValueError(f"loss weight {k} must be non-negative, got {v}")
        if self.photo_norm not in ("l2", "squared"):
            raise ValueError("photo_norm must be 'l2' or 'squared'")

    def with_(self, **kw) -> "LossWeights":
        return replace(self, **kw)


# weights for the label-free multi-image stage; the identity term is the perceptual one
MULTI_IMAGE_WEIGHTS = LossWeights(photo=1.9, lan=1.6e-3, per=0.1)


@dataclass
class LossBreakdown:
    photo: float
    lan: float
    per: float
    coef: float
    tex: float
    total: float

    def to_json(self) -> dict:
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in asdict(self).items()}


# ------------------------------------------------------------------ embedders

def _area_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Box-filter resampling matrix (n_out x n_in) with exact overlap weights."""
    edges_out = np.arange(n_out + 1) * (n_in / n_out)
    D = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo, hi = edges_out[i], edges_out[i + 1]
        for j in range(int(np.floor(lo)), min(n_in, int(np.ceil(hi)))):
            D[i, j] = min(hi, j + 1) - max(lo, j)
        D[i] /= D[i].sum()
    return D


LUMA = np.array([0.299, 0.587, 0.114])


class RandomProjectionEmbedder:
    """Grayscale, box-downsample to ``size`` x ``size``, then a fixed random
    projection with orthonormal rows. Linear, so its pullback is exact."""

    def __init__(self, size: int = 32, dim: int = 128, seed: int = 0):
        self.size = size
        self.dim = dim
        self.seed = seed
        rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(rng.standard_normal((size * size, dim)))
        self.Q = q.T.copy()  # (dim, size^2)

    @functools.lru_cache(maxsize=8)
    def _resamplers(self, H: int, W: int):
        return _area_matrix(self.size, H), _area_matrix(self.size, W)

    def embed(self, image) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        Dr, Dc = self._resamplers(*image.shape[:2])
        gray = image @ LUMA
        return self.Q @ (Dr @ gray @ Dc.T).ravel()

    def backward(self, image, grad_feature) -> np.ndarray:
        """d<grad_feature, embed(image)>/d image."""
        H, W = np.shape(image)[:2]
        Dr, Dc = self._resamplers(H, W)
        g_small = (self.Q.T @ grad_feature).reshape(self.size, self.size)
        g_gray = Dr.T @ g_small @ Dc
        return g_gray[..., None] * LUMA

    def spec(self) -> dict:
        return {"kind": "random_projection", "size": self.size, "dim": self.dim, "seed": self.seed}


def make_embedder(spec: dict | None):
    spec = dict(spec or {})
    kind = spec.pop("kind", "random_projection")
    if kind != "random_projection":
        raise ValueError(f"unknown embedder kind {kind!r}")
    return RandomProjectionEmbedder(**spec)


# ------------------------------------------------------------------ terms

def _check_same_size(I, buf: RenderBuffer):
    if I.shape[:2] != buf.mask.shape or I.shape[-1] != 3:
        raise ValueError(f"image shape {I.shape} does not match render {buf.mask.shape}")


def photometric_grad(I, buf: RenderBuffer, A, norm: str = "l2"):
    """Attention-weighted mean color residual over the rendered face region.

    Returns (loss, dloss/d rendered colors).
    """
    I = np.asarray(I, dtype=np.float64)
    _check_same_size(I, buf)
    A = np.asarray(A, dtype=np.float64)
    if A.shape != buf.mask.shape:
        raise ValueError("attention mask shape does not match render")
    grad = np.zeros_like(I)
    M = buf.mask
    Am = A[M]
    denom = Am.sum()
    if not M.any() or denom <= 0:
        log.warning("photometric loss over an empty face region is defined as 0")
        return 0.0, grad
    r = I[M] - buf.color[M]
    sq = np.sum(r * r, axis=-1)
    if norm == "squared":
        value = float(Am @ sq / denom)
        grad[M] = (-2.0 * Am / denom)[:, None] * r
    else:
        value = float(Am @ np.sqrt(sq) / denom)
        grad[M] = (-Am / (denom * np.sqrt(sq + PHOTO_EPS)))[:, None] * r
    return value, grad


def photometric_loss(I, buf: RenderBuffer, A, norm: str = "l2") -> float:
    return photometric_grad(I, buf, A, norm)[0]


def landmark_grad(q, q_proj, weights):
    q = np.asarray(q, dtype=np.float64)
    q_proj = np.asarray(q_proj, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if q.shape != q_proj.shape or w.shape != q.shape[:1]:
        raise ValueError(f"landmark count mismatch: {q.shape}, {q_proj.shape}, {w.shape}")
    N = q.shape[0]
    d = q_proj - q
    value = float(np.sum(w * np.sum(d * d, axis=1)) / N)
    return value, (2.0 / N) * w[:, None] * d


def landmark_loss(q, q_proj, weights) -> float:
    return landmark_grad(q, q_proj, weights)[0]


def cosine_distance_grad(a, b):
    """1 - cos(a, b) and its gradient w.r.t. b."""
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("zero-norm feature vector; the embedder is degenerate for this input")
    cos = float(a @ b / (na * nb))
    return 1.0 - cos, -(a / (na * nb) - cos * b / nb ** 2)


def perceptual_loss(embedder, I, I_rendered) -> float:
    return cosine_distance_grad(embedder.embed(I), embedder.embed(I_rendered))[0]


def coefficient_regularization(alpha, beta, delta, weights: LossWeights = LossWeights()) -> float:
    alpha, beta, delta = (np.asarray(v, dtype=np.float64) for v in (alpha, beta, delta))
    return float(weights.omega_alpha * alpha @ alpha + weights.omega_beta * beta @ beta
                 + weights.omega_gamma * delta @ delta)


def texture_flatten_grad(model: fm.MorphableModel, delta):
    """Sum over RGB of the population variance of the unclamped albedo over the skin region."""
    R = model.skin_region_vertices
    if R.size < 2:
        log.warning("skin region has fewer than 2 vertices; texture flattening is 0")
        return 0.0, np.zeros(model.n_tex)
    T = fm.evaluate_texture_raw(model, delta)[R]
    dev = T - T.mean(axis=0)
    value = float(np.sum(dev * dev) / R.size)
    g_T = np.zeros((model.n_vertices, 3))
    g_T[R] = 2.0 * dev / R.size
    return value, model.basis_tex.T @ g_T.ravel()


def texture_flatten_loss(model, delta) -> float:
    return texture_flatten_grad(model, delta)[0]


# ------------------------------------------------------------------ combined

@dataclass
class Observation:
    """One input image with its detected landmarks and attention weights."""
    image: np.ndarray        # (H, W, 3) in [0, 1]
    landmarks: np.ndarray    # (N, 2) pixels
    attention: np.ndarray    # (H, W)
    camera: Camera
    embedder: object
    background: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.landmarks = np.asarray(self.landmarks, dtype=np.float64)
        self.attention = np.asarray(self.attention, dtype=np.float64)
        if self.image.shape[:2] != (self.camera.height, self.camera.width):
            raise ValueError("image size does not match camera")
        self._target_features = None

    @property
    def target_features(self) -> np.ndarray:
        if self._target_features is None:
            self._target_features = self.embedder.embed(self.image)
        return self._target_features


def evaluate(model: fm.MorphableModel, x: fm.CoefficientVector, obs: Observation,
             weights: LossWeights = LossWeights(), need_grad: bool = True, image_terms: bool = True):
    """Loss breakdown and (optionally) the gradient w.r.t. the flat coefficients.

    With ``image_terms=False`` nothing is rasterized; photo and per are
    reported as NaN and excluded from the total.
    """
    state = render_scene(model, x, obs.camera, obs.background, rasterize_image=image_terms)
    slices = fm.block_slices(model.dims)
    grad_pix = None

    lan, g_lmk = landmark_grad(obs.landmarks, state.uv[model.landmark_vertices], model.landmark_weights)
    coef = coefficient_regularization(x.alpha, x.beta, x.delta, weights)
    tex, g_tex = texture_flatten_grad(model, x.delta)
    total = weights.lan * lan + weights.coef * coef + weights.tex * tex
    photo = per = float("nan")
    if image_terms:
        buf = state.buffer
        photo, g_photo = photometric_grad(obs.image, buf, obs.attention, weights.photo_norm)
        composite = np.where(buf.mask[..., None], buf.color, obs.image)
        per, g_feat = cosine_distance_grad(obs.target_features, obs.embedder.embed(composite))
        total += weights.photo * photo + weights.per * per
        if need_grad:
            grad_pix = weights.photo * g_photo
            if weights.per:
                g_comp = obs.embedder.backward(composite, weights.per * g_feat)
                grad_pix = grad_pix + np.where(buf.mask[..., None], g_comp, 0.0)
    breakdown = LossBreakdown(photo, lan, per, coef, tex, float(total))
    if not need_grad:
        return breakdown, None

    g = render_backward(model, state, obs.camera, grad_pix, weights.lan * g_lmk)
    g[slices["alpha"]] += weights.coef * 2.0 * weights.omega_alpha * x.alpha
    g[slices["beta"]] += weights.coef * 2.0 * weights.omega_beta * x.beta
    g[slices["delta"]] += weights.coef * 2.0 * weights.omega_gamma * x.delta + weights.tex * g_tex
    return breakdown, g


def hybrid_loss(model, x, obs: Observation, weights: LossWeights = LossWeights()) -> LossBreakdown:
    return evaluate(model, x, obs, weights, need_grad=False)[0]
