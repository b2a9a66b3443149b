"""Multi-image identity aggregation with per-image confidences, the
confidence predictor, and its label-free training on image sets."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import face_model as fm
from .eval_geom import Mesh, shape_error
from .losses import MULTI_IMAGE_WEIGHTS, LossWeights, Observation, evaluate, landmark_loss, photometric_loss
from .rasterizer import render_scene

log = logging.getLogger(__name__)

SUM_FLOOR = 1e-12
FEATURE_NAMES = ("photo", "lan", "abs_yaw", "abs_pitch", "mean_attention", "skin_fraction",
                 "mean_abs_alpha", "mean_abs_beta")
STRATEGIES = ("per_frame", "averaging", "S1", "S2", "S3", "S4")


# ---------------------------------------------------------------- algebra

def _as_2d(alphas, confidences):
    alphas = np.asarray(alphas, dtype=np.float64)
    conf = np.asarray(confidences, dtype=np.float64)
    if alphas.ndim != 2:
        raise ValueError("alphas must be (M, K)")
    if alphas.shape[0] < 1:
        raise ValueError("need at least one image")
    return alphas, conf


def aggregate_elementwise(alphas, confidences) -> np.ndarray:
    """Per-entry confidence-weighted mean of the identity coefficients."""
    alphas, conf = _as_2d(alphas, confidences)
    if conf.shape != alphas.shape:
        raise ValueError(f"confidence shape {conf.shape} does not match alphas {alphas.shape}")
    if np.any(conf < 0):
        raise ValueError("confidences must be positive")
    s = conf.sum(axis=0)
    if np.any(s <= SUM_FLOOR):
        raise ValueError("confidence sum vanishes for some entry")
    # relative weights: equal confidences become exactly 1, so the plain mean is reproduced bit for bit
    w = conf / conf.max(axis=0)
    return (w * alphas).sum(axis=0) / w.sum(axis=0)


def aggregate_global(alphas, scalars) -> np.ndarray:
    """Scalar-confidence weighted mean of whole coefficient vectors."""
    alphas, c = _as_2d(alphas, scalars)
    c = c.reshape(-1)
    if c.shape[0] != alphas.shape[0]:
        raise ValueError("one scalar confidence per image required")
    if np.any(c < 0):
        raise ValueError("confidences must be positive")
    s = c.sum()
    if s <= SUM_FLOOR:
        raise ValueError("confidence sum vanishes")
    w = c / c.max()
    return (w[:, None] * alphas).sum(axis=0) / w.sum()


def confidence_sums(confidences) -> np.ndarray:
    return np.asarray(confidences, dtype=np.float64).sum(axis=1)


def select_max_confidence(alphas, confidences) -> np.ndarray:
    """The single image whose confidence vector has the largest sum; ties go to the first."""
    alphas, conf = _as_2d(alphas, confidences)
    return alphas[int(np.argmax(confidence_sums(conf)))].copy()


def shape_average(alphas) -> np.ndarray:
    return np.asarray(alphas, dtype=np.float64).mean(axis=0)


# ---------------------------------------------------------------- features

def confidence_features(model: fm.MorphableModel, obs: Observation, x: fm.CoefficientVector,
                        state=None) -> np.ndarray:
    """Raw (unstandardized) per-image quality features, ordered as FEATURE_NAMES."""
    if state is None:
        state = render_scene(model, x, obs.camera, obs.background)
    buf = state.buffer
    M = buf.mask
    photo = photometric_loss(obs.image, buf, obs.attention)
    lan = landmark_loss(obs.landmarks, state.uv[model.landmark_vertices], model.landmark_weights)
    A = obs.attention[M]
    mean_a = float(A.mean()) if M.any() else 0.0
    # share of the rendered face the skin classifier accepts outright
    skin_frac = float((A >= 1.0).mean()) if M.any() else 0.0
    pitch, yaw = x.pose[0], x.pose[1]
    return np.array([photo, lan, abs(yaw), abs(pitch), mean_a, skin_frac,
                     float(np.abs(x.alpha).mean()), float(np.abs(x.beta).mean()) if x.beta.size else 0.0])


@dataclass
class FeatureScaler:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, features) -> "FeatureScaler":
        F = np.asarray(features, dtype=np.float64).reshape(-1, len(FEATURE_NAMES))
        std = F.std(axis=0)
        return cls(F.mean(axis=0), np.where(std > 1e-8, std, 1.0))

    @classmethod
    def identity(cls, n: int = len(FEATURE_NAMES)) -> "FeatureScaler":
        return cls(np.zeros(n), np.ones(n))

    def __call__(self, features) -> np.ndarray:
        return (np.asarray(features, dtype=np.float64) - self.mean) / self.std


# ---------------------------------------------------------------- predictor

class ConfidencePredictor:
    """Two-layer perceptron: features -> tanh(32) -> sigmoid(n_out).

    The output layer starts at zero, so every confidence is 0.5 before
    training and aggregation reduces to the plain average. ``n_out=1`` gives
    a single global confidence per image.
    """

    def __init__(self, n_out: int, n_in: int = len(FEATURE_NAMES), hidden: int = 32, seed: int = 0,
                 scaler: FeatureScaler | None = None):
        rng = np.random.default_rng(seed)
        self.n_in, self.hidden, self.n_out, self.seed = n_in, hidden, n_out, seed
        self.W1 = rng.normal(0.0, 1.0 / math.sqrt(n_in), size=(hidden, n_in))
        self.b1 = np.zeros(hidden)
        self.W2 = np.zeros((n_out, hidden))
        self.b2 = np.zeros(n_out)
        self.scaler = scaler or FeatureScaler.identity(n_in)

    PARAMS = ("W1", "b1", "W2", "b2")

    def get_flat(self) -> np.ndarray:
        return np.concatenate([getattr(self, p).ravel() for p in self.PARAMS])

    def set_flat(self, flat) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        i = 0
        for p in self.PARAMS:
            cur = getattr(self, p)
            setattr(self, p, flat[i:i + cur.size].reshape(cur.shape).copy())
            i += cur.size
        if i != flat.size:
            raise ValueError("parameter vector has the wrong length")

    def forward(self, features, return_cache: bool = False):
        z = self.scaler(np.atleast_2d(features))
        h = np.tanh(z @ self.W1.T + self.b1)
        c = 1.0 / (1.0 + np.exp(-(h @ self.W2.T + self.b2)))
        if return_cache:
            return c, (z, h, c)
        return c

    __call__ = forward

    def confidences(self, features, n_entries: int) -> np.ndarray:
        """(M, n_entries) confidences; a global predictor is broadcast across entries."""
        c = self.forward(features)
        if self.n_out == 1:
            return np.repeat(c, n_entries, axis=1)
        if self.n_out != n_entries:
            raise fm.DimensionError(f"predictor emits {self.n_out} confidences, model has {n_entries}")
        return c

    def backward(self, cache, grad_c) -> np.ndarray:
        """Flat parameter gradient given dL/dc of shape (M, n_out)."""
        z, h, c = cache
        g_pre2 = grad_c * c * (1.0 - c)
        gW2 = g_pre2.T @ h
        gb2 = g_pre2.sum(axis=0)
        g_pre1 = (g_pre2 @ self.W2) * (1.0 - h * h)
        gW1 = g_pre1.T @ z
        gb1 = g_pre1.sum(axis=0)
        return np.concatenate([gW1.ravel(), gb1, gW2.ravel(), gb2])

    def to_json(self) -> dict:
        return {"n_in": self.n_in, "hidden": self.hidden, "n_out": self.n_out, "seed": self.seed,
                "W1": self.W1.tolist(), "b1": self.b1.tolist(), "W2": self.W2.tolist(), "b2": self.b2.tolist(),
                "feature_mean": self.scaler.mean.tolist(), "feature_std": self.scaler.std.tolist(),
                "feature_names": list(FEATURE_NAMES)}

    @classmethod
    def from_json(cls, d: dict) -> "ConfidencePredictor":
        p = cls(d["n_out"], d["n_in"], d["hidden"], d.get("seed", 0),
                FeatureScaler(np.array(d["feature_mean"]), np.array(d["feature_std"])))
        for k in cls.PARAMS:
            setattr(p, k, np.array(d[k], dtype=np.float64).reshape(getattr(p, k).shape))
        return p


# ---------------------------------------------------------------- records

@dataclass
class ImageRecord:
    x: fm.CoefficientVector
    features: np.ndarray
    observation: Observation | None = None
    name: str = ""


@dataclass
class ImageSet:
    records: list
    gt_alpha: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        if not self.records:
            raise ValueError("an image set needs at least one image")
        dims = {r.x.dims for r in self.records}
        if len(dims) != 1:
            raise fm.DimensionError("inconsistent coefficient dimensions within a set")

    @property
    def alphas(self) -> np.ndarray:
        return np.stack([r.x.alpha for r in self.records])

    @property
    def features(self) -> np.ndarray:
        return np.stack([r.features for r in self.records])


def fit_scaler(corpus) -> FeatureScaler:
    return FeatureScaler.fit(np.concatenate([s.features for s in corpus]))


# ---------------------------------------------------------------- training

class ConfidenceTrainingError(FloatingPointError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


def set_loss(model, image_set: ImageSet, predictor: ConfidencePredictor,
             weights: LossWeights = MULTI_IMAGE_WEIGHTS, need_grad: bool = True):
    """Mean hybrid loss of every image re-rendered with the aggregated identity,
    and its gradient w.r.t. the predictor parameters."""
    alphas = image_set.alphas
    M, K = alphas.shape
    c, cache = predictor.forward(image_set.features, return_cache=True)
    conf = c if predictor.n_out != 1 else np.repeat(c, K, axis=1)
    s = conf.sum(axis=0)
    agg = (conf * alphas).sum(axis=0) / s
    sl = fm.block_slices(image_set.records[0].x.dims)["alpha"]
    total = 0.0
    g_agg = np.zeros(K)
    for r in image_set.records:
        if r.observation is None:
            raise ValueError("training needs the observation of every image")
        xh = r.x.copy()
        xh.alpha = agg.copy()
        b, g = evaluate(model, xh, r.observation, weights, need_grad=need_grad)
        total += b.total
        if need_grad:
            g_agg += g[sl]
    total /= M
    if not need_grad:
        return total, None
    g_agg /= M
    g_conf = g_agg[None, :] * (alphas - agg[None, :]) / s[None, :]
    if predictor.n_out == 1:
        g_conf = g_conf.sum(axis=1, keepdims=True)
    return total, predictor.backward(cache, g_conf)


@dataclass
class TrainTrace:
    loss: list = field(default_factory=list)
    best_loss: list = field(default_factory=list)
    best_epoch: int = -1

    def to_json(self) -> dict:
        return {"loss": self.loss, "best_loss": self.best_loss, "best_epoch": self.best_epoch}


def train_confidence(model, predictor: ConfidencePredictor, corpus, epochs: int = 60, lr: float = 0.01,
                     seed: int = 0, weights: LossWeights = MULTI_IMAGE_WEIGHTS):
    """Full-batch Adam over the training sets; returns (best predictor, TrainTrace).

    ``seed`` fixes the order in which sets are accumulated.
    """
    if not corpus:
        raise ValueError("empty training corpus")
    order = np.random.default_rng(seed).permutation(len(corpus))
    theta = predictor.get_flat()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    b1, b2, eps = 0.9, 0.999, 1e-8
    trace = TrainTrace()
    best = theta.copy()
    for epoch in range(epochs + 1):
        predictor.set_flat(theta)
        loss, grad = 0.0, np.zeros_like(theta)
        for i in order:
            l, g = set_loss(model, corpus[i], predictor, weights, need_grad=epoch < epochs)
            loss += l
            if g is not None:
                grad += g
        loss /= len(corpus)
        if not math.isfinite(loss):
            raise ConfidenceTrainingError(f"non-finite training loss at epoch {epoch}", trace)
        trace.loss.append(loss)
        if not trace.best_loss or loss < trace.best_loss[-1]:
            trace.best_epoch = epoch
            best = theta.copy()
        trace.best_loss.append(min(loss, trace.best_loss[-1]) if trace.best_loss else loss)
        if epoch == epochs:
            break
        grad /= len(corpus)
        t = epoch + 1
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad * grad
        theta = theta - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    predictor.set_flat(best)
    return predictor, trace


# ---------------------------------------------------------------- evaluation

def neutral_mesh(model, alpha, nose: bool = True) -> Mesh:
    V = fm.evaluate_shape(model, alpha, np.zeros(model.n_exp))
    return Mesh(V, model.triangles, model.nose_tip_vertex if nose else None)


def strategy_alphas(image_set: ImageSet, predictor: ConfidencePredictor | None,
                    scalar_predictor: ConfidencePredictor | None = None) -> dict:
    """Aggregated identity for each strategy (None where no predictor is given)."""
    alphas = image_set.alphas
    K = alphas.shape[1]
    out = {"averaging": shape_average(alphas), "S1": None, "S2": None, "S3": None, "S4": None}
    if scalar_predictor is not None:
        out["S1"] = aggregate_global(alphas, scalar_predictor.forward(image_set.features)[:, 0])
    if predictor is not None:
        conf = predictor.confidences(image_set.features, K)
        out["S2"] = aggregate_global(alphas, confidence_sums(conf))
        out["S3"] = select_max_confidence(alphas, conf)
        out["S4"] = aggregate_elementwise(alphas, conf)
    return out


def _stats(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    return {"mean": float(v.mean()), "std": float(v.std()), "per_set": v.tolist()}


def evaluate_strategies(model, corpus, predictor=None, scalar_predictor=None) -> dict:
    """Shape error (mm) of each aggregation strategy, as mean and std over sets.

    ``per_frame`` is the mean over each set of its individual image errors.
    """
    rows = {k: [] for k in STRATEGIES}
    for s in corpus:
        if s.gt_alpha is None:
            raise ValueError("evaluation needs ground-truth identity coefficients")
        gt = neutral_mesh(model, s.gt_alpha)
        rows["per_frame"].append(float(np.mean([shape_error(neutral_mesh(model, a).vertices, gt)
                                                for a in s.alphas])))
        for name, a in strategy_alphas(s, predictor, scalar_predictor).items():
            if a is not None:
                rows[name].append(shape_error(neutral_mesh(model, a).vertices, gt))
    return {k: _stats(v) if v else None for k, v in rows.items()}


def format_report(report: dict) -> str:
    lines = []
    for k in STRATEGIES:
        r = report.get(k)
        lines.append(f"{k:>10}: " + ("n/a" if r is None else f"{r['mean']:.4f} ± {r['std']:.4f} mm"))
    return "\n".join(lines)


def pose_bin_confidence(corpus, predictor: ConfidencePredictor, bin_edges_deg=(0, 20, 50, 90)) -> dict:
    """Average relative confidences (confidence over the set mean) per |yaw| bin."""
    edges = np.radians(np.asarray(bin_edges_deg, dtype=np.float64))
    K = predictor.n_out
    acc = np.zeros((len(edges) - 1, K))
    counts = np.zeros(len(edges) - 1, dtype=int)
    for s in corpus:
        c = predictor.forward(s.features)
        rel = c / c.mean(axis=0, keepdims=True)
        for r, row in zip(s.records, rel):
            b = int(np.clip(np.searchsorted(edges, abs(r.x.pose[1]), side="right") - 1, 0, len(counts) - 1))
            acc[b] += row
            counts[b] += 1
    mean = np.divide(acc, counts[:, None], out=np.full_like(acc, np.nan), where=counts[:, None] > 0)
    return {"bin_edges_deg": list(bin_edges_deg), "counts": counts.tolist(),
            "relative_confidence": [[None if math.isnan(v) else v for v in row] for row in mean]}
