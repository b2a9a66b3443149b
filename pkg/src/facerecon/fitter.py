"""Single-image analysis-by-synthesis fitting with Adam."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import face_model as fm
from .losses import LossBreakdown, LossWeights, Observation, evaluate

log = logging.getLogger(__name__)

# optimizer blocks; pose is split into rotation (rad) and translation (mm)
OPT_BLOCKS = ("alpha", "beta", "delta", "gamma", "rotation", "translation")

DEFAULT_MULTIPLIERS = {"alpha": 1.0, "beta": 1.0, "delta": 1.0, "gamma": 1.0,
                       "rotation": 1.0, "translation": 10.0}

DIVERGENCE_LIMIT = 1e6


class NonFiniteGradientError(FloatingPointError):
    pass


class DivergenceError(FloatingPointError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


@dataclass
class FitConfig:
    iterations: int = 2000
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    multipliers: dict = field(default_factory=lambda: dict(DEFAULT_MULTIPLIERS))
    warmup_fraction: float = 0.25
    final_lr_fraction: float = 0.05
    init: fm.CoefficientVector | None = None
    seed: int = 0
    trace_stride: int = 0   # keep a coefficient snapshot every n iterations (0 = never)

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        unknown = set(self.multipliers) - set(OPT_BLOCKS)
        if unknown:
            raise ValueError(f"unknown multiplier blocks {sorted(unknown)}")
        self.multipliers = {**DEFAULT_MULTIPLIERS, **self.multipliers}


@dataclass
class FitTrace:
    losses: list = field(default_factory=list)      # LossBreakdown per iteration
    stage: list = field(default_factory=list)       # "warmup" or "full"
    snapshots: list = field(default_factory=list)   # (iteration, flat x)
    best_iteration: int = -1
    best_total: float = math.inf

    def to_json(self) -> dict:
        return {
            "iterations": [dict(l.to_json(), iteration=i, stage=s)
                           for i, (l, s) in enumerate(zip(self.losses, self.stage))],
            "best_iteration": self.best_iteration,
            "best_total": self.best_total,
            "snapshots": [{"iteration": i, "x": x.tolist()} for i, x in self.snapshots],
        }


def multiplier_vector(dims, multipliers: dict) -> np.ndarray:
    ki, ke, kt = dims
    sizes = {"alpha": ki, "beta": ke, "delta": kt, "gamma": 9, "rotation": 3, "translation": 3}
    return np.concatenate([np.full(sizes[b], float(multipliers[b])) for b in OPT_BLOCKS])


def loss_gradient(model, x: fm.CoefficientVector, obs: Observation,
                  weights: LossWeights = LossWeights(), image_terms: bool = True):
    """(LossBreakdown, gradient of the total w.r.t. the flat coefficient vector)."""
    breakdown, g = evaluate(model, x, obs, weights, need_grad=True, image_terms=image_terms)
    if not np.all(np.isfinite(g)):
        for name, sl in fm.block_slices(model.dims).items():
            if not np.all(np.isfinite(g[sl])):
                raise NonFiniteGradientError(f"non-finite gradient in block {name!r}")
    return breakdown, g


@dataclass
class AdamState:
    x: np.ndarray
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def fresh(cls, x) -> "AdamState":
        x = np.asarray(x, dtype=np.float64).copy()
        return cls(x, np.zeros_like(x), np.zeros_like(x), 0)


def adam_step(state: AdamState, grad, config: FitConfig, lr: float | None = None,
              scale: np.ndarray | None = None) -> AdamState:
    """One bias-corrected Adam update; ``scale`` holds per-entry step multipliers."""
    lr = config.lr if lr is None else lr
    t = state.t + 1
    m = config.beta1 * state.m + (1 - config.beta1) * grad
    v = config.beta2 * state.v + (1 - config.beta2) * grad * grad
    m_hat = m / (1 - config.beta1 ** t)
    v_hat = v / (1 - config.beta2 ** t)
    step = lr * m_hat / (np.sqrt(v_hat) + config.eps)
    if scale is not None:
        step = step * scale
    return AdamState(state.x - step, m, v, t)


def _lr_at(config: FitConfig, i: int, start: int, stop: int) -> float:
    """Exponential decay from lr to lr*final_lr_fraction over the full-weight stage."""
    n = max(stop - start, 1)
    return config.lr * config.final_lr_fraction ** ((i - start) / n)


def fit_single_image(model: fm.MorphableModel, obs: Observation, config: FitConfig = FitConfig(),
                     weights: LossWeights = LossWeights()):
    """Fit coefficients to one observation. Returns (best x, FitTrace).

    The first ``warmup_fraction`` of the iterations run with the image terms
    switched off so the landmarks can settle the pose first. The best iterate
    is chosen by the full-weight total, which includes the initial point.
    """
    if obs.landmarks.shape[0] != model.landmark_vertices.size:
        raise ValueError(f"{obs.landmarks.shape[0]} landmarks given, model has {model.landmark_vertices.size}")
    x0 = config.init.copy() if config.init is not None else fm.CoefficientVector.for_model(model)
    if x0.dims != model.dims:
        raise fm.DimensionError("init coefficients do not match the model")
    trace = FitTrace()
    if config.iterations == 0:
        return x0, trace

    scale = multiplier_vector(model.dims, config.multipliers)
    dims = model.dims
    n_warm = int(round(config.warmup_fraction * config.iterations))
    best_x = x0.flatten()
    state = AdamState.fresh(best_x)

    def check(b: LossBreakdown):
        if not math.isfinite(b.total) or b.total > DIVERGENCE_LIMIT:
            raise DivergenceError(f"fit diverged (total={b.total})", trace)

    init_full = evaluate(model, x0, obs, weights, need_grad=False)[0]
    check(init_full)
    trace.best_total = init_full.total
    trace.best_iteration = -1
    for i in range(config.iterations):
        warm = i < n_warm
        xi = fm.CoefficientVector.unflatten(state.x, dims)
        b, g = loss_gradient(model, xi, obs, weights, image_terms=not warm)
        check(b)
        trace.losses.append(b)
        trace.stage.append("warmup" if warm else "full")
        if config.trace_stride and i % config.trace_stride == 0:
            trace.snapshots.append((i, state.x.copy()))
        if not warm and b.total < trace.best_total:
            trace.best_total = b.total
            trace.best_iteration = i
            best_x = state.x.copy()
        lr = config.lr if warm else _lr_at(config, i, n_warm, config.iterations)
        state = adam_step(state, g, config, lr=lr, scale=scale)
        if warm and i + 1 == n_warm:
            # the optimizer restarts when the image terms engage
            state = AdamState.fresh(state.x)
    if n_warm >= config.iterations:
        # no full-weight iterate was seen; score the last one
        xl = fm.CoefficientVector.unflatten(state.x, dims)
        b = evaluate(model, xl, obs, weights, need_grad=False)[0]
        if b.total < trace.best_total:
            trace.best_total, trace.best_iteration, best_x = b.total, config.iterations, state.x.copy()
    return fm.CoefficientVector.unflatten(best_x, dims), trace
