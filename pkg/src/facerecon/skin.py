"""Naive-Bayes skin classifier over RGB with one Gaussian mixture per class,
and the per-pixel attention weights derived from it."""
from __future__ import annotations

import csv
import functools
import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logsumexp

log = logging.getLogger(__name__)

COV_FLOOR = 1e-6
DEFAULT_COMPONENTS = 8


@dataclass
class GMM:
    weights: np.ndarray      # (K,)
    means: np.ndarray        # (K, 3)
    covariances: np.ndarray  # (K, 3, 3)
    log_likelihood_trace: list = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.covariances = np.asarray(self.covariances, dtype=np.float64)
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must be non-negative and sum to 1")
        if not np.allclose(self.covariances, np.swapaxes(self.covariances, 1, 2)):
            raise ValueError("covariances must be symmetric")
        np.linalg.cholesky(self.covariances)  # raises if not positive definite

    @property
    def n_components(self) -> int:
        return self.weights.size

    def component_log_density(self, X: np.ndarray) -> np.ndarray:
        return _component_log_density(X, self.means, self.covariances)

    def log_density(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64).reshape(-1, 3)
        with np.errstate(divide="ignore"):
            return logsumexp(self.component_log_density(X) + np.log(self.weights), axis=1)

    def to_json(self) -> dict:
        return {"weights": self.weights.tolist(), "means": self.means.tolist(),
                "covariances": self.covariances.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "GMM":
        return cls(d["weights"], d["means"], d["covariances"])


def _component_log_density(X, means, covs) -> np.ndarray:
    n, d = X.shape
    out = np.empty((n, means.shape[0]))
    for k in range(means.shape[0]):
        L = np.linalg.cholesky(covs[k])
        diff = np.linalg.solve(L, (X - means[k]).T)
        maha = np.sum(diff * diff, axis=0)
        logdet = 2.0 * np.sum(np.log(np.diag(L)))
        out[:, k] = -0.5 * (d * np.log(2 * np.pi) + logdet + maha)
    return out


def _floor_cov(cov: np.ndarray) -> np.ndarray:
    w, U = np.linalg.eigh(cov)
    if w.min() >= COV_FLOOR:
        return cov
    return (U * np.maximum(w, COV_FLOOR)) @ U.T


def _kmeans_pp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [X[rng.integers(X.shape[0])]]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(X.shape[0])
        else:
            idx = rng.choice(X.shape[0], p=d2 / total)
        centers.append(X[idx])
        d2 = np.minimum(d2, np.sum((X - X[idx]) ** 2, axis=1))
    return np.array(centers)


def _m_step(X, resp):
    nk = resp.sum(axis=0)
    weights = nk / nk.sum()
    means = (resp.T @ X) / np.maximum(nk, 1e-300)[:, None]
    covs = np.empty((resp.shape[1], 3, 3))
    for k in range(resp.shape[1]):
        diff = X - means[k]
        covs[k] = _floor_cov((resp[:, k, None] * diff).T @ diff / max(nk[k], 1e-300))
    return weights, means, covs, nk


def fit_gmm(samples, components: int, seed: int = 0, max_iter: int = 200, tol: float = 1e-6) -> GMM:
    """EM for a full-covariance mixture, seeded by k-means++ hard assignment.

    Stops when the mean per-sample log-likelihood gains less than ``tol``.
    """
    X = np.asarray(samples, dtype=np.float64).reshape(-1, 3)
    if X.shape[0] < 10 * components:
        raise ValueError(f"need at least {10 * components} samples for {components} components")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(X, components, rng)
    assign = np.argmin(((X[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
    resp = np.zeros((X.shape[0], components))
    resp[np.arange(X.shape[0]), assign] = 1.0
    weights, means, covs, nk = _m_step(X, resp)
    # components that received no points at init start from random samples
    for k in np.flatnonzero(nk < 1e-9):
        means[k] = X[rng.integers(X.shape[0])]
        covs[k] = _floor_cov(np.cov(X.T, bias=True))
        weights[k] = 1.0 / X.shape[0]
    weights /= weights.sum()

    trace = []
    prev = -np.inf
    for it in range(max_iter):
        with np.errstate(divide="ignore"):
            logp = _component_log_density(X, means, covs) + np.log(weights)
        lse = logsumexp(logp, axis=1)
        ll = float(lse.mean())
        trace.append(ll)
        if ll - prev < tol:
            break
        prev = ll
        resp = np.exp(logp - lse[:, None])
        weights, means, covs, nk = _m_step(X, resp)
        empty = np.flatnonzero(nk < 1e-9)
        if empty.size:
            worst = np.argsort(lse)[: empty.size]
            for k, i in zip(empty, worst):
                log.warning("EM component %d emptied at iteration %d; re-seeding", k, it)
                means[k] = X[i]
                covs[k] = _floor_cov(np.cov(X.T, bias=True))
                weights[k] = 1.0 / X.shape[0]
            weights /= weights.sum()
            prev = -np.inf
    gmm = GMM(weights, means, covs)
    gmm.log_likelihood_trace = trace
    return gmm


@dataclass
class SkinClassifier:
    skin: GMM
    nonskin: GMM
    prior_skin: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.prior_skin < 1.0:
            raise ValueError("class priors must lie in (0, 1)")

    def probability(self, rgb, return_flags: bool = False):
        """P(skin | color) for an (..., 3) array of RGB values in [0, 1]."""
        rgb = np.asarray(rgb, dtype=np.float64)
        shape = rgb.shape[:-1]
        X = rgb.reshape(-1, 3)
        a = np.log(self.prior_skin) + self.skin.log_density(X)
        b = np.log(1.0 - self.prior_skin) + self.nonskin.log_density(X)
        # non-finite input colors count as zero density
        a[np.isnan(a)] = -np.inf
        b[np.isnan(b)] = -np.inf
        underflow = np.isneginf(a) & np.isneginf(b)
        with np.errstate(invalid="ignore"):
            P = expit(a - b)
        P[underflow] = self.prior_skin
        if underflow.any():
            log.warning("%d pixels underflowed both class densities", int(underflow.sum()))
        P = P.reshape(shape)
        if return_flags:
            return P, underflow.reshape(shape)
        return P

    def to_json(self) -> dict:
        return {"skin": self.skin.to_json(), "nonskin": self.nonskin.to_json(),
                "priors": {"skin": self.prior_skin, "nonskin": 1.0 - self.prior_skin}}

    @classmethod
    def from_json(cls, d: dict) -> "SkinClassifier":
        return cls(GMM.from_json(d["skin"]), GMM.from_json(d["nonskin"]), float(d["priors"]["skin"]))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "SkinClassifier":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def skin_probability(classifier: SkinClassifier, rgb):
    return classifier.probability(rgb)


def attention_mask(P) -> np.ndarray:
    """A = 1 where P > 0.5, otherwise P itself."""
    P = np.asarray(P, dtype=np.float64)
    return np.where(P > 0.5, 1.0, P)


def train_classifier(rgb, labels, components: int = DEFAULT_COMPONENTS, seed: int = 0) -> SkinClassifier:
    rgb = np.asarray(rgb, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    skin = fit_gmm(rgb[labels], components, seed=seed)
    nonskin = fit_gmm(rgb[~labels], components, seed=seed + 1)
    return SkinClassifier(skin, nonskin, float(labels.mean()))


def load_labeled_csv(path):
    """Rows ``r,g,b,label`` with 0-255 channels and label in {skin, nonskin}."""
    rgb, labels = [], []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().lower() == "r":
                continue
            r, g, b, lab = row
            lab = lab.strip().lower()
            if lab not in ("skin", "nonskin"):
                raise ValueError(f"unknown label {lab!r} in {path}")
            rgb.append((float(r), float(g), float(b)))
            labels.append(lab == "skin")
    return np.array(rgb) / 255.0, np.array(labels)


def write_labeled_csv(path, rgb, labels) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["r", "g", "b", "label"])
        for c, lab in zip(np.round(np.asarray(rgb) * 255).astype(int), labels):
            w.writerow([*c, "skin" if lab else "nonskin"])


SKIN_TONES = np.array([
    [0.78, 0.58, 0.48],
    [0.90, 0.72, 0.62],
    [0.62, 0.42, 0.32],
    [0.45, 0.30, 0.22],
    [0.85, 0.62, 0.50],
])

NONSKIN_COLORS = np.array([
    [0.15, 0.55, 0.20], [0.10, 0.25, 0.70], [0.50, 0.50, 0.52], [0.08, 0.08, 0.10],
    [0.95, 0.95, 0.95], [0.70, 0.10, 0.12], [0.20, 0.60, 0.65], [0.55, 0.20, 0.60],
    [0.90, 0.85, 0.15], [0.30, 0.35, 0.45],
])


def synthetic_skin_corpus(n: int = 8000, seed: int = 0, skin_fraction: float = 0.5):
    """Deterministic labeled colors: skin tones under varying brightness vs. assorted non-skin."""
    rng = np.random.default_rng(seed)
    n_skin = int(round(n * skin_fraction))
    n_non = n - n_skin
    # blend two reference tones, then jitter hue per channel and brightness
    mix = rng.uniform(0, 1, size=(n_skin, 1))
    tone = (mix * SKIN_TONES[rng.integers(len(SKIN_TONES), size=n_skin)]
            + (1 - mix) * SKIN_TONES[rng.integers(len(SKIN_TONES), size=n_skin)])
    tone = tone * (1.0 + 0.06 * rng.standard_normal((n_skin, 3)))
    bright = rng.uniform(0.45, 1.2, size=(n_skin, 1))
    skin = np.clip(tone * bright + rng.normal(0, 0.015, size=(n_skin, 3)), 0, 1)
    n_uniform = n_non // 5
    base = NONSKIN_COLORS[rng.integers(len(NONSKIN_COLORS), size=n_non - n_uniform)]
    clustered = base * rng.uniform(0.6, 1.2, size=(base.shape[0], 1)) + rng.normal(0, 0.05, size=base.shape)
    non = np.clip(np.concatenate([clustered, rng.uniform(0, 1, size=(n_uniform, 3))]), 0, 1)
    rgb = np.concatenate([skin, non])
    labels = np.concatenate([np.ones(n_skin, bool), np.zeros(n_non, bool)])
    perm = rng.permutation(n)
    return rgb[perm], labels[perm]


@functools.lru_cache(maxsize=4)
def default_classifier(seed: int = 0, components: int = DEFAULT_COMPONENTS) -> SkinClassifier:
    rgb, labels = synthetic_skin_corpus(8000, seed=seed)
    return train_classifier(rgb, labels, components, seed=seed)
