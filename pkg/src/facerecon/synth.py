"""Synthetic benchmark generation: ground-truth sampling, pose grid,
occluders and landmark degradation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import face_model as fm
from .rasterizer import project_landmarks, render_image
from .scene import Camera
from .skin import NONSKIN_COLORS

PITCH_GRID_DEG = (-15.0, 0.0, 20.0, 25.0)
YAW_GRID_DEG = (-80.0, -40.0, 0.0, 40.0, 80.0)
DEFAULT_DEPTH = 600.0   # mm from camera to face centroid


def pose_grid(pitches=PITCH_GRID_DEG, yaws=YAW_GRID_DEG) -> list[tuple[float, float]]:
    """(pitch, yaw) pairs in degrees, pitch-major."""
    return [(p, y) for p in pitches for y in yaws]


def default_lighting(rng=None) -> np.ndarray:
    g = np.zeros(9)
    g[0] = 3.0
    if rng is not None:
        g[0] += 0.2 * rng.standard_normal()
        g[1:4] = 0.3 * rng.standard_normal(3)
        g[4:] = 0.1 * rng.standard_normal(5)
    return g


@dataclass
class SubjectTruth:
    alpha: np.ndarray
    delta: np.ndarray
    background: tuple


def sample_subject(model: fm.MorphableModel, rng: np.random.Generator) -> SubjectTruth:
    bg = NONSKIN_COLORS[rng.integers(len(NONSKIN_COLORS))]
    return SubjectTruth(rng.standard_normal(model.n_id), rng.standard_normal(model.n_tex),
                        tuple(float(c) for c in bg))


def sample_view(model, truth: SubjectTruth, rng, pitch_deg: float | None = None,
                yaw_deg: float | None = None, expression_sd: float = 0.5) -> fm.CoefficientVector:
    """Full coefficients for one image; pose drawn at random unless given."""
    pitch = np.radians(rng.uniform(-15, 15) if pitch_deg is None else pitch_deg)
    yaw = np.radians(rng.uniform(-30, 30) if yaw_deg is None else yaw_deg)
    t = np.array([5.0, 5.0, 10.0]) * rng.standard_normal(3) + np.array([0.0, 0.0, DEFAULT_DEPTH])
    return fm.CoefficientVector(truth.alpha.copy(), expression_sd * rng.standard_normal(model.n_exp),
                                truth.delta.copy(), default_lighting(rng),
                                np.concatenate([[pitch, yaw, 0.0], t]))


@dataclass
class Occluder:
    """Axis-aligned rectangle [x0, x1) x [y0, y1) in pixels with a flat color."""
    x0: int
    y0: int
    x1: int
    y1: int
    color: tuple

    def apply(self, image) -> np.ndarray:
        out = image.copy()
        out[self.y0:self.y1, self.x0:self.x1] = self.color
        return out

    def to_json(self) -> dict:
        return {"x0": self.x0, "y0": self.y0, "x1": self.x1, "y1": self.y1, "color": list(self.color)}


def sample_occluder(mask, rng, coverage: float = 0.35) -> Occluder:
    """A rectangle over roughly ``coverage`` of the face's bounding box, placed inside it."""
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        h, w = mask.shape
        rows, cols = np.array([0, h - 1]), np.array([0, w - 1])
    r0, r1, c0, c1 = rows.min(), rows.max() + 1, cols.min(), cols.max() + 1
    side = np.sqrt(coverage)
    hh = max(1, int(round((r1 - r0) * side)))
    ww = max(1, int(round((c1 - c0) * side)))
    y0 = int(rng.integers(r0, max(r0 + 1, r1 - hh + 1)))
    x0 = int(rng.integers(c0, max(c0 + 1, c1 - ww + 1)))
    color = NONSKIN_COLORS[rng.integers(len(NONSKIN_COLORS))]
    return Occluder(x0, y0, x0 + ww, y0 + hh, tuple(float(c) for c in color))


@dataclass
class SyntheticImage:
    image: np.ndarray
    landmarks: np.ndarray
    x: fm.CoefficientVector
    pitch_deg: float
    yaw_deg: float
    occluder: Occluder | None = None
    landmark_noise_px: float = 0.0
    meta: dict = field(default_factory=dict)


def render_synthetic(model, x: fm.CoefficientVector, cam: Camera, background, rng,
                     occlude: bool = False, landmark_noise_px: float = 0.0,
                     pixel_noise: float = 0.0) -> SyntheticImage:
    buf = render_image(model, x, cam, background)
    img = buf.color.copy()
    if pixel_noise > 0:
        img = np.clip(img + pixel_noise * rng.standard_normal(img.shape), 0.0, 1.0)
    occ = sample_occluder(buf.mask, rng) if occlude else None
    if occ is not None:
        img = occ.apply(img)
    lm = project_landmarks(model, x, cam).points.copy()
    if landmark_noise_px > 0:
        lm = lm + landmark_noise_px * rng.standard_normal(lm.shape)
    pitch, yaw = np.degrees(x.pose[:2])
    return SyntheticImage(img, lm, x, float(pitch), float(yaw), occ, landmark_noise_px)


def camera_for_size(size: int) -> Camera:
    return Camera.default(size, size)
