"""File formats: PNG images and masks, landmark text files, coefficient JSON,
OBJ meshes. Every writer replaces its target atomically."""
from __future__ import annotations

import json
import os
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np
from PIL import Image

from . import face_model as fm


class InputError(ValueError):
    """Bad or missing user input (maps to exit code 2)."""


@contextmanager
def atomic_path(path):
    """Yield a temporary path in the target directory; rename over ``path`` on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    os.close(fd)
    try:
        yield tmp
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_bytes(path, data: bytes) -> None:
    with atomic_path(path) as tmp, open(tmp, "wb") as fh:
        fh.write(data)


def write_text(path, text: str) -> None:
    write_bytes(path, text.encode("utf-8"))


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, allow_nan=False) + "\n"


def write_json(path, obj) -> None:
    write_text(path, dumps_json(obj))


def read_json(path):
    path = Path(path)
    if not path.is_file():
        raise InputError(f"file not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise InputError(f"invalid JSON in {path}: {e}") from e


# -------------------------------------------------------------------- images

def _save_png(path, array, mode=None) -> None:
    with atomic_path(path) as tmp:
        # fixed encoder settings and no metadata keep the bytes reproducible
        Image.fromarray(array, mode).save(tmp, format="PNG", optimize=False, compress_level=6)


def to_uint8(image) -> np.ndarray:
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(path, image) -> None:
    """Float RGB in [0, 1] to an 8-bit PNG."""
    _save_png(path, to_uint8(image))


def read_image(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"image not found: {path}")
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except OSError as e:
        raise InputError(f"cannot decode image {path}: {e}") from e


def write_mask(path, mask) -> None:
    _save_png(path, np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8))


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127


def write_depth(path, depth) -> None:
    """16-bit PNG with depth in tenths of a millimetre; empty pixels are 0."""
    d = np.asarray(depth, dtype=np.float64)
    d = np.where(np.isfinite(d), np.clip(np.round(d * 10.0), 0, 65535), 0).astype(np.uint16)
    _save_png(path, d)


def read_depth(path) -> np.ndarray:
    with Image.open(path) as im:
        d = np.asarray(im, dtype=np.float64) / 10.0
    return np.where(d > 0, d, np.inf)


# -------------------------------------------------------------------- landmarks

def write_landmarks(path, points) -> None:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    write_text(path, "".join(f"{u:.6f} {v:.6f}\n" for u, v in pts))


def read_landmarks(path, expected: int | None = None) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"landmark file not found: {path}")
    rows = []
    for ln, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise InputError(f"{path}:{ln}: expected 'u v', got {line!r}")
        try:
            rows.append((float(parts[0]), float(parts[1])))
        except ValueError as e:
            raise InputError(f"{path}:{ln}: {e}") from e
    pts = np.array(rows, dtype=np.float64).reshape(-1, 2)
    if not np.all(np.isfinite(pts)):
        raise InputError(f"{path}: non-finite landmark coordinates")
    if expected is not None and len(pts) != expected:
        raise InputError(f"{path}: {len(pts)} landmarks, model expects {expected}")
    return pts


# -------------------------------------------------------------------- coefficients

def write_coefficients(path, x: fm.CoefficientVector, extra: dict | None = None) -> None:
    d = x.to_json()
    if extra:
        d = {**d, **extra}
    write_json(path, d)


def read_coefficients(path) -> fm.CoefficientVector:
    d = read_json(path)
    try:
        return fm.CoefficientVector.from_json(d)
    except (KeyError, ValueError, TypeError) as e:
        raise InputError(f"invalid coefficient file {path}: {e}") from e


# -------------------------------------------------------------------- meshes

def write_obj(path, vertices, triangles, colors=None) -> None:
    V = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    T = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    lines = []
    if colors is None:
        lines += [f"v {x:.6f} {y:.6f} {z:.6f}\n" for x, y, z in V]
    else:
        C = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
        lines += [f"v {x:.6f} {y:.6f} {z:.6f} {r:.6f} {g:.6f} {b:.6f}\n" for (x, y, z), (r, g, b) in zip(V, C)]
    lines += [f"f {a + 1} {b + 1} {c + 1}\n" for a, b, c in T]
    write_text(path, "".join(lines))


def read_obj(path):
    """Vertices and triangles of an ASCII OBJ; polygons are fan-triangulated."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"mesh not found: {path}")
    V, F = [], []
    for line in path.read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            V.append([float(p) for p in parts[1:4]])
        elif parts[0] == "f":
            idx = [int(p.split("/")[0]) for p in parts[1:]]
            idx = [i - 1 if i > 0 else len(V) + i for i in idx]
            F += [[idx[0], idx[k], idx[k + 1]] for k in range(1, len(idx) - 1)]
    if not V:
        raise InputError(f"{path}: no vertices")
    return np.array(V, dtype=np.float64), np.array(F, dtype=np.int64).reshape(-1, 3)
