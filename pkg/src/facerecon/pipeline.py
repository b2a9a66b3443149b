"""Glue between files on disk and the numerical modules: model and classifier
loading, observations, cached fitting and benchmark manifests."""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import face_model as fm
from . import io
from . import synth
from .aggregator import ImageRecord, ImageSet, confidence_features
from .config import TOY_MODEL, CameraSpec, RunConfig
from .fitter import fit_single_image
from .losses import Observation, make_embedder
from .skin import SkinClassifier, attention_mask, default_classifier

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1


def load_model(path: str) -> fm.MorphableModel:
    if path == TOY_MODEL:
        return fm.synthesize_toy_model()
    p = Path(path)
    if not p.is_file():
        raise io.InputError(f"model file not found: {p}")
    return fm.load_model(p)


def load_classifier(cfg: RunConfig) -> SkinClassifier:
    if cfg.skin_gmm:
        try:
            return SkinClassifier.load(cfg.skin_gmm)
        except (KeyError, ValueError) as e:
            raise io.InputError(f"invalid skin classifier {cfg.skin_gmm}: {e}") from e
    return default_classifier(seed=0)


def camera_for_image(cfg: RunConfig, image):
    h, w = image.shape[:2]
    return CameraSpec(w, h, cfg.camera.focal).build()


def make_observation(model, cfg: RunConfig, image_path, landmark_path, classifier=None) -> Observation:
    image = io.read_image(image_path)
    landmarks = io.read_landmarks(landmark_path, expected=model.landmark_vertices.size)
    clf = classifier or load_classifier(cfg)
    A = attention_mask(clf.probability(image))
    return Observation(image, landmarks, A, camera_for_image(cfg, image), make_embedder(cfg.embedder))


def initial_coefficients(model, cfg: RunConfig) -> fm.CoefficientVector:
    return fm.CoefficientVector.for_model(model, gamma=synth.default_lighting(),
                                          pose=[0, 0, 0, 0, 0, cfg.fit.init_depth])


def fit_observation(model, obs: Observation, cfg: RunConfig):
    return fit_single_image(model, obs, cfg.fit.build(initial_coefficients(model, cfg)), cfg.loss_weights())


def fit_summary(trace) -> dict:
    last = trace.losses[trace.best_iteration] if 0 <= trace.best_iteration < len(trace.losses) else None
    return {"best_iteration": trace.best_iteration, "best_total": trace.best_total,
            "losses": last.to_json() if last is not None else None}


# ------------------------------------------------------------ cached fitting

def _fit_task(args):
    cfg_json, image, landmarks, coef_path = args
    cfg = _config_from_json(cfg_json)
    model = load_model(cfg.model)
    obs = make_observation(model, cfg, image, landmarks)
    x, trace = fit_observation(model, obs, cfg)
    io.write_coefficients(coef_path, x, {"fit": fit_summary(trace)})
    return coef_path


def _config_from_json(d: dict) -> RunConfig:
    from .config import apply_overrides
    return apply_overrides(RunConfig(), d)


def ensure_fits(cfg: RunConfig, jobs_list, refit: bool = False) -> None:
    """Fit every (image, landmarks, coefficient path) whose coefficients are missing."""
    todo = [(cfg.to_json(), str(i), str(l), str(c)) for i, l, c in jobs_list if refit or not Path(c).is_file()]
    if not todo:
        return
    log.info("fitting %d images with %d workers", len(todo), cfg.jobs)
    if cfg.jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as ex:
            list(ex.map(_fit_task, todo))
    else:
        for t in todo:
            _fit_task(t)


# ------------------------------------------------------------ manifests

def read_manifest(path):
    path = Path(path)
    m = io.read_json(path)
    if not isinstance(m, dict) or "sets" not in m:
        raise io.InputError(f"{path}: not a corpus manifest")
    base = path.parent

    def res(p):
        return str(base / p) if p is not None else None

    for s in m["sets"]:
        for key in ("gt_coefficients", "gt_mesh"):
            if key in s:
                s[key] = res(s[key])
        for im in s["images"]:
            for key in ("image", "landmarks", "coefficients", "truth"):
                if key in im:
                    im[key] = res(im[key])
    if m.get("model") and m["model"] != TOY_MODEL:
        m["model"] = res(m["model"])
    return m


def manifest_config(cfg: RunConfig, manifest: dict) -> RunConfig:
    """The manifest's model takes over unless the configuration names one."""
    if cfg.model == TOY_MODEL and manifest.get("model"):
        cfg = replace(cfg, model=manifest["model"])
    return cfg


def manifest_fit_jobs(manifest: dict):
    return [(im["image"], im["landmarks"], im["coefficients"]) for s in manifest["sets"] for im in s["images"]]


def load_image_sets(model, cfg: RunConfig, manifest: dict, with_observations: bool = True) -> list[ImageSet]:
    clf = load_classifier(cfg)
    sets = []
    for s in manifest["sets"]:
        recs = []
        for im in s["images"]:
            x = io.read_coefficients(im["coefficients"])
            if x.dims != model.dims:
                raise fm.DimensionError(f"{im['coefficients']}: dims {x.dims} do not match the model")
            obs = make_observation(model, cfg, im["image"], im["landmarks"], clf)
            recs.append(ImageRecord(x, confidence_features(model, obs, x), obs if with_observations else None,
                                    Path(im["image"]).name))
        gt = None
        if s.get("gt_coefficients"):
            gt = io.read_coefficients(s["gt_coefficients"]).alpha
        sets.append(ImageSet(recs, gt, s.get("name", "")))
    return sets


# ------------------------------------------------------------ synthesis

def synthesize_corpus(cfg: RunConfig, out_dir) -> dict:
    """Render a benchmark corpus and write its manifest; returns the manifest."""
    out = Path(out_dir)
    sp = cfg.synth
    model = load_model(cfg.model)
    model_rel = "model.m3dm"
    with io.atomic_path(out / model_rel) as tmp:
        fm.save_model(model, tmp)
    cam = synth.camera_for_size(sp.size) if cfg.camera.focal is None else CameraSpec(sp.size, sp.size, cfg.camera.focal).build()
    rng = np.random.default_rng(cfg.seed)
    sets = []
    for s in range(sp.count):
        name = f"subject_{s:03d}"
        sdir = out / name
        truth = synth.sample_subject(model, rng)
        if sp.poses == "grid":
            poses = synth.pose_grid()
        elif sp.poses == "random":
            poses = [(None, None)] * sp.views
        else:
            raise io.InputError(f"unknown pose mode {sp.poses!r}")
        gt = fm.CoefficientVector(truth.alpha, np.zeros(model.n_exp), truth.delta,
                                  synth.default_lighting(), [0, 0, 0, 0, 0, synth.DEFAULT_DEPTH])
        io.write_coefficients(sdir / "gt.json", gt)
        io.write_obj(sdir / "gt.obj", fm.evaluate_shape(model, truth.alpha, np.zeros(model.n_exp)), model.triangles)
        images = []
        for k, (p, y) in enumerate(poses):
            x = synth.sample_view(model, truth, rng, p, y)
            occlude = bool(rng.random() < sp.occlusion)
            noisy = bool(rng.random() < sp.landmark_noise)
            noise = sp.landmark_noise_px * sp.size / 224.0 if noisy else 0.0
            si = synth.render_synthetic(model, x, cam, truth.background, rng, occlude, noise, sp.pixel_noise)
            stem = f"view_{k:02d}"
            io.write_image(sdir / f"{stem}.png", si.image)
            io.write_landmarks(sdir / f"{stem}.lmk.txt", si.landmarks)
            io.write_coefficients(sdir / f"{stem}.truth.json", x)
            images.append({"image": f"{name}/{stem}.png", "landmarks": f"{name}/{stem}.lmk.txt",
                           "coefficients": f"{name}/{stem}.coef.json", "truth": f"{name}/{stem}.truth.json",
                           "pitch_deg": si.pitch_deg, "yaw_deg": si.yaw_deg,
                           "occluder": si.occluder.to_json() if si.occluder else None,
                           "landmark_noise_px": noise})
        sets.append({"name": name, "gt_coefficients": f"{name}/gt.json", "gt_mesh": f"{name}/gt.obj",
                     "background": list(truth.background), "images": images})
    manifest = {"version": MANIFEST_VERSION, "model": model_rel, "seed": cfg.seed,
                "camera": cam.to_json(), "sets": sets}
    io.write_json(out / "manifest.json", manifest)
    return manifest
