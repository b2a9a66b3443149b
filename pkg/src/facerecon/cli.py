"""Command-line entry point: fit, synth, aggregate, conf-train, skin-train, eval, render."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import aggregator as ag
from . import eval_geom as eg
from . import face_model as fm
from . import io, pipeline
from .config import load_config
from .rasterizer import render_scene
from .skin import load_labeled_csv, train_classifier

log = logging.getLogger("facerecon")

EXIT_OK, EXIT_BAD_INPUT, EXIT_NUMERIC = 0, 2, 3


def _config(args, **extra):
    overrides = {"seed": args.seed, "jobs": getattr(args, "jobs", None), "model": getattr(args, "model", None),
                 "skin_gmm": getattr(args, "skin_gmm", None)}
    if getattr(args, "iterations", None) is not None:
        overrides["fit.iterations"] = args.iterations
    if getattr(args, "lr", None) is not None:
        overrides["fit.lr"] = args.lr
    overrides.update(extra)
    return load_config(args.config, overrides)


def _mesh_outputs(model, x, out: Path, stem: str):
    S = fm.evaluate_shape(model, x.alpha, x.beta)
    tex, _ = fm.evaluate_texture(model, x.delta)
    io.write_obj(out / f"{stem}.obj", S, model.triangles, tex)


# ------------------------------------------------------------ commands

def cmd_fit(args) -> int:
    cfg = _config(args)
    if args.manifest:
        manifest = pipeline.read_manifest(args.manifest)
        cfg = pipeline.manifest_config(cfg, manifest)
        pipeline.ensure_fits(cfg, pipeline.manifest_fit_jobs(manifest), refit=args.refit)
        return EXIT_OK
    if not (args.image and args.landmarks):
        raise io.InputError("fit needs --image and --landmarks, or --manifest")
    model = pipeline.load_model(cfg.model)
    obs = pipeline.make_observation(model, cfg, args.image, args.landmarks)
    x, trace = pipeline.fit_observation(model, obs, cfg)
    out = Path(args.out or cfg.output)
    io.write_coefficients(out / "coefficients.json", x, {"fit": pipeline.fit_summary(trace)})
    _mesh_outputs(model, x, out, "mesh")
    buf = render_scene(model, x, obs.camera).buffer
    io.write_image(out / "render.png", np.where(buf.mask[..., None], buf.color, obs.image))
    io.write_json(out / "trace.json", trace.to_json())
    print(f"fit: total {trace.best_total:.6g} -> {out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    extra = {f"synth.{k}": getattr(args, k) for k in
             ("count", "size", "poses", "views", "occlusion", "landmark_noise", "pixel_noise")}
    cfg = _config(args, **extra)
    out = Path(args.out or cfg.output)
    m = pipeline.synthesize_corpus(cfg, out)
    print(f"synth: {len(m['sets'])} subjects, {sum(len(s['images']) for s in m['sets'])} images -> {out}")
    return EXIT_OK


def _load_predictor(path):
    if not path:
        return None
    return ag.ConfidencePredictor.from_json(io.read_json(path))


def cmd_aggregate(args) -> int:
    cfg = _config(args)
    manifest = pipeline.read_manifest(args.manifest)
    cfg = pipeline.manifest_config(cfg, manifest)
    pipeline.ensure_fits(cfg, pipeline.manifest_fit_jobs(manifest))
    model = pipeline.load_model(cfg.model)
    sets = pipeline.load_image_sets(model, cfg, manifest, with_observations=False)
    predictor = _load_predictor(args.predictor)
    if args.strategy in ("S2", "S3", "S4") and predictor is None:
        predictor = ag.ConfidencePredictor(model.n_id, seed=cfg.seed)
        log.info("no predictor given; using the untrained one (uniform confidences)")
    scalar = _load_predictor(args.predictor if args.strategy == "S1" else None)
    if args.strategy == "S1":
        if scalar is None:
            scalar = ag.ConfidencePredictor(1, seed=cfg.seed)
        elif scalar.n_out != 1:
            raise io.InputError("strategy S1 needs a predictor trained with --global")
    out = Path(args.out or cfg.output)
    report = {"strategy": args.strategy, "sets": []}
    for s in sets:
        alpha = ag.strategy_alphas(s, predictor if args.strategy != "S1" else None, scalar)[args.strategy]
        entry = {"name": s.name, "alpha": alpha.tolist()}
        conf_src = scalar if args.strategy == "S1" else predictor
        if conf_src is not None:
            sums = ag.confidence_sums(conf_src.confidences(s.features, model.n_id)).tolist()
            entry["confidence_sums"] = [{"image": r.name, "sum": v} for r, v in zip(s.records, sums)]
            if args.sorted:
                entry["confidence_sums"].sort(key=lambda e: -e["sum"])
        if s.gt_alpha is not None:
            entry["shape_error_mm"] = eg.shape_error(ag.neutral_mesh(model, alpha).vertices,
                                                     ag.neutral_mesh(model, s.gt_alpha))
        io.write_obj(out / f"{s.name}.aggregated.obj",
                     fm.evaluate_shape(model, alpha, np.zeros(model.n_exp)), model.triangles)
        report["sets"].append(entry)
    io.write_json(out / "aggregate_report.json", report)
    print(f"aggregate: {len(sets)} sets with {args.strategy} -> {out}")
    return EXIT_OK


def cmd_conf_train(args) -> int:
    cfg = _config(args, **{"confidence.epochs": args.epochs, "confidence.lr": args.conf_lr})
    manifest = pipeline.read_manifest(args.manifest)
    cfg = pipeline.manifest_config(cfg, manifest)
    pipeline.ensure_fits(cfg, pipeline.manifest_fit_jobs(manifest))
    model = pipeline.load_model(cfg.model)
    sets = pipeline.load_image_sets(model, cfg, manifest)
    n_train = len(sets) if args.all else max(1, int(round(cfg.confidence.train_fraction * len(sets))))
    train, held = sets[:n_train], sets[n_train:]
    scaler = ag.fit_scaler(train)
    n_out = 1 if args.global_ else model.n_id
    predictor = ag.ConfidencePredictor(n_out, hidden=cfg.confidence.hidden, seed=cfg.seed, scaler=scaler)
    predictor, trace = ag.train_confidence(model, predictor, train, cfg.confidence.epochs,
                                           cfg.confidence.lr, cfg.seed)
    out = Path(args.out or cfg.output)
    io.write_json(out / "predictor.json", predictor.to_json())
    result = {"trace": trace.to_json(), "train_sets": [s.name for s in train],
              "heldout_sets": [s.name for s in held]}
    if held and all(s.gt_alpha is not None for s in held) and not args.global_:
        result["heldout_report"] = ag.evaluate_strategies(model, held, predictor)
        result["pose_bins"] = ag.pose_bin_confidence(held, predictor)
        print(ag.format_report(result["heldout_report"]))
    io.write_json(out / "conf_train.json", result)
    print(f"conf-train: loss {trace.loss[0]:.6g} -> {min(trace.loss):.6g} -> {out}")
    return EXIT_OK


def cmd_skin_train(args) -> int:
    cfg = _config(args)
    if not Path(args.csv).is_file():
        raise io.InputError(f"CSV not found: {args.csv}")
    rgb, labels = load_labeled_csv(args.csv)
    clf = train_classifier(rgb, labels, args.components, seed=cfg.seed)
    out = Path(args.out or Path(cfg.output) / "skin_gmm.json")
    io.write_json(out, clf.to_json())
    print(f"skin-train: {len(labels)} samples -> {out}")
    return EXIT_OK


def _gt_mesh(args, model_hint=None) -> eg.Mesh:
    V, T = io.read_obj(args.gt)
    if args.nose_index is not None:
        nose = args.nose_index
    elif args.nose is not None:
        nose = int(np.argmin(np.linalg.norm(V - np.array(args.nose), axis=1)))
    elif model_hint is not None and len(V) == model_hint.n_vertices:
        nose = model_hint.nose_tip_vertex
    else:
        raise io.InputError("ground-truth nose tip unknown; pass --nose-index or --nose")
    if not 0 <= nose < len(V):
        raise io.InputError(f"nose index {nose} out of range")
    return eg.Mesh(V, T, nose)


def cmd_eval(args) -> int:
    cfg = _config(args)
    model = pipeline.load_model(cfg.model) if args.nose_index is None and args.nose is None else None
    gt = _gt_mesh(args, model)
    cropped = eg.crop_mesh(gt, gt.vertices[gt.nose_tip], args.radius)
    per = {}
    for p in args.pred:
        V, _ = io.read_obj(p)
        icp = eg.icp_isotropic(V, cropped, init=args.init)
        aligned = icp.apply(V)
        err = (eg.point_to_point_rmse(aligned, cropped.vertices) if args.metric == "point"
               else eg.point_to_plane_rmse(aligned, cropped))
        per[Path(p).name] = err
    vals = np.array(list(per.values()))
    report = {"metric": args.metric, "radius_mm": args.radius, "mean": float(vals.mean()),
              "std": float(vals.std()), "per_subject": per}
    text = io.dumps_json(report)
    if args.out:
        io.write_text(args.out, text)
    print(text, end="")
    return EXIT_OK


def cmd_render(args) -> int:
    cfg = _config(args)
    model = pipeline.load_model(cfg.model)
    x = io.read_coefficients(args.coefficients)
    if x.dims != model.dims:
        raise fm.DimensionError("coefficients do not match the model")
    cam = cfg.camera.build()
    buf = render_scene(model, x, cam, tuple(args.background)).buffer
    out = Path(args.out or Path(cfg.output) / "render.png")
    io.write_image(out, buf.color)
    if args.mask:
        io.write_mask(args.mask, buf.mask)
    if args.depth:
        io.write_depth(args.depth, buf.depth)
    print(f"render: {cam.width}x{cam.height} -> {out}")
    return EXIT_OK


# ------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration (default: $FACERECON_CONFIG)")
    common.add_argument("--seed", type=int)
    common.add_argument("--model", help="model container path, or 'toy'")
    common.add_argument("--skin-gmm", dest="skin_gmm")
    common.add_argument("--jobs", type=int, help="worker processes for per-image fitting")
    common.add_argument("--out")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="facerecon", description="Morphable-model face reconstruction toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", parents=[common], help="fit coefficients to an image")
    f.add_argument("--image")
    f.add_argument("--landmarks")
    f.add_argument("--manifest", help="fit every image of a corpus (cached beside the images)")
    f.add_argument("--refit", action="store_true")
    f.add_argument("--iterations", type=int)
    f.add_argument("--lr", type=float)
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("synth", parents=[common], help="render a synthetic benchmark corpus")
    s.add_argument("--count", type=int)
    s.add_argument("--size", type=int)
    s.add_argument("--poses", choices=("grid", "random"))
    s.add_argument("--views", type=int)
    s.add_argument("--occlusion", type=float, help="fraction of images with an occluder")
    s.add_argument("--landmark-noise", dest="landmark_noise", type=float,
                   help="fraction of images with perturbed landmarks")
    s.add_argument("--pixel-noise", dest="pixel_noise", type=float)
    s.set_defaults(func=cmd_synth)

    a = sub.add_parser("aggregate", parents=[common], help="aggregate identity over image sets")
    a.add_argument("--manifest", required=True)
    a.add_argument("--strategy", choices=("averaging", "S1", "S2", "S3", "S4"), default="S4")
    a.add_argument("--predictor")
    a.add_argument("--sorted", action="store_true", help="sort confidence sums in descending order")
    a.add_argument("--iterations", type=int)
    a.set_defaults(func=cmd_aggregate)

    c = sub.add_parser("conf-train", parents=[common], help="train the confidence predictor")
    c.add_argument("--manifest", required=True)
    c.add_argument("--epochs", type=int)
    c.add_argument("--conf-lr", dest="conf_lr", type=float)
    c.add_argument("--global", dest="global_", action="store_true", help="one confidence per image")
    c.add_argument("--all", action="store_true", help="train on every set (no held-out split)")
    c.add_argument("--iterations", type=int)
    c.set_defaults(func=cmd_conf_train)

    k = sub.add_parser("skin-train", parents=[common], help="train the skin color classifier")
    k.add_argument("--csv", required=True)
    k.add_argument("--components", type=int, default=8)
    k.set_defaults(func=cmd_skin_train)

    e = sub.add_parser("eval", parents=[common], help="crop, align and measure predicted meshes")
    e.add_argument("--pred", nargs="+", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--nose-index", dest="nose_index", type=int)
    e.add_argument("--nose", type=float, nargs=3)
    e.add_argument("--radius", type=float, default=eg.CROP_RADIUS)
    e.add_argument("--metric", choices=("plane", "point"), default="plane")
    e.add_argument("--init", choices=("pca", "centroid", "identity"), default="pca")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("render", parents=[common], help="render coefficients to an image")
    r.add_argument("--coefficients", required=True)
    r.add_argument("--background", type=float, nargs=3, default=(0.0, 0.0, 0.0))
    r.add_argument("--mask")
    r.add_argument("--depth")
    r.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FloatingPointError as e:
        print(f"error: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (io.InputError, fm.ModelFormatError, fm.DimensionError, FileNotFoundError,
            eg.DegenerateAlignmentError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
