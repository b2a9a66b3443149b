import json
import shutil
from pathlib import Path

import jsonschema
import numpy as np
import pytest

from facerecon import cli, io, pipeline
from facerecon import face_model as fm
from facerecon.config import CONFIG_ENV, load_config
from facerecon.rasterizer import render_scene
from facerecon.schemas import load_schema
from facerecon.skin import synthetic_skin_corpus, write_labeled_csv

SIZE = 48
FAST = ["--iterations", "12"]


def run(*argv):
    return cli.main([str(a) for a in argv])


def tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def validate(path, schema):
    jsonschema.validate(json.loads(Path(path).read_text()), load_schema(schema))


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    assert run("synth", "--out", root, "--count", 2, "--size", SIZE, "--seed", 3,
               "--occlusion", 0.4, "--landmark-noise", 0.3) == 0
    return root


@pytest.fixture(scope="module")
def fitted(corpus, tmp_path_factory):
    root = tmp_path_factory.mktemp("fitted")
    shutil.copytree(corpus, root, dirs_exist_ok=True)
    assert run("fit", "--manifest", root / "manifest.json", *FAST) == 0
    return root


# ------------------------------------------------------------ synth

def test_synth_manifest_layout(corpus):
    validate(corpus / "manifest.json", "manifest")
    m = pipeline.read_manifest(corpus / "manifest.json")
    assert len(m["sets"]) == 2
    for s in m["sets"]:
        assert len(s["images"]) == 20
        poses = {(im["pitch_deg"], im["yaw_deg"]) for im in s["images"]}
        assert len(poses) == 20
        for im in s["images"]:
            assert io.read_image(im["image"]).shape == (SIZE, SIZE, 3)
            assert io.read_landmarks(im["landmarks"]).shape == (68, 2)
        assert Path(s["gt_mesh"]).is_file()
    validate(corpus / "subject_000" / "gt.json", "coefficients")


def test_synth_rerun_is_byte_identical(corpus, tmp_path):
    assert run("synth", "--out", tmp_path, "--count", 2, "--size", SIZE, "--seed", 3,
               "--occlusion", 0.4, "--landmark-noise", 0.3) == 0
    assert tree_bytes(tmp_path) == tree_bytes(corpus)


def test_occluder_lowers_attention(corpus):
    m = pipeline.read_manifest(corpus / "manifest.json")
    model = fm.load_model(m["model"])
    cfg = load_config(None, {"model": m["model"]})
    clf = pipeline.load_classifier(cfg)
    occluded, clean = [], []
    for s in m["sets"]:
        for im in s["images"]:
            obs = pipeline.make_observation(model, cfg, im["image"], im["landmarks"], clf)
            mask = render_scene(model, io.read_coefficients(im["truth"]), obs.camera).buffer.mask
            if mask.sum() < 20:
                continue
            (occluded if im["occluder"] else clean).append(obs.attention[mask].mean())
    assert occluded and clean
    assert np.mean(occluded) < np.mean(clean) - 0.05


def test_landmark_noise_recorded(corpus):
    m = pipeline.read_manifest(corpus / "manifest.json")
    noise = [im["landmark_noise_px"] for s in m["sets"] for im in s["images"]]
    assert set(noise) == {0.0, 2.0 * SIZE / 224}


# ------------------------------------------------------------ fit

def test_manifest_fit_outputs(fitted):
    m = pipeline.read_manifest(fitted / "manifest.json")
    for im in m["sets"][0]["images"]:
        validate(im["coefficients"], "coefficients")


def test_manifest_fit_parallel_matches_serial(corpus, fitted, tmp_path):
    shutil.copytree(corpus, tmp_path, dirs_exist_ok=True)
    assert run("fit", "--manifest", tmp_path / "manifest.json", "--jobs", 2, *FAST) == 0
    assert tree_bytes(tmp_path) == tree_bytes(fitted)


def test_manifest_fit_is_cached(fitted):
    m = pipeline.read_manifest(fitted / "manifest.json")
    coef = Path(m["sets"][0]["images"][0]["coefficients"])
    before = coef.stat().st_mtime_ns
    assert run("fit", "--manifest", fitted / "manifest.json", *FAST) == 0
    assert coef.stat().st_mtime_ns == before


def test_single_fit_rerun_is_byte_identical(corpus, tmp_path):
    img = corpus / "subject_000" / "view_07.png"
    lmk = corpus / "subject_000" / "view_07.lmk.txt"
    for d in ("a", "b"):
        assert run("fit", "--image", img, "--landmarks", lmk, "--out", tmp_path / d, *FAST) == 0
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    assert a == b and {"coefficients.json", "mesh.obj", "render.png", "trace.json"} <= set(a)
    validate(tmp_path / "a" / "coefficients.json", "coefficients")
    validate(tmp_path / "a" / "trace.json", "fit_trace")


# ------------------------------------------------------------ aggregate / conf-train

def test_conf_train_and_aggregate(fitted, tmp_path):
    man = fitted / "manifest.json"
    outs = []
    for d in ("a", "b"):
        out = tmp_path / d
        assert run("conf-train", "--manifest", man, "--epochs", 3, "--out", out, *FAST) == 0
        assert run("aggregate", "--manifest", man, "--predictor", out / "predictor.json",
                   "--out", out, "--sorted", *FAST) == 0
        outs.append(tree_bytes(out))
    assert outs[0] == outs[1]
    a = tmp_path / "a"
    validate(a / "predictor.json", "predictor")
    validate(a / "conf_train.json", "conf_train")
    validate(a / "aggregate_report.json", "aggregate_report")
    rep = json.loads((a / "aggregate_report.json").read_text())
    sums = [e["sum"] for e in rep["sets"][0]["confidence_sums"]]
    assert sums == sorted(sums, reverse=True) and len(sums) == 20
    assert all(np.isfinite(e["shape_error_mm"]) for e in rep["sets"])


def test_aggregate_averaging_needs_no_predictor(fitted, tmp_path):
    assert run("aggregate", "--manifest", fitted / "manifest.json", "--strategy", "averaging",
               "--out", tmp_path, *FAST) == 0
    rep = json.loads((tmp_path / "aggregate_report.json").read_text())
    m = pipeline.read_manifest(fitted / "manifest.json")
    alphas = [io.read_coefficients(im["coefficients"]).alpha for im in m["sets"][0]["images"]]
    assert np.allclose(rep["sets"][0]["alpha"], np.mean(alphas, axis=0), rtol=0, atol=1e-12)


def test_s1_rejects_elementwise_predictor(fitted, tmp_path):
    assert run("conf-train", "--manifest", fitted / "manifest.json", "--epochs", 1, "--out", tmp_path, *FAST) == 0
    assert run("aggregate", "--manifest", fitted / "manifest.json", "--strategy", "S1",
               "--predictor", tmp_path / "predictor.json", "--out", tmp_path, *FAST) == 2


# ------------------------------------------------------------ skin-train / eval / render

def test_skin_train_rerun_and_schema(tmp_path):
    rgb, labels = synthetic_skin_corpus(600, seed=2)
    write_labeled_csv(tmp_path / "px.csv", rgb, labels)
    for name in ("a.json", "b.json"):
        assert run("skin-train", "--csv", tmp_path / "px.csv", "--components", 2, "--out", tmp_path / name) == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    validate(tmp_path / "a.json", "skin_gmm")
    assert run("skin-train", "--csv", tmp_path / "missing.csv") == 2


def test_eval_report(corpus, tmp_path, capsys):
    gt = corpus / "subject_000" / "gt.obj"
    pred = corpus / "subject_001" / "gt.obj"
    for name in ("a.json", "b.json"):
        assert run("eval", "--pred", gt, pred, "--gt", gt, "--model", corpus / "model.m3dm",
                   "--out", tmp_path / name) == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    validate(tmp_path / "a.json", "eval_report")
    rep = json.loads((tmp_path / "a.json").read_text())
    assert rep["per_subject"]["gt.obj"] <= 1e-6 or len(rep["per_subject"]) == 1
    assert run("eval", "--pred", pred, "--gt", gt) == 0  # toy model supplies the nose tip
    V, T = io.read_obj(gt)
    io.write_obj(tmp_path / "small.obj", V[:50], T[np.all(T < 50, axis=1)])
    assert run("eval", "--pred", pred, "--gt", tmp_path / "small.obj") == 2


def test_render_outputs(corpus, tmp_path):
    coef = corpus / "subject_000" / "view_07.truth.json"
    args = ["render", "--coefficients", coef, "--mask", tmp_path / "m.png", "--depth", tmp_path / "d.png",
            "--config", _write_config(tmp_path, "[camera]\nwidth = 40\nheight = 32\n")]
    assert run(*args, "--out", tmp_path / "r1.png") == 0
    assert run(*args, "--out", tmp_path / "r2.png") == 0
    assert (tmp_path / "r1.png").read_bytes() == (tmp_path / "r2.png").read_bytes()
    img = io.read_image(tmp_path / "r1.png")
    mask = io.read_mask(tmp_path / "m.png")
    depth = io.read_depth(tmp_path / "d.png")
    assert img.shape == (32, 40, 3) and mask.any()
    assert np.array_equal(np.isfinite(depth), mask)
    assert run("render", "--coefficients", coef, "--model", tmp_path / "nope.m3dm") == 2


# ------------------------------------------------------------ exit codes

def test_exit_code_bad_input(corpus, tmp_path, capsys):
    lmk = corpus / "subject_000" / "view_00.lmk.txt"
    assert run("fit", "--image", tmp_path / "missing.png", "--landmarks", lmk) == 2
    assert run("fit", "--image", corpus / "subject_000" / "view_00.png") == 2
    (tmp_path / "short.txt").write_text("1 2\n3 4\n")
    assert run("fit", "--image", corpus / "subject_000" / "view_00.png", "--landmarks", tmp_path / "short.txt") == 2
    (tmp_path / "junk.png").write_bytes(b"not a png")
    assert run("fit", "--image", tmp_path / "junk.png", "--landmarks", lmk) == 2
    assert "error:" in capsys.readouterr().err


def test_exit_code_numeric_failure(corpus, tmp_path):
    lmk = io.read_landmarks(corpus / "subject_000" / "view_00.lmk.txt")
    io.write_landmarks(tmp_path / "far.txt", lmk + 1e7)
    assert run("fit", "--image", corpus / "subject_000" / "view_00.png", "--landmarks", tmp_path / "far.txt",
               "--out", tmp_path, *FAST) == 3


# ------------------------------------------------------------ configuration

def _write_config(tmp_path, text, name="run.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_config_layers(tmp_path, monkeypatch):
    p = _write_config(tmp_path, "seed = 5\n[fit]\niterations = 7\n[weights]\nphoto = 2.0\n")
    cfg = load_config(p)
    assert cfg.seed == 5 and cfg.fit.iterations == 7 and cfg.loss_weights().photo == 2.0
    assert cfg.fit.lr == 0.01
    assert load_config(p, {"fit.iterations": 9, "seed": None}).fit.iterations == 9
    monkeypatch.setenv(CONFIG_ENV, str(p))
    assert load_config().fit.iterations == 7
    other = _write_config(tmp_path, "[fit]\niterations = 3\n", "other.toml")
    assert load_config(other).fit.iterations == 3


def test_config_errors(tmp_path, monkeypatch):
    for text in ("bogus = 1\n", "[fit]\nspeed = 2\n", "[weights]\nfoo = 1.0\n", "jobs = 0\n", "seed = [\n"):
        with pytest.raises(io.InputError):
            load_config(_write_config(tmp_path, text))
    with pytest.raises(io.InputError):
        load_config(tmp_path / "absent.toml")
    monkeypatch.setenv(CONFIG_ENV, str(_write_config(tmp_path, "bogus = 1\n", "env.toml")))
    assert run("render", "--coefficients", tmp_path / "x.json") == 2


# ------------------------------------------------------------ io roundtrips

def test_image_and_mask_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(7, 9, 3)) / 255.0
    io.write_image(tmp_path / "i.png", img)
    assert np.array_equal(io.read_image(tmp_path / "i.png"), img)
    mask = rng.random((7, 9)) < 0.5
    io.write_mask(tmp_path / "m.png", mask)
    assert np.array_equal(io.read_mask(tmp_path / "m.png"), mask)


def test_depth_roundtrip(tmp_path):
    d = np.array([[600.0, 612.3], [np.inf, 0.05]])
    io.write_depth(tmp_path / "d.png", d)
    back = io.read_depth(tmp_path / "d.png")
    assert back[0, 0] == 600.0 and back[0, 1] == pytest.approx(612.3, abs=0.05)
    assert np.isinf(back[1, 0])


def test_landmark_roundtrip_and_errors(tmp_path):
    pts = np.random.default_rng(1).uniform(0, 224, size=(68, 2))
    io.write_landmarks(tmp_path / "l.txt", pts)
    assert np.allclose(io.read_landmarks(tmp_path / "l.txt", expected=68), pts, atol=5e-7)
    (tmp_path / "c.txt").write_text("# comment\n\n1 2\n3 4\n")
    assert io.read_landmarks(tmp_path / "c.txt").tolist() == [[1, 2], [3, 4]]
    for bad in ("1 2 3\n", "1 x\n", "nan 1\n"):
        (tmp_path / "b.txt").write_text(bad)
        with pytest.raises(io.InputError):
            io.read_landmarks(tmp_path / "b.txt")
    with pytest.raises(io.InputError):
        io.read_landmarks(tmp_path / "l.txt", expected=5)


def test_obj_roundtrip_and_negative_indices(tmp_path):
    V = np.random.default_rng(2).normal(size=(6, 3)).round(6)
    T = np.array([[0, 1, 2], [3, 4, 5]])
    io.write_obj(tmp_path / "m.obj", V, T, colors=np.full((6, 3), 0.5))
    V2, T2 = io.read_obj(tmp_path / "m.obj")
    assert np.allclose(V2, V, atol=1e-12) and np.array_equal(T2, T)
    (tmp_path / "n.obj").write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nv 1 1 0\nf -4/1 -3/2 -2/3 -1/4\n")
    V3, T3 = io.read_obj(tmp_path / "n.obj")
    assert T3.tolist() == [[0, 1, 2], [0, 2, 3]]
    with pytest.raises(io.InputError):
        io.read_obj(tmp_path / "absent.obj")


def test_coefficient_roundtrip(tmp_path, toy):
    x = fm.CoefficientVector.for_model(toy, pose=[0.1, -0.2, 0.3, 1, 2, 600])
    x.alpha[:] = np.random.default_rng(3).normal(size=toy.n_id)
    io.write_coefficients(tmp_path / "c.json", x, {"note": "x"})
    y = io.read_coefficients(tmp_path / "c.json")
    assert y.flatten().tobytes() == x.flatten().tobytes()
    (tmp_path / "bad.json").write_text('{"alpha": [1]}')
    with pytest.raises(io.InputError):
        io.read_coefficients(tmp_path / "bad.json")
    (tmp_path / "broken.json").write_text("{")
    with pytest.raises(io.InputError):
        io.read_json(tmp_path / "broken.json")
