import numpy as np
import pytest

from facerecon import face_model as fm
from facerecon.rasterizer import (project_landmarks, rasterize, rasterize_backward, render_image,
                                  render_scene)
from facerecon.scene import Camera
from oracles import brute_force_rasterize, brute_force_rasterize_vec


def random_scene(rng, size=None, n_tri=50):
    W = int(size or rng.integers(8, 65))
    H = int(size or rng.integers(8, 65))
    V = 3 * n_tri // 2
    mode = rng.integers(3)
    if mode == 0:
        uv = rng.uniform(-5, [W + 5, H + 5], size=(V, 2))
    elif mode == 1:
        # vertices on the pixel-center lattice: exact edge and corner ties
        uv = rng.integers(-2, [W + 2, H + 2], size=(V, 2)) + 0.5
    else:
        # integer lattice (pixel corners), dyadic depths: exact depth ties
        uv = rng.integers(-2, [W + 2, H + 2], size=(V, 2)).astype(float)
    z = rng.choice([64.0, 128.0, 256.0], size=V) if mode == 2 else rng.uniform(50, 500, size=V)
    valid = rng.random(V) > 0.05
    tris = np.array([rng.choice(V, 3, replace=False) for _ in range(n_tri)])
    colors = rng.uniform(0, 1, size=(V, 3))
    return uv, z, valid, tris, colors, W, H


def check_buffer_invariants(buf):
    m = buf.mask
    assert np.array_equal(m, buf.triangle >= 0)
    assert np.array_equal(m, np.isfinite(buf.depth))
    assert np.all(buf.bary[m] >= -1e-12)
    assert np.allclose(buf.bary[m].sum(-1), 1.0, atol=1e-9)
    assert np.allclose(buf.bary_screen[m].sum(-1), 1.0, atol=1e-9)


def test_matches_brute_force_oracle_exactly():
    rng = np.random.default_rng(0)
    for _ in range(30):
        uv, z, valid, tris, colors, W, H = random_scene(rng)
        buf = rasterize(uv, z, tris, colors, W, H, valid=valid, background=(0.1, 0.2, 0.3))
        tid, dep, wts, col = brute_force_rasterize_vec(uv, z, valid, tris, W, H, colors, (0.1, 0.2, 0.3))
        assert np.array_equal(buf.triangle, tid)
        assert np.array_equal(buf.depth, dep)
        assert np.array_equal(buf.bary, wts)
        assert np.array_equal(buf.color, col)
        check_buffer_invariants(buf)


def test_loop_oracle_agrees_on_small_scenes():
    rng = np.random.default_rng(1)
    for _ in range(5):
        uv, z, valid, tris, colors, W, H = random_scene(rng, size=12, n_tri=12)
        buf = rasterize(uv, z, tris, colors, W, H, valid=valid)
        tid, dep, wts = brute_force_rasterize(uv, z, valid, tris, W, H)
        assert np.array_equal(buf.triangle, tid) and np.array_equal(buf.depth, dep)
        assert np.array_equal(buf.bary, wts)


def _quad(x0, y0, x1, y1, z):
    # two front-facing triangles (positive signed area in u, v)
    uv = np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], float)
    return uv, np.full(4, z), np.array([[0, 1, 2], [0, 2, 3]])


def test_nearer_triangle_wins_and_background():
    uv1, z1, t1 = _quad(2, 2, 10, 10, 200.0)
    uv2, z2, t2 = _quad(5, 5, 14, 14, 100.0)
    uv = np.vstack([uv1, uv2])
    z = np.concatenate([z1, z2])
    tris = np.vstack([t1, t2 + 4])
    colors = np.vstack([np.tile([1.0, 0, 0], (4, 1)), np.tile([0, 0, 1.0], (4, 1))])
    buf = rasterize(uv, z, tris, colors, 16, 16, background=(0.5, 0.5, 0.5))
    assert np.allclose(buf.color[7, 7], [0, 0, 1]) and buf.depth[7, 7] == pytest.approx(100.0)
    assert np.allclose(buf.color[3, 3], [1, 0, 0])
    assert not buf.mask[0, 0] and np.array_equal(buf.color[0, 0], [0.5, 0.5, 0.5])
    assert buf.depth[0, 0] == np.inf and buf.triangle[0, 0] == -1


def test_back_facing_culled():
    uv, z, t = _quad(2, 2, 10, 10, 100.0)
    buf = rasterize(uv, z, t[:, ::-1], np.ones((4, 3)), 12, 12)
    assert not buf.mask.any()


def test_shared_edge_covered_exactly_once():
    # diagonal and outer edges pass through pixel centers
    uv, z, t = _quad(0.5, 0.5, 8.5, 8.5, 100.0)
    counts = np.zeros((10, 10), int)
    for k in range(2):
        counts += rasterize(uv, z, t[k:k + 1], np.ones((4, 3)), 10, 10).mask
    assert counts.max() == 1
    full = rasterize(uv, z, t, np.ones((4, 3)), 10, 10).mask
    assert np.array_equal(full, counts == 1)
    # top-left rule: left and top edges owned, right and bottom not
    assert full[0, 0] and full[7, 7] and not full[8, 0] and not full[0, 8]


def test_depth_monotonicity_under_translation():
    rng = np.random.default_rng(2)
    cam = Camera(50000.0, 32.0, 32.0, 64, 64)
    P = rng.normal(size=(40, 3)) * [0.5, 0.5, 0.2] + [0, 0, 1000.0]
    tris = np.array([rng.choice(40, 3, replace=False) for _ in range(30)])
    from facerecon.scene import project_perspective
    uv, z, _ = project_perspective(P, cam)
    P2 = P + [0, 0, 50.0]
    uv2, z2, _ = project_perspective(P2 * [1 + 50 / 1000.0, 1 + 50 / 1000.0, 1], cam)
    a = rasterize(uv, z, tris, np.ones((40, 3)), 64, 64)
    b = rasterize(uv2, z2, tris, np.ones((40, 3)), 64, 64)
    assert np.array_equal(a.triangle, b.triangle)


def _frozen_colors(buf, uv, z, tris, colors, pixels):
    """Pixel colors with the assignment frozen, recomputed from scratch."""
    out = []
    for r, c in pixels:
        a, b, d = tris[buf.triangle[r, c]]
        P = uv[[a, b, d]]
        p = np.array([c + 0.5, r + 0.5])
        R = P - p
        area = (P[1, 0] - P[0, 0]) * (P[2, 1] - P[0, 1]) - (P[2, 0] - P[0, 0]) * (P[1, 1] - P[0, 1])
        lam = np.array([R[1, 0] * R[2, 1] - R[1, 1] * R[2, 0], R[2, 0] * R[0, 1] - R[2, 1] * R[0, 0],
                        R[0, 0] * R[1, 1] - R[0, 1] * R[1, 0]]) / area
        w = lam / z[[a, b, d]]
        w /= w.sum()
        out.append(w @ colors[[a, b, d]])
    return np.array(out)


def test_backward_matches_fd_with_frozen_assignment():
    rng = np.random.default_rng(3)
    V = 30
    uv = rng.uniform(0, 32, size=(V, 2))
    z = rng.uniform(100, 300, size=V)
    tris = []
    while len(tris) < 25:
        t = rng.choice(V, 3, replace=False)
        P = uv[t]
        area = (P[1, 0] - P[0, 0]) * (P[2, 1] - P[0, 1]) - (P[2, 0] - P[0, 0]) * (P[1, 1] - P[0, 1])
        tris.append(t if area > 0 else t[::-1])
    tris = np.array(tris)
    colors = rng.uniform(0, 1, size=(V, 3))
    buf = rasterize(uv, z, tris, colors, 32, 32)
    # interior pixels: 3x3 neighbourhood shares one triangle
    T = buf.triangle
    pix = [(r, c) for r in range(1, 31) for c in range(1, 31)
           if T[r, c] >= 0 and np.all(T[r - 1:r + 2, c - 1:c + 2] == T[r, c])]
    assert len(pix) > 20
    G = np.zeros((32, 32, 3))
    for r, c in pix:
        G[r, c] = rng.normal(size=3)
    g_col, g_uv, g_z = rasterize_backward(buf, uv, z, tris, colors, G)
    Gp = np.array([G[r, c] for r, c in pix])

    def f(uv_, z_, col_):
        return np.sum(Gp * _frozen_colors(buf, uv_, z_, tris, col_, pix))

    h = 1e-5
    for arr, grad in ((uv, g_uv), (z, g_z), (colors, g_col)):
        flat = arr.ravel()
        for i in rng.choice(flat.size, 25, replace=False):
            args = [uv.copy(), z.copy(), colors.copy()]
            k = [id(uv), id(z), id(colors)].index(id(arr))
            ap, am = flat.copy(), flat.copy()
            ap[i] += h
            am[i] -= h
            args[k] = ap.reshape(arr.shape)
            fp = f(*args)
            args[k] = am.reshape(arr.shape)
            fd = (fp - f(*args)) / (2 * h)
            assert fd == pytest.approx(grad.ravel()[i], rel=1e-4, abs=1e-8)


def test_render_image_properties(toy, cam64):
    x = fm.CoefficientVector.for_model(toy, gamma=[3.0] + [0] * 8, pose=[0, 0, 0, 0, 0, 600])
    buf = render_image(toy, x, cam64)
    assert buf.mask.sum() > 100
    assert buf.color.min() >= 0 and buf.color.max() <= 1
    check_buffer_invariants(buf)
    again = render_image(toy, x, cam64)
    for f in ("color", "mask", "depth", "triangle", "bary"):
        assert np.array_equal(getattr(buf, f), getattr(again, f))
    x.gamma = np.zeros(9)
    dark = render_image(toy, x, cam64)
    assert np.all(dark.color[dark.mask] == 0.0)


def test_project_landmarks(toy, cam64):
    x = fm.CoefficientVector.for_model(toy, gamma=[3.0] + [0] * 8, pose=[0, 0, 0, 0, 0, 600])
    lm = project_landmarks(toy, x, cam64)
    assert lm.points.shape == (68, 2) and np.array_equal(lm.weights, toy.landmark_weights)
    buf = render_image(toy, x, cam64)
    u, v = lm.points[30]
    assert buf.mask[int(v), int(u)] and lm.visible[30]
    yawed = x.copy()
    yawed.pose[1] = 0.3
    lm2 = project_landmarks(toy, yawed, cam64)
    nose = list(range(27, 36))
    shift = lm2.points[nose, 0] - lm.points[nose, 0]
    assert np.all(shift > 0) or np.all(shift < 0)


def test_landmark_behind_camera_reported(toy, cam64):
    x = fm.CoefficientVector.for_model(toy, gamma=[3.0] + [0] * 8, pose=[0, 0, 0, 0, 0, -600])
    lm = project_landmarks(toy, x, cam64)
    assert not lm.visible.any() and np.all(np.isfinite(lm.points))


def test_render_state_pipeline_order(toy, cam64):
    rng = np.random.default_rng(4)
    x = fm.CoefficientVector(rng.normal(size=8), rng.normal(size=6), rng.normal(size=8),
                             [3.0, 0.2, -0.1, 0.3, 0, 0, 0, 0, 0], [0.1, 0.2, 0.0, 1, 2, 600])
    st = render_scene(toy, x, cam64)
    N = fm.vertex_normals(fm.evaluate_shape(toy, x.alpha, x.beta), toy.triangles)
    assert np.allclose(st.cam_normals, N @ st.rotation.T, atol=1e-12)
    tex = np.clip(fm.evaluate_texture_raw(toy, x.delta), 0, 1)
    from facerecon.scene import sh_basis
    assert np.allclose(st.color, np.clip(tex * (sh_basis(st.cam_normals) @ x.gamma)[:, None], 0, 1))
