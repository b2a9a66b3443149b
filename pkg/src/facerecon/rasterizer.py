"""Z-buffered triangle rasterization and the render pipeline.

Differentiation contract: the pixel-to-triangle assignment is frozen. Pixel
colors depend smoothly on vertex colors, on vertex depths through
perspective-correct weights, and on projected vertex positions through the
screen-space barycentric coordinates.

A triangle is front-facing when its signed area in raster (u, v) coordinates
is positive, which is the case when its camera-space normal (right-hand rule)
points towards the camera. Others are culled.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from . import face_model as fm
from .scene import (Camera, Pose, project_backward, project_perspective, rotation_derivatives,
                    sh_basis, sh_basis_jacobian)

LANDMARK_DEPTH_TOLERANCE = 2.0  # mm


@dataclass
class RenderBuffer:
    color: np.ndarray        # (H, W, 3)
    mask: np.ndarray         # (H, W) bool
    depth: np.ndarray        # (H, W), +inf where empty
    triangle: np.ndarray     # (H, W) int, -1 where empty
    bary: np.ndarray         # (H, W, 3) perspective-correct weights
    bary_screen: np.ndarray  # (H, W, 3) screen-space barycentrics

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape


@numba.njit(cache=True)
def _raster_kernel(uv, z, valid, tris, width, height, tri_id, depth, bs, bp):
    for t in range(tris.shape[0]):
        i0, i1, i2 = tris[t, 0], tris[t, 1], tris[t, 2]
        if not (valid[i0] and valid[i1] and valid[i2]):
            continue
        u0, v0 = uv[i0, 0], uv[i0, 1]
        u1, v1 = uv[i1, 0], uv[i1, 1]
        u2, v2 = uv[i2, 0], uv[i2, 1]
        area = (u1 - u0) * (v2 - v0) - (u2 - u0) * (v1 - v0)
        if not area > 0.0:
            continue
        umin = min(u0, min(u1, u2))
        umax = max(u0, max(u1, u2))
        vmin = min(v0, min(v1, v2))
        vmax = max(v0, max(v1, v2))
        c0 = max(0, int(np.ceil(umin - 0.5)))
        c1 = min(width - 1, int(np.floor(umax - 0.5)))
        r0 = max(0, int(np.ceil(vmin - 0.5)))
        r1 = min(height - 1, int(np.floor(vmax - 0.5)))
        if c0 > c1 or r0 > r1:
            continue
        # top-left tie rule for the edge opposite each vertex
        du, dv = u2 - u1, v2 - v1
        tl0 = dv < 0.0 or (dv == 0.0 and du > 0.0)
        du, dv = u0 - u2, v0 - v2
        tl1 = dv < 0.0 or (dv == 0.0 and du > 0.0)
        du, dv = u1 - u0, v1 - v0
        tl2 = dv < 0.0 or (dv == 0.0 and du > 0.0)
        z0, z1, z2 = z[i0], z[i1], z[i2]
        for row in range(r0, r1 + 1):
            py = row + 0.5
            for col in range(c0, c1 + 1):
                px = col + 0.5
                r0x, r0y = u0 - px, v0 - py
                r1x, r1y = u1 - px, v1 - py
                r2x, r2y = u2 - px, v2 - py
                n0 = r1x * r2y - r1y * r2x
                n1 = r2x * r0y - r2y * r0x
                n2 = r0x * r1y - r0y * r1x
                if n0 < 0.0 or n1 < 0.0 or n2 < 0.0:
                    continue
                if (n0 == 0.0 and not tl0) or (n1 == 0.0 and not tl1) or (n2 == 0.0 and not tl2):
                    continue
                l0 = n0 / area
                l1 = n1 / area
                l2 = n2 / area
                w0 = l0 / z0
                w1 = l1 / z1
                w2 = l2 / z2
                s = w0 + w1 + w2
                d = 1.0 / s
                if d < depth[row, col]:
                    depth[row, col] = d
                    tri_id[row, col] = t
                    bs[row, col, 0] = l0
                    bs[row, col, 1] = l1
                    bs[row, col, 2] = l2
                    bp[row, col, 0] = w0 / s
                    bp[row, col, 1] = w1 / s
                    bp[row, col, 2] = w2 / s


def rasterize(uv, depth, triangles, colors, width: int, height: int, valid=None,
              background=(0.0, 0.0, 0.0)) -> RenderBuffer:
    """Z-buffer ``triangles`` at pixel centers; nearest depth wins, ties go to the lower index."""
    uv = np.ascontiguousarray(uv, dtype=np.float64)
    z = np.ascontiguousarray(depth, dtype=np.float64)
    tris = np.ascontiguousarray(triangles, dtype=np.int64)
    if valid is None:
        valid = z > 1e-3
    valid = np.ascontiguousarray(valid & np.all(np.isfinite(uv), axis=1), dtype=np.bool_)
    tri_id = np.full((height, width), -1, dtype=np.int64)
    zbuf = np.full((height, width), np.inf)
    bs = np.zeros((height, width, 3))
    bp = np.zeros((height, width, 3))
    _raster_kernel(uv, z, valid, tris, int(width), int(height), tri_id, zbuf, bs, bp)
    mask = tri_id >= 0
    color = np.empty((height, width, 3))
    color[:] = np.asarray(background, dtype=np.float64)
    _fill_color_kernel(tri_id, tris, bp, np.ascontiguousarray(colors, dtype=np.float64), color)
    return RenderBuffer(color, mask, zbuf, tri_id, bp, bs)


@numba.njit(cache=True)
def _fill_color_kernel(tri_id, tris, bp, colors, out):
    H, W = tri_id.shape
    for row in range(H):
        for col in range(W):
            t = tri_id[row, col]
            if t < 0:
                continue
            a, b, c = tris[t, 0], tris[t, 1], tris[t, 2]
            w0, w1, w2 = bp[row, col, 0], bp[row, col, 1], bp[row, col, 2]
            for ch in range(3):
                out[row, col, ch] = (w0 * colors[a, ch] + w1 * colors[b, ch]) + w2 * colors[c, ch]


@numba.njit(cache=True)
def _backward_kernel(tri_id, tris, bp, bs, uv, z, colors, grad, g_col, g_uv, g_z):
    H, W = tri_id.shape
    vid = np.empty(3, dtype=np.int64)
    lp = np.empty(3)
    ls = np.empty(3)
    g_lp = np.empty(3)
    g_ls = np.empty(3)
    rx = np.empty(3)
    ry = np.empty(3)
    for row in range(H):
        for col in range(W):
            t = tri_id[row, col]
            if t < 0:
                continue
            g0, g1, g2 = grad[row, col, 0], grad[row, col, 1], grad[row, col, 2]
            if g0 == 0.0 and g1 == 0.0 and g2 == 0.0:
                continue
            s = 0.0
            dot = 0.0
            for k in range(3):
                v = tris[t, k]
                vid[k] = v
                lp[k] = bp[row, col, k]
                ls[k] = bs[row, col, k]
                g_col[v, 0] += lp[k] * g0
                g_col[v, 1] += lp[k] * g1
                g_col[v, 2] += lp[k] * g2
                g_lp[k] = g0 * colors[v, 0] + g1 * colors[v, 1] + g2 * colors[v, 2]
                s += ls[k] / z[v]
                dot += lp[k] * g_lp[k]
            dot2 = 0.0
            for k in range(3):
                v = vid[k]
                gw = (g_lp[k] - dot) / s
                g_ls[k] = gw / z[v]
                g_z[v] -= gw * ls[k] / (z[v] * z[v])
                dot2 += g_ls[k] * ls[k]
                rx[k] = uv[v, 0] - (col + 0.5)
                ry[k] = uv[v, 1] - (row + 0.5)
            a0, a1, a2 = vid[0], vid[1], vid[2]
            area = ((uv[a1, 0] - uv[a0, 0]) * (uv[a2, 1] - uv[a0, 1])
                    - (uv[a2, 0] - uv[a0, 0]) * (uv[a1, 1] - uv[a0, 1]))
            # l_k = N_k / A with N_0 = r1 x r2, N_1 = r2 x r0, N_2 = r0 x r1
            for k in range(3):
                gb = (g_ls[k] - dot2) / area
                a = (k + 1) % 3
                b = (k + 2) % 3
                g_uv[vid[a], 0] += gb * ry[b]
                g_uv[vid[a], 1] -= gb * rx[b]
                g_uv[vid[b], 0] -= gb * ry[a]
                g_uv[vid[b], 1] += gb * rx[a]


def rasterize_backward(buf: RenderBuffer, uv, depth, triangles, colors, grad_color):
    """Gradients of a pixel-color loss w.r.t. vertex colors, 2D positions and depths.

    ``grad_color`` is dL/d(pixel color), shape (H, W, 3). The fragment
    assignment stored in ``buf`` is held fixed.
    """
    V = uv.shape[0]
    g_col = np.zeros((V, 3))
    g_uv = np.zeros((V, 2))
    g_z = np.zeros(V)
    _backward_kernel(buf.triangle, np.ascontiguousarray(triangles, dtype=np.int64), buf.bary,
                     buf.bary_screen, np.ascontiguousarray(uv, dtype=np.float64),
                     np.ascontiguousarray(depth, dtype=np.float64),
                     np.ascontiguousarray(colors, dtype=np.float64),
                     np.ascontiguousarray(grad_color, dtype=np.float64), g_col, g_uv, g_z)
    return g_col, g_uv, g_z


# ------------------------------------------------------------------ pipeline

@dataclass
class RenderState:
    """Intermediate values of one forward render, kept for the adjoint pass."""
    x: fm.CoefficientVector
    shape: np.ndarray        # model-space positions (V, 3)
    normals: np.ndarray      # model-space unit normals
    rotation: np.ndarray
    cam_points: np.ndarray
    cam_normals: np.ndarray
    tex_raw: np.ndarray
    tex: np.ndarray
    irradiance: np.ndarray
    color_raw: np.ndarray
    color: np.ndarray
    uv: np.ndarray
    depth: np.ndarray
    behind: np.ndarray
    buffer: RenderBuffer | None


def render_scene(model: fm.MorphableModel, x: fm.CoefficientVector, cam: Camera,
                 background=(0.0, 0.0, 0.0), rasterize_image: bool = True) -> RenderState:
    if x.dims != model.dims:
        raise fm.DimensionError(f"coefficient dims {x.dims} do not match model {model.dims}")
    S = fm.evaluate_shape(model, x.alpha, x.beta)
    N = fm.vertex_normals(S, model.triangles)
    pose = Pose.from_vector(x.pose)
    R = pose.rotation
    Xc = S @ R.T + pose.translation
    Nc = N @ R.T
    tex_raw = fm.evaluate_texture_raw(model, x.delta)
    tex = np.clip(tex_raw, 0.0, 1.0)
    irr = sh_basis(Nc, check=False) @ x.gamma
    color_raw = tex * irr[:, None]
    color = np.clip(color_raw, 0.0, 1.0)
    uv, z, behind = project_perspective(Xc, cam)
    buf = None
    if rasterize_image:
        buf = rasterize(uv, z, model.triangles, color, cam.width, cam.height,
                        valid=~behind, background=background)
    return RenderState(x, S, N, R, Xc, Nc, tex_raw, tex, irr, color_raw, color, uv, z, behind, buf)


def render_image(model, x, cam, background=(0.0, 0.0, 0.0)) -> RenderBuffer:
    return render_scene(model, x, cam, background).buffer


def render_backward(model: fm.MorphableModel, state: RenderState, cam: Camera,
                    grad_pixels=None, grad_landmark_uv=None) -> np.ndarray:
    """Chain rule from pixel-color and landmark-position gradients to the flat
    coefficient vector (alpha, beta, delta, gamma, pose)."""
    x = state.x
    V = model.n_vertices
    g_uv = np.zeros((V, 2))
    g_z = np.zeros(V)
    g_color = np.zeros((V, 3))
    if grad_pixels is not None and state.buffer is not None:
        gc, gu, gz = rasterize_backward(state.buffer, state.uv, state.depth, model.triangles,
                                        state.color, grad_pixels)
        g_color += gc
        g_uv += gu
        g_z += gz
    if grad_landmark_uv is not None:
        lmk = model.landmark_vertices
        np.add.at(g_uv, lmk, grad_landmark_uv)

    # shading: color = clip(tex * irr)
    g_raw = g_color * ((state.color_raw >= 0.0) & (state.color_raw <= 1.0))
    g_tex = g_raw * state.irradiance[:, None]
    g_irr = np.sum(g_raw * state.tex, axis=1)
    Y = sh_basis(state.cam_normals, check=False)
    g_gamma = Y.T @ g_irr
    dY = sh_basis_jacobian(state.cam_normals)                # (V, 9, 3)
    g_Nc = g_irr[:, None] * np.einsum("b,vbk->vk", x.gamma, dY)
    g_tex_raw = g_tex * ((state.tex_raw >= 0.0) & (state.tex_raw <= 1.0))
    g_delta = model.basis_tex.T @ g_tex_raw.ravel()

    # projection and rigid transform
    g_Xc = project_backward(state.cam_points, cam, g_uv, g_z)
    R = state.rotation
    g_S = g_Xc @ R
    g_N = g_Nc @ R
    g_R = g_Xc.T @ state.shape + g_Nc.T @ state.normals
    dR = rotation_derivatives(x.pose[:3])
    g_angles = np.einsum("ij,aij->a", g_R, dR)
    g_t = g_Xc.sum(axis=0)

    g_S += fm.vertex_normals_backward(state.shape, model.triangles, g_N)
    flat = g_S.ravel()
    g_alpha = model.basis_id.T @ flat
    g_beta = model.basis_exp.T @ flat
    return np.concatenate([g_alpha, g_beta, g_delta, g_gamma, g_angles, g_t])


@dataclass
class Landmarks2D:
    points: np.ndarray    # (N, 2) pixels
    weights: np.ndarray   # (N,)
    visible: np.ndarray   # (N,) bool


def landmarks_from_state(model, state: RenderState, cam: Camera) -> Landmarks2D:
    idx = model.landmark_vertices
    pts = state.uv[idx].copy()
    vis = ~state.behind[idx]
    buf = state.buffer
    if buf is not None:
        for n in np.flatnonzero(vis):
            u, v = pts[n]
            col, row = int(np.floor(u)), int(np.floor(v))
            if not (0 <= col < cam.width and 0 <= row < cam.height):
                vis[n] = False
                continue
            vis[n] = buf.depth[row, col] + LANDMARK_DEPTH_TOLERANCE >= state.depth[idx[n]]
    return Landmarks2D(pts, model.landmark_weights.copy(), vis)


def project_landmarks(model, x, cam) -> Landmarks2D:
    return landmarks_from_state(model, render_scene(model, x, cam), cam)
