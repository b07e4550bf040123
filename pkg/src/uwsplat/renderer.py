"""Minimal differentiable 3D Gaussian splatting.

Primitives are projected with a pinhole Jacobian, depth-sorted globally, and
composited front-to-back per pixel. Outputs the medium-free radiance image,
an alpha map, and an alpha-weighted expected depth map with a far-plane
fallback where coverage is thin.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tape
from .tape import Tensor

log = logging.getLogger(__name__)

EPS_COV = 1e-6
EPS_DEPTH = 1e-6
Z_NEAR = 0.01
ALPHA_MIN = 0.05
W_CUT = 1.0 / 255.0
D_FAR_DEFAULT = 20.0


@dataclass
class GaussianPrimitive:
    mean: np.ndarray          # (3,) world position
    quat: np.ndarray          # (4,) rotation, normalized before use
    log_scale: np.ndarray     # (3,) log of per-axis extent
    opacity_logit: float      # opacity = sigmoid(logit)
    color: np.ndarray         # (3,) linear RGB, >= 0


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray      # (3, 3) world-to-camera
    translation: np.ndarray   # (3,)
    width: int
    height: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)


@dataclass
class RenderOutput:
    color: object             # (H, W, 3)
    depth: object             # (H, W)
    alpha: object             # (H, W)
    d_far: float = D_FAR_DEFAULT


def cloud_to_params(cloud: list[GaussianPrimitive]) -> dict[str, np.ndarray]:
    """Flatten a primitive list into the parameter arrays the optimizer owns."""
    return {
        "gauss.means": np.array([g.mean for g in cloud], dtype=np.float64),
        "gauss.quats": np.array([g.quat for g in cloud], dtype=np.float64),
        "gauss.log_scales": np.array([g.log_scale for g in cloud], dtype=np.float64),
        "gauss.logits": np.array([g.opacity_logit for g in cloud], dtype=np.float64),
        "gauss.colors": np.array([g.color for g in cloud], dtype=np.float64),
    }


def params_to_cloud(params: dict[str, np.ndarray]) -> list[GaussianPrimitive]:
    n = len(params["gauss.logits"])
    return [
        GaussianPrimitive(
            mean=params["gauss.means"][i].copy(),
            quat=params["gauss.quats"][i].copy(),
            log_scale=params["gauss.log_scales"][i].copy(),
            opacity_logit=float(params["gauss.logits"][i]),
            color=params["gauss.colors"][i].copy(),
        )
        for i in range(n)
    ]


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

def _quat_rotmats(q: Tensor) -> Tensor:
    """Batched unit-quaternion (w, x, y, z) to rotation matrices, (N, 3, 3)."""
    norm = tape.sqrt(tape.tsum(q * q, axis=1, keepdims=True))
    q = q / norm
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    rows = [
        tape.stack([1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)], axis=1),
        tape.stack([2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)], axis=1),
        tape.stack([2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)], axis=1),
    ]
    return tape.stack(rows, axis=1)


def _project(params: dict[str, Tensor], cam: Camera):
    """Camera-space depths, screen means and 2x2 screen covariances for all primitives."""
    means = params["gauss.means"]
    cam_pts = tape.einsum("nj,ij->ni", means, Tensor(cam.rotation)) + Tensor(cam.translation)
    xc, yc, zc = cam_pts[:, 0], cam_pts[:, 1], cam_pts[:, 2]

    u = xc / zc * cam.fx + cam.cx
    v = yc / zc * cam.fy + cam.cy

    rot = _quat_rotmats(params["gauss.quats"])
    s2 = tape.exp(2.0 * params["gauss.log_scales"])                 # (N, 3)
    n = means.shape[0]
    cov_world = tape.einsum("nij,nkj->nik", rot * tape.reshape(s2, (n, 1, 3)), rot)
    wc = Tensor(cam.rotation)
    cov_cam = tape.einsum("ij,njk->nik", wc, cov_world)
    cov_cam = tape.einsum("nik,lk->nil", cov_cam, wc)

    inv_z = 1.0 / zc
    inv_z2 = inv_z * inv_z
    zero = Tensor(np.zeros(n))
    jrow0 = tape.stack([cam.fx * inv_z, zero, -cam.fx * xc * inv_z2], axis=1)
    jrow1 = tape.stack([zero, cam.fy * inv_z, -cam.fy * yc * inv_z2], axis=1)
    jac = tape.stack([jrow0, jrow1], axis=1)                         # (N, 2, 3)

    cov2d = tape.einsum("nij,njk->nik", jac, cov_cam)
    cov2d = tape.einsum("nik,nlk->nil", cov2d, jac)
    cov2d = cov2d + Tensor(EPS_COV * np.eye(2))
    return zc, u, v, cov2d


def project_gaussian(g: GaussianPrimitive, cam: Camera):
    """Project one primitive; returns (mean2d, cov2d, depth_cam) or None if culled."""
    params = {k: Tensor(v) for k, v in cloud_to_params([g]).items()}
    with tape.no_grad():
        z, u, v, cov2d = _project(params, cam)
    if z.value[0] <= Z_NEAR:
        return None
    return (np.array([u.value[0], v.value[0]]), cov2d.value[0], float(z.value[0]))


def eval_gaussian_2d(mean2d: np.ndarray, cov2d: np.ndarray, pixel: np.ndarray) -> float:
    """Unnormalized Gaussian weight at a pixel; 1 at the center."""
    d = np.asarray(pixel, dtype=np.float64) - np.asarray(mean2d, dtype=np.float64)
    inv = np.linalg.inv(cov2d)
    return float(np.exp(-0.5 * d @ inv @ d))


# ---------------------------------------------------------------------------
# rasterization
# ---------------------------------------------------------------------------

def _empty_output(cam: Camera, d_far: float) -> RenderOutput:
    h, w = cam.height, cam.width
    return RenderOutput(
        color=Tensor(np.zeros((h, w, 3))),
        depth=Tensor(np.full((h, w), d_far)),
        alpha=Tensor(np.zeros((h, w))),
        d_far=d_far,
    )


def rasterize_tensors(params: dict[str, Tensor], cam: Camera,
                      d_far: float = D_FAR_DEFAULT) -> RenderOutput:
    """Differentiable front-to-back compositing of the full primitive set.

    Primitives are globally sorted by camera depth (stable ties). Per
    primitive, only the pixels inside its 3-sigma screen window with weight
    >= W_CUT contribute, in both forward and backward passes.
    """
    h, w = cam.height, cam.width
    n = params["gauss.logits"].shape[0]
    if n == 0:
        return _empty_output(cam, d_far)

    z, u, v, cov2d = _project(params, cam)

    keep = np.nonzero(z.value > Z_NEAR)[0]
    if keep.size == 0:
        return _empty_output(cam, d_far)
    order = keep[np.argsort(z.value[keep], kind="stable")]

    z = tape.take_axis(z, order, 0)
    u = tape.take_axis(u, order, 0)
    v = tape.take_axis(v, order, 0)
    cov2d = tape.take_axis(cov2d, order, 0)
    opa = tape.sigmoid(tape.take_axis(params["gauss.logits"], order, 0))
    colors = tape.take_axis(params["gauss.colors"], order, 0)

    ca, cb, cd = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = ca * cd - cb * cb
    ia, ib, idd = cd / det, -cb / det, ca / det

    color = Tensor(np.zeros((h, w, 3)))
    alpha_img = Tensor(np.zeros((h, w)))
    depth_num = Tensor(np.zeros((h, w)))
    transmit = Tensor(np.ones((h, w)))

    px = np.arange(w, dtype=np.float64)
    py = np.arange(h, dtype=np.float64)

    for k in range(order.size):
        a_v, b_v, d_v = ca.value[k], cb.value[k], cd.value[k]
        if det.value[k] <= 0.0:
            log.warning("skipping primitive with non-SPD screen covariance (det=%g)", det.value[k])
            continue
        # 3-sigma window from the largest covariance eigenvalue
        half_tr = 0.5 * (a_v + d_v)
        eig_max = half_tr + math.sqrt(max(half_tr * half_tr - det.value[k], 0.0))
        r = 3.0 * math.sqrt(eig_max)
        x0 = max(int(math.floor(u.value[k] - r)), 0)
        x1 = min(int(math.ceil(u.value[k] + r)) + 1, w)
        y0 = max(int(math.floor(v.value[k] - r)), 0)
        y1 = min(int(math.ceil(v.value[k] + r)) + 1, h)
        if x0 >= x1 or y0 >= y1:
            continue

        dx = Tensor(np.broadcast_to(px[x0:x1], (y1 - y0, x1 - x0)).copy()) - u[k]
        dy = Tensor(np.broadcast_to(py[y0:y1, None], (y1 - y0, x1 - x0)).copy()) - v[k]
        quad = ia[k] * dx * dx + 2.0 * ib[k] * dx * dy + idd[k] * dy * dy
        weight = tape.exp(-0.5 * quad)
        support = ((quad.value <= 9.0) & (weight.value >= W_CUT)).astype(np.float64)
        if not support.any():
            continue
        weight = weight * Tensor(support)
        a_px = opa[k] * weight

        win = (slice(y0, y1), slice(x0, x1))
        t_win = transmit[win]
        contrib = a_px * t_win

        patch = tape.reshape(colors[k], (1, 1, 3)) * tape.reshape(contrib, (y1 - y0, x1 - x0, 1))
        color = _window_add(color, patch, (win[0], win[1], slice(None)))
        alpha_img = _window_add(alpha_img, contrib, win)
        depth_num = _window_add(depth_num, z[k] * contrib, win)
        transmit = _window_replace(transmit, t_win * (1.0 - a_px), win)

    depth = depth_num / tape.maximum(alpha_img, Tensor(np.full((h, w), EPS_DEPTH)))
    covered = (alpha_img.value >= ALPHA_MIN).astype(np.float64)
    depth = depth * Tensor(covered) + Tensor((1.0 - covered) * d_far)
    return RenderOutput(color=color, depth=depth, alpha=alpha_img, d_far=d_far)


def rasterize(cloud: list[GaussianPrimitive], cam: Camera,
              d_far: float = D_FAR_DEFAULT) -> RenderOutput:
    """Forward-only rasterization of a primitive list; returns plain arrays."""
    params = {k: Tensor(v) for k, v in cloud_to_params(cloud).items()}
    with tape.no_grad():
        out = rasterize_tensors(params, cam, d_far=d_far)
    return RenderOutput(color=out.color.value, depth=out.depth.value,
                        alpha=out.alpha.value, d_far=d_far)


def _window_add(base: Tensor, patch: Tensor, win) -> Tensor:
    val = base.value.copy()
    val[win] += patch.value

    def vjp(g):
        return (g, g[win])

    return tape._make(val, (base, patch), vjp)


def _window_replace(base: Tensor, patch: Tensor, win) -> Tensor:
    val = base.value.copy()
    val[win] = patch.value

    def vjp(g):
        gb = g.copy()
        gb[win] = 0.0
        return (gb, g[win])

    return tape._make(val, (base, patch), vjp)
