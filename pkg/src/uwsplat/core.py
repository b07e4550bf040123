"""Shared grid primitives: scalar/color fields, resampling, gradients, pyramids.

Conventions used throughout the package:
  * scalar fields are float64 arrays of shape (H, W)
  * color fields are float64 arrays of shape (H, W, 3), linear RGB
  * 8-bit I/O applies the sRGB transfer curve at the boundary only
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class InvalidArgumentError(ValueError):
    """An operation was called with arguments outside its contract."""


class DivergedError(RuntimeError):
    """A non-finite value appeared where finite arithmetic is required."""

    def __init__(self, message, context=None):
        super().__init__(message)
        self.context = context


def as_scalar_field(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise InvalidArgumentError(f"scalar field must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidArgumentError("scalar field contains non-finite values")
    return a


def as_color_field(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 3 or a.shape[2] != 3:
        raise InvalidArgumentError(f"color field must have shape (H, W, 3), got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidArgumentError("color field contains non-finite values")
    return a


@dataclass(frozen=True)
class PyramidLevel:
    scale: int
    field: np.ndarray


def srgb_to_linear(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.where(x <= 0.04045, x / 12.92, ((x + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(x: np.ndarray) -> np.ndarray:
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * x ** (1.0 / 2.4) - 0.055)


def luma(img: np.ndarray) -> np.ndarray:
    """Rec. 709 luminance of a linear-RGB color field."""
    img = as_color_field(img)
    return 0.2126 * img[:, :, 0] + 0.7152 * img[:, :, 1] + 0.0722 * img[:, :, 2]


# ---------------------------------------------------------------------------
# resampling kernels (shared by the plain-numpy API and the autodiff ops)
# ---------------------------------------------------------------------------

_FACTORS = (2, 4)


def _block_indices(n: int, factor: int):
    idx = np.arange(0, n, factor)
    counts = np.diff(np.append(idx, n))
    return idx, counts


def block_mean(a: np.ndarray, factor: int, axes=(0, 1)) -> np.ndarray:
    """Mean over factor x factor blocks; partial edge blocks average what exists."""
    out = a
    for ax in axes:
        idx, counts = _block_indices(out.shape[ax], factor)
        out = np.add.reduceat(out, idx, axis=ax)
        shape = [1] * out.ndim
        shape[ax] = len(idx)
        out = out / counts.reshape(shape)
    return out


def block_mean_vjp(g: np.ndarray, in_shape, factor: int, axes=(0, 1)) -> np.ndarray:
    """Adjoint of block_mean: spread each output gradient uniformly over its block."""
    out = g
    for ax in axes:
        idx, counts = _block_indices(in_shape[ax], factor)
        shape = [1] * out.ndim
        shape[ax] = len(idx)
        out = out / counts.reshape(shape)
        out = np.repeat(out, counts, axis=ax)
    return out


def resize_axis_plan(n_src: int, n_dst: int):
    """Bilinear sample plan along one axis: (i0, i1, w0, w1) with edge clamping."""
    pos = (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5
    pos = np.clip(pos, 0.0, n_src - 1.0)
    i0 = np.floor(pos).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_src - 1)
    w1 = pos - i0
    return i0, i1, 1.0 - w1, w1


def resize_bilinear(a: np.ndarray, out_h: int, out_w: int, axes=(0, 1)) -> np.ndarray:
    out = a
    for ax, m in zip(axes, (out_h, out_w)):
        i0, i1, w0, w1 = resize_axis_plan(out.shape[ax], m)
        shape = [1] * out.ndim
        shape[ax] = m
        out = np.take(out, i0, axis=ax) * w0.reshape(shape) + np.take(out, i1, axis=ax) * w1.reshape(shape)
    return out


def downsample(f: np.ndarray, factor: int) -> np.ndarray:
    """Block-mean downsample of a scalar or color field by 2 or 4 (ceil sizing)."""
    if factor not in _FACTORS:
        raise InvalidArgumentError(f"downsample factor must be one of {_FACTORS}, got {factor}")
    f = np.asarray(f, dtype=np.float64)
    if f.ndim not in (2, 3):
        raise InvalidArgumentError(f"expected a (H, W) or (H, W, 3) field, got shape {f.shape}")
    return block_mean(f, factor, axes=(0, 1))


def upsample(f: np.ndarray, factor: int, target_dims) -> np.ndarray:
    """Bilinear upsample to explicit (H, W) target dims with edge clamping."""
    if factor not in _FACTORS:
        raise InvalidArgumentError(f"upsample factor must be one of {_FACTORS}, got {factor}")
    f = np.asarray(f, dtype=np.float64)
    th, tw = int(target_dims[0]), int(target_dims[1])
    if th < f.shape[0] or tw < f.shape[1]:
        raise InvalidArgumentError(
            f"target dims {(th, tw)} smaller than input {f.shape[:2]}")
    return resize_bilinear(f, th, tw, axes=(0, 1))


def pyramid(f: np.ndarray) -> list[PyramidLevel]:
    """Three-level pyramid at scales 1, 2, 4."""
    return [
        PyramidLevel(1, np.asarray(f, dtype=np.float64)),
        PyramidLevel(2, downsample(f, 2)),
        PyramidLevel(4, downsample(f, 4)),
    ]


# ---------------------------------------------------------------------------
# gradients and local statistics
# ---------------------------------------------------------------------------

def sobel_gradients(f: np.ndarray):
    """3x3 Sobel gradients with replicate border padding.

    gx responds to horizontal change (left-right), gy to vertical change.
    """
    f = as_scalar_field(f)
    if f.shape[0] < 3 or f.shape[1] < 3:
        raise InvalidArgumentError(f"sobel_gradients needs at least 3x3, got {f.shape}")
    p = np.pad(f, 1, mode="edge")
    gx = (p[:-2, 2:] + 2.0 * p[1:-1, 2:] + p[2:, 2:]) \
        - (p[:-2, :-2] + 2.0 * p[1:-1, :-2] + p[2:, :-2])
    gy = (p[2:, :-2] + 2.0 * p[2:, 1:-1] + p[2:, 2:]) \
        - (p[:-2, :-2] + 2.0 * p[:-2, 1:-1] + p[:-2, 2:])
    return gx, gy


def sobel_magnitude(f: np.ndarray) -> np.ndarray:
    gx, gy = sobel_gradients(f)
    return np.sqrt(gx * gx + gy * gy)


def normalized_magnitude(g: np.ndarray, percentile: float = 95.0, eps: float = 1e-8) -> np.ndarray:
    """Scale-free edge response: clamp(g / (p95(g) + eps), 0, 1)."""
    norm = np.percentile(g, percentile) + eps
    return np.clip(g / norm, 0.0, 1.0)


def local_variance_3x3(f: np.ndarray) -> np.ndarray:
    """Per-pixel variance over the replicate-padded 3x3 neighbourhood."""
    f = as_scalar_field(f)
    if f.shape[0] < 3 or f.shape[1] < 3:
        raise InvalidArgumentError(f"local_variance_3x3 needs at least 3x3, got {f.shape}")
    p = np.pad(f, 1, mode="edge")
    p2 = p * p
    s = np.zeros_like(f)
    s2 = np.zeros_like(f)
    h, w = f.shape
    for dy in range(3):
        for dx in range(3):
            s += p[dy:dy + h, dx:dx + w]
            s2 += p2[dy:dy + h, dx:dx + w]
    m = s / 9.0
    return np.maximum(s2 / 9.0 - m * m, 0.0)
