"""Objective terms and evaluation metrics.

All loss functions build on the autodiff tape so their gradients reach every
upstream parameter; psnr/ssim are also exposed as plain-array metrics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import core, tape
from .core import InvalidArgumentError
from .tape import Tensor

ALPHA_AT_CLEAR = 1.2   # attenuation-loss weight at water index 0
BETA_AT_CLEAR = 0.8    # scattering-loss weight at water index 0


@dataclass
class LossWeights:
    w1: float = 1.0
    w2: float = 0.05
    w3: float = 0.05
    w4: float = 0.01
    w5: float = 0.2
    mu: float = 1.0
    lambda_edge: float = 0.1
    alpha_s: float = 10.0
    lambda_ms: float = 0.5
    gamma_wat: float = 1.0
    lambda_d: float = 0.2

    def as_vector(self):
        return np.array([self.w1, self.w2, self.w3, self.w4, self.w5])


@dataclass
class LossBreakdown:
    basic: float
    ab: float
    wat: float
    edge: float
    ms: float
    total: float
    l_attenuation: float = 0.0
    l_scattering: float = 0.0


def alpha_of_w(w: float) -> float:
    """Attenuation-loss weight, linear from 1.2 (clear) to 0.8 (turbid)."""
    return ALPHA_AT_CLEAR - 0.4 * w


def beta_of_w(w: float) -> float:
    """Scattering-loss weight, linear from 0.8 (clear) to 1.2 (turbid)."""
    return BETA_AT_CLEAR + 0.4 * w


def _check_dims(a, b):
    if a.shape != b.shape:
        raise InvalidArgumentError(f"shape mismatch: {a.shape} vs {b.shape}")


def l1(a, b) -> Tensor:
    a, b = tape.as_tensor(a), tape.as_tensor(b)
    _check_dims(a, b)
    return tape.tmean(tape.absolute(a - b))


# ---------------------------------------------------------------------------
# SSIM / PSNR
# ---------------------------------------------------------------------------

def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()

_SSIM_KERNEL = _gaussian_kernel()
_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2


def _blur(x) -> Tensor:
    out = tape.conv1d_axis(x, _SSIM_KERNEL, axis=0)
    return tape.conv1d_axis(out, _SSIM_KERNEL, axis=1)


def ssim(a, b) -> Tensor:
    """Mean SSIM over pixels and channels; 11x11 Gaussian window, sigma 1.5."""
    a, b = tape.as_tensor(a), tape.as_tensor(b)
    _check_dims(a, b)
    mu_a, mu_b = _blur(a), _blur(b)
    var_a = _blur(a * a) - mu_a * mu_a
    var_b = _blur(b * b) - mu_b * mu_b
    cov = _blur(a * b) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + _SSIM_C1) * (2.0 * cov + _SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + _SSIM_C1) * (var_a + var_b + _SSIM_C2)
    return tape.tmean(num / den)


def ssim_np(a: np.ndarray, b: np.ndarray) -> float:
    with tape.no_grad():
        return float(ssim(a, b).value)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB for images in [0, 1]; capped at 100 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_dims(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return 100.0
    return 10.0 * math.log10(1.0 / mse)


# ---------------------------------------------------------------------------
# objective terms
# ---------------------------------------------------------------------------

def l_basic(rendered, target, lambda_d: float = 0.2) -> Tensor:
    """(1 - lambda_d) * L1 + lambda_d * (1 - SSIM) / 2."""
    rendered, target = tape.as_tensor(rendered), tape.as_tensor(target)
    _check_dims(rendered, target)
    return (1.0 - lambda_d) * l1(rendered, target) \
        + lambda_d * (1.0 - ssim(rendered, target)) * 0.5


def l_ab(b_s, a_map, depth, t_map, mu: float, d_far: float) -> Tensor:
    """Attenuation-scattering consistency: depth-weighted expectations plus
    a complementarity penalty tying scattering opacity and transmittance."""
    b_s = tape.as_tensor(b_s)
    a_map = tape.as_tensor(a_map)
    depth = tape.as_tensor(depth)
    t_map = tape.as_tensor(t_map)
    _check_dims(b_s, depth)
    if a_map.shape[:2] != b_s.shape:
        raise InvalidArgumentError(f"shape mismatch: {a_map.shape} vs {b_s.shape}")
    d_norm = depth * (1.0 / d_far)
    a_mean = tape.tmean(a_map, axis=2)
    comp = b_s + t_map - 1.0
    return tape.tmean(b_s * d_norm) - tape.tmean(a_mean * d_norm) \
        + mu * tape.tmean(comp * comp)


def l_edge(b_s, depth: np.ndarray, lambda_edge: float, alpha_s: float) -> Tensor:
    """Edge-aware scattering loss: suppress scatter on depth edges, keep it
    smooth elsewhere (the smoothness weight vanishes across depth edges)."""
    b_s = tape.as_tensor(b_s)
    depth = np.asarray(depth, dtype=np.float64)
    _check_dims(b_s.value, depth)
    gx_d, gy_d = core.sobel_gradients(depth)
    w_edge = core.normalized_magnitude(np.sqrt(gx_d * gx_d + gy_d * gy_d))
    w_smooth = np.exp(-alpha_s * (np.abs(gx_d) + np.abs(gy_d)))

    gx_b, gy_b = tape.sobel_pair(b_s)
    edge_term = tape.tmean(tape.absolute(b_s * Tensor(w_edge)))
    smooth_term = tape.tmean(Tensor(w_smooth) * (tape.absolute(gx_b) + tape.absolute(gy_b)))
    return edge_term + lambda_edge * smooth_term


def l_ms(rendered, target, lambda_ms: float) -> Tensor:
    """Multi-scale L1: full resolution plus block-mean halves and quarters."""
    rendered, target = tape.as_tensor(rendered), tape.as_tensor(target)
    _check_dims(rendered, target)
    out = l1(rendered, target)
    scales = (2, 4)
    ms = None
    for s in scales:
        term = l1(tape.downsample(rendered, s), tape.downsample(target, s))
        ms = term if ms is None else ms + term
    return out + (lambda_ms / len(scales)) * ms


def l_wat(l_att, l_sca, l_ab_val, w: float, weights: LossWeights) -> Tensor:
    """Water-adaptive combination with linearly interpolated path weights."""
    if not 0.0 <= w <= 1.0:
        import logging
        logging.getLogger(__name__).warning("water index %g outside [0,1]; clamped", w)
        w = min(max(w, 0.0), 1.0)
    return alpha_of_w(w) * tape.as_tensor(l_att) + beta_of_w(w) * tape.as_tensor(l_sca) \
        + weights.gamma_wat * tape.as_tensor(l_ab_val)


def l_total(parts: LossBreakdown, weights: LossWeights) -> float:
    vals = np.array([parts.basic, parts.ab, parts.wat, parts.edge, parts.ms])
    if not np.all(np.isfinite(vals)):
        raise core.DivergedError("non-finite loss part", context=parts)
    return float(weights.as_vector() @ vals)


def combine_total(basic, ab, wat, edge, ms, weights: LossWeights) -> Tensor:
    """Tape-level total: w1*basic + w2*ab + w3*wat + w4*edge + w5*ms."""
    return weights.w1 * tape.as_tensor(basic) + weights.w2 * tape.as_tensor(ab) \
        + weights.w3 * tape.as_tensor(wat) + weights.w4 * tape.as_tensor(edge) \
        + weights.w5 * tape.as_tensor(ms)
