"""Multi-scale depth-aware backscatter.

Optical depth tau = b * D * C(D) * (1 - lambda*E_d(D)) * (1 + delta*M(D)*D),
with a local-variance depth-confidence factor C, a normalized depth-edge
factor E_d, and a three-branch feature pyramid with channel and spatial
attention producing the multi-scale modulator M. The backscatter color is
B = B_inf * (1 - exp(-tau)) and B_s = 1 - exp(-tau) is the channel-free
scattering opacity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import core, tape
from .core import InvalidArgumentError
from .tape import Tensor

DEFAULT_B_INF = np.array([0.15, 0.40, 0.50])
DEFAULT_B_COEFF = 0.10
DEFAULT_LAMBDA = 0.3
DEFAULT_DELTA = 0.05
DEFAULT_SIGMA_C = 1.0

_BRANCH_CHANNELS = 4
_MLP_HIDDEN = 2
_N_BRANCHES = 3


def _logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


def _init_conv(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.uniform(-0.1, 0.1, size=shape)


@dataclass
class ScatterParams:
    """Learnable scattering parameters; conv/attention weights from a fixed seed."""
    b_inf_raw: np.ndarray = field(default_factory=lambda: _logit(DEFAULT_B_INF))
    theta_b: float = float(np.log(np.expm1(DEFAULT_B_COEFF)))
    lam: float = DEFAULT_LAMBDA
    delta: float = DEFAULT_DELTA
    sigma_c: float = DEFAULT_SIGMA_C
    weights: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.weights:
            rng = np.random.default_rng(7)
            c, h = _BRANCH_CHANNELS, _MLP_HIDDEN
            self.weights = {
                "f1.w": _init_conv(rng, (c, 1, 3, 3)), "f1.b": np.zeros(c),
                "f2.w": _init_conv(rng, (c, 1, 3, 3)), "f2.b": np.zeros(c),
                "f3.w": _init_conv(rng, (c, 1, 3, 3)), "f3.b": np.zeros(c),
                "ca.w1": _init_conv(rng, (h, c)), "ca.b1": np.zeros(h),
                "ca.w2": _init_conv(rng, (c, h)), "ca.b2": np.zeros(c),
                "sa.w": _init_conv(rng, (1, 2, 3, 3)), "sa.b": np.zeros(1),
                "fuse.w": _init_conv(rng, (1, _N_BRANCHES * c)), "fuse.b": np.zeros(1),
            }

    @property
    def b_inf(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.b_inf_raw))

    @property
    def b_coeff(self) -> float:
        return float(np.logaddexp(0.0, self.theta_b))

    def slots(self) -> dict[str, np.ndarray]:
        out = {
            "scat.b_inf_raw": np.asarray(self.b_inf_raw, dtype=np.float64),
            "scat.theta_b": np.asarray([self.theta_b], dtype=np.float64),
            "scat.lam": np.asarray([self.lam], dtype=np.float64),
            "scat.delta": np.asarray([self.delta], dtype=np.float64),
        }
        for k, v in self.weights.items():
            out[f"scat.{k}"] = np.asarray(v, dtype=np.float64)
        return out

    @staticmethod
    def from_slots(leaves: dict, sigma_c: float = DEFAULT_SIGMA_C) -> "ScatterParams":
        def val(x):
            return x.value if isinstance(x, Tensor) else np.asarray(x)
        weights = {k[len("scat."):]: val(v).copy() for k, v in leaves.items()
                   if k.startswith("scat.") and "." in k[len("scat."):]}
        return ScatterParams(
            b_inf_raw=val(leaves["scat.b_inf_raw"]).copy(),
            theta_b=float(val(leaves["scat.theta_b"])[0]),
            lam=float(val(leaves["scat.lam"])[0]),
            delta=float(val(leaves["scat.delta"])[0]),
            sigma_c=sigma_c,
            weights=weights,
        )


def simple_scatter(d, b: float, b_inf: np.ndarray) -> np.ndarray:
    """Reference single-coefficient backscatter B = B_inf * (1 - exp(-b*d))."""
    d = np.asarray(d, dtype=np.float64)
    if np.any(d < 0.0):
        raise InvalidArgumentError("simple_scatter requires nonnegative depth")
    if b <= 0.0:
        raise InvalidArgumentError("simple_scatter requires b > 0")
    decay = 1.0 - np.exp(-b * d)
    return np.multiply.outer(decay, np.asarray(b_inf, dtype=np.float64))


def depth_confidence(depth, sigma_c: float = DEFAULT_SIGMA_C):
    """C = exp(-Var_3x3(D) / sigma_c^2); 1 on locally constant depth."""
    depth_t = tape.as_tensor(depth)
    h, w = depth_t.shape
    if h < 3 or w < 3:
        raise InvalidArgumentError(f"depth_confidence needs at least 3x3, got {(h, w)}")
    box = Tensor(np.full((1, 1, 3, 3), 1.0 / 9.0))
    d1 = tape.reshape(depth_t, (1, h, w))
    mean = tape.conv3x3(d1, box)[0]
    mean_sq = tape.conv3x3(d1 * d1, box)[0]
    var = tape.maximum(mean_sq - mean * mean, Tensor(np.zeros((h, w))))
    return tape.exp(-var / (sigma_c * sigma_c))


def depth_edge(depth):
    """E_d = clamp(|sobel(D)| / (p95 + eps), 0, 1); the normalizer is detached."""
    depth_t = tape.as_tensor(depth)
    h, w = depth_t.shape
    if h < 3 or w < 3:
        raise InvalidArgumentError(f"depth_edge needs at least 3x3, got {(h, w)}")
    gx, gy = tape.sobel_pair(depth_t)
    mag = tape.sqrt(gx * gx + gy * gy + 1e-24)
    norm = float(np.percentile(mag.value, 95.0)) + 1e-8
    return tape.clip(mag / norm, 0.0, 1.0)


def multiscale_features(depth, leaves: dict) -> Tensor:
    """Feature-pyramid modulator M(D) in (0, 1) at the input resolution.

    Three conv+ReLU branches at scales 1, 1/2, 1/4 are upsampled back,
    concatenated, reweighted by per-branch channel attention and a spatial
    attention map, and fused by a sigmoid 1x1 convolution.
    """
    depth_t = tape.as_tensor(depth)
    h, w = depth_t.shape
    if h < 8 or w < 8:
        raise InvalidArgumentError(f"multiscale_features needs at least 8x8, got {(h, w)}")

    d1 = tape.reshape(depth_t, (1, h, w))
    d2 = tape.downsample(d1, 2, hw_axes=(1, 2))
    d4 = tape.downsample(d1, 4, hw_axes=(1, 2))

    b1 = tape.relu(tape.conv3x3(d1, leaves["scat.f1.w"], leaves["scat.f1.b"]))
    b2 = tape.relu(tape.conv3x3(d2, leaves["scat.f2.w"], leaves["scat.f2.b"]))
    b3 = tape.relu(tape.conv3x3(d4, leaves["scat.f3.w"], leaves["scat.f3.b"]))
    b2 = tape.upsample(b2, (h, w), hw_axes=(1, 2))
    b3 = tape.upsample(b3, (h, w), hw_axes=(1, 2))

    branches = []
    for feats in (b1, b2, b3):
        gap = tape.tmean(tape.tmean(feats, axis=2), axis=1)          # (C,)
        hidden = tape.relu(tape.einsum("hc,c->h", leaves["scat.ca.w1"], gap)
                           + leaves["scat.ca.b1"])
        scale = tape.sigmoid(tape.einsum("ch,h->c", leaves["scat.ca.w2"], hidden)
                             + leaves["scat.ca.b2"])
        branches.append(feats * tape.reshape(scale, (_BRANCH_CHANNELS, 1, 1)))
    x = tape.concatenate(branches, axis=0)                           # (12, H, W)

    ch_mean = tape.tmean(x, axis=0, keepdims=True)
    ch_max = tape.amax(x, axis=0, keepdims=True)
    sa_in = tape.concatenate([ch_mean, ch_max], axis=0)              # (2, H, W)
    sa = tape.sigmoid(tape.conv3x3(sa_in, leaves["scat.sa.w"], leaves["scat.sa.b"]))
    x = x * sa

    fused = tape.conv1x1(x, leaves["scat.fuse.w"], leaves["scat.fuse.b"])
    return tape.sigmoid(fused[0])                                    # (H, W)


def scattering_map(depth, leaves: dict, sigma_c: float = DEFAULT_SIGMA_C,
                   neutral: bool = False):
    """Backscatter color map B (H, W, 3) and scattering opacity B_s (H, W).

    With `neutral=True` the modulators are bypassed (C=1, E_d=0, delta=0) and
    the map reduces exactly to simple_scatter.
    """
    depth_t = tape.as_tensor(depth)
    if np.any(depth_t.value < 0.0):
        raise InvalidArgumentError("scattering_map requires nonnegative depth")
    h, w = depth_t.shape
    b = tape.softplus(leaves["scat.theta_b"])
    b_inf = tape.sigmoid(leaves["scat.b_inf_raw"])

    tau = b * depth_t
    if not neutral:
        lam = tape.clip(leaves["scat.lam"], 0.0, 1.0)
        delta = tape.maximum(leaves["scat.delta"], Tensor(np.zeros(1)))
        conf = depth_confidence(depth_t, sigma_c=sigma_c)
        edge = depth_edge(depth_t)
        feats = multiscale_features(depth_t, leaves)
        tau = tau * conf * (1.0 - lam * edge) * (1.0 + delta * feats * depth_t)

    b_s = 1.0 - tape.exp(-tau)
    b_map = tape.reshape(b_s, (h, w, 1)) * tape.reshape(b_inf, (1, 1, 3))
    return b_map, b_s


def scattering_map_np(depth: np.ndarray, params: ScatterParams, neutral: bool = False):
    leaves = {k: Tensor(v) for k, v in params.slots().items()}
    with tape.no_grad():
        b_map, b_s = scattering_map(depth, leaves, sigma_c=params.sigma_c, neutral=neutral)
    return b_map.value, b_s.value
