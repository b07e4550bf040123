"""RGB-guided wavelength-selective attenuation.

The attenuation map is a per-channel Beer-Lambert transmission along the
water path, modulated by an edge-perception factor derived from image and
depth gradients and by a scalar water-type multiplier.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import core, tape
from .core import InvalidArgumentError
from .tape import Tensor

# Clear-ocean-like ordering: red attenuates fastest. Config defaults, learnable.
DEFAULT_BETA = np.array([0.30, 0.12, 0.07])
DEFAULT_WEIGHTS = np.array([1.0, 1.0, 1.0])
DEFAULT_GAMMA = 0.5


def _softplus_inverse(y: np.ndarray) -> np.ndarray:
    return np.log(np.expm1(y))


@dataclass
class AttenuationParams:
    """Learnable attenuation parameters (raw, unconstrained storage)."""
    w_c: np.ndarray = field(default_factory=lambda: DEFAULT_WEIGHTS.copy())
    theta_beta: np.ndarray = field(default_factory=lambda: _softplus_inverse(DEFAULT_BETA))
    gamma: float = DEFAULT_GAMMA

    @property
    def beta(self) -> np.ndarray:
        return np.logaddexp(0.0, self.theta_beta)

    def slots(self) -> dict[str, np.ndarray]:
        return {
            "atten.w_c": np.asarray(self.w_c, dtype=np.float64),
            "atten.theta_beta": np.asarray(self.theta_beta, dtype=np.float64),
            "atten.gamma": np.asarray([self.gamma], dtype=np.float64),
        }

    @staticmethod
    def from_slots(leaves: dict) -> "AttenuationParams":
        def val(x):
            return x.value if isinstance(x, Tensor) else np.asarray(x)
        return AttenuationParams(
            w_c=val(leaves["atten.w_c"]).copy(),
            theta_beta=val(leaves["atten.theta_beta"]).copy(),
            gamma=float(val(leaves["atten.gamma"])[0]),
        )


def edge_factor(image: np.ndarray, depth: np.ndarray) -> np.ndarray:
    """Edge-perception factor in [0, 1] from image-luminance and depth gradients.

    Computed detached: gradients do not flow through it by default.
    """
    image = core.as_color_field(image)
    depth = core.as_scalar_field(depth)
    if image.shape[:2] != depth.shape:
        raise InvalidArgumentError(
            f"image dims {image.shape[:2]} do not match depth dims {depth.shape}")
    g_img = core.sobel_magnitude(core.luma(image))
    g_dep = core.sobel_magnitude(depth)
    g = np.maximum(g_img, g_dep)
    return core.normalized_magnitude(g)


def attenuation_map(depth, edge: np.ndarray, leaves: dict, t_mod: float = 1.0) -> Tensor:
    """Per-channel transmission A_c = exp(-w_c * beta_c * (1 - gamma*E) * t_mod * D).

    `depth` may be a Tensor (gradients flow into it) or an array. `edge` is a
    fixed modulator field; `leaves` holds the atten.* parameter tensors.
    """
    if not 0.0 < t_mod <= 2.0:
        raise InvalidArgumentError(f"t_mod must be in (0, 2], got {t_mod}")
    depth_t = tape.as_tensor(depth)
    if np.any(depth_t.value < 0.0):
        raise InvalidArgumentError("attenuation_map requires nonnegative depth")
    w_c = leaves["atten.w_c"]
    beta = tape.softplus(leaves["atten.theta_beta"])
    gamma = tape.clip(leaves["atten.gamma"], 0.0, 1.0)

    h, w = depth_t.shape
    mod = (1.0 - gamma * Tensor(np.asarray(edge))) * (t_mod * depth_t)  # (H, W)
    coeff = w_c * beta                                                   # (3,)
    expo = tape.reshape(mod, (h, w, 1)) * tape.reshape(coeff, (1, 1, 3))
    return tape.exp(-expo)


def attenuation_map_np(depth: np.ndarray, edge: np.ndarray, params: AttenuationParams,
                       t_mod: float = 1.0) -> np.ndarray:
    """Forward-only convenience wrapper returning a plain (H, W, 3) array."""
    leaves = {k: Tensor(v) for k, v in params.slots().items()}
    with tape.no_grad():
        return attenuation_map(depth, edge, leaves, t_mod=t_mod).value
