"""Synthetic underwater scenes with known physics parameters.

Builds a textured fronto-parallel relief of Gaussian primitives, renders
clean radiance and depth from an arc of cameras, and degrades the renders
with the closed-form two-coefficient water model. The degraded/clean/depth
triplets plus the true parameters drive parameter-recovery and end-to-end
tests.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fileio
from .core import InvalidArgumentError, resize_bilinear
from .renderer import Camera, GaussianPrimitive, cloud_to_params, params_to_cloud, rasterize


class GenerationFailedError(RuntimeError):
    """The scene spec produced no renderable content."""


# Class-conditioned parameter ranges: direct attenuation per channel (r, g, b),
# backscatter coefficient, and veiling color (blue-shifted when clear,
# green-shifted when turbid).
WATER_CLASSES = {
    "clear": {
        "b": (0.02, 0.06),
        "beta": ((0.25, 0.35), (0.08, 0.14), (0.04, 0.08)),
        "b_inf": ((0.05, 0.12), (0.25, 0.35), (0.45, 0.60)),
    },
    "medium": {
        "b": (0.06, 0.15),
        "beta": ((0.30, 0.45), (0.12, 0.20), (0.08, 0.14)),
        "b_inf": ((0.08, 0.16), (0.32, 0.42), (0.33, 0.44)),
    },
    "turbid": {
        "b": (0.15, 0.35),
        "beta": ((0.40, 0.60), (0.18, 0.30), (0.15, 0.25)),
        "b_inf": ((0.12, 0.20), (0.40, 0.55), (0.30, 0.40)),
    },
}


@dataclass
class SceneSpec:
    seed: int = 0
    n_gaussians: int = 200
    width: int = 96
    height: int = 96
    n_views: int = 8
    water_class: str = "clear"
    beta_c: np.ndarray = field(default_factory=lambda: np.array([0.30, 0.12, 0.07]))
    b: float = 0.05
    b_inf: np.ndarray = field(default_factory=lambda: np.array([0.10, 0.30, 0.50]))
    d_min: float = 4.0
    d_max: float = 9.0
    d_far: float = 20.0

    def validate(self):
        if self.n_gaussians < 1:
            raise InvalidArgumentError("n_gaussians must be >= 1")
        if self.d_min <= 0 or self.d_max <= self.d_min:
            raise InvalidArgumentError("need 0 < d_min < d_max")
        if self.water_class not in WATER_CLASSES:
            raise InvalidArgumentError(f"unknown water class {self.water_class!r}")
        if np.any(np.asarray(self.beta_c) < 0) or self.b < 0:
            raise InvalidArgumentError("attenuation/scattering coefficients must be >= 0")


def spec_for_class(water_class: str, seed: int = 0, **overrides) -> SceneSpec:
    """Draw true physics parameters from the class-conditioned ranges."""
    if water_class not in WATER_CLASSES:
        raise InvalidArgumentError(f"unknown water class {water_class!r}")
    rng = np.random.default_rng(seed + 1000)
    cfg = WATER_CLASSES[water_class]
    spec = SceneSpec(
        seed=seed,
        water_class=water_class,
        beta_c=np.array([rng.uniform(*r) for r in cfg["beta"]]),
        b=float(rng.uniform(*cfg["b"])),
        b_inf=np.array([rng.uniform(*r) for r in cfg["b_inf"]]),
    )
    for k, v in overrides.items():
        setattr(spec, k, v)
    return spec


@dataclass
class SceneBundle:
    spec: SceneSpec
    cloud: list
    cameras: list
    clean: list      # (H, W, 3) per view
    depth: list      # (H, W) per view
    degraded: list   # (H, W, 3) per view


def degrade(clean: np.ndarray, depth: np.ndarray, beta_c, b: float, b_inf) -> np.ndarray:
    """Closed-form degradation: direct transmission plus saturating backscatter.

    I_c = J_c * exp(-beta_c * D) + Binf_c * (1 - exp(-b * D)), clamped to [0, 1].
    """
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth < 0):
        raise InvalidArgumentError("degrade requires nonnegative depth")
    beta_c = np.asarray(beta_c, dtype=np.float64)
    b_inf = np.asarray(b_inf, dtype=np.float64)
    direct = clean * np.exp(-depth[:, :, None] * beta_c[None, None, :])
    back = b_inf[None, None, :] * (1.0 - np.exp(-b * depth))[:, :, None]
    return np.clip(direct + back, 0.0, 1.0)


def _value_noise(rng, n, coarse=5, lo=0.0, hi=1.0):
    """Smooth procedural noise on an n x n grid from a coarse random lattice."""
    lattice = rng.uniform(lo, hi, size=(coarse, coarse))
    return resize_bilinear(lattice, n, n)


def _look_at(center: np.ndarray, target: np.ndarray):
    fwd = target - center
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(np.array([0.0, 1.0, 0.0]), fwd)
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])
    return rot, -rot @ center


def generate_scene(spec: SceneSpec) -> SceneBundle:
    """Deterministic scene synthesis; same seed gives a bit-identical bundle."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)

    side = int(np.ceil(np.sqrt(spec.n_gaussians)))
    extent = 2.5
    xs = np.linspace(-extent, extent, side)
    ys = np.linspace(-extent, extent, side)
    spacing = xs[1] - xs[0] if side > 1 else extent

    depth_noise = _value_noise(rng, side, coarse=4)
    d_mid = 0.5 * (spec.d_min + spec.d_max)
    color_noise = np.stack([_value_noise(rng, side, coarse=6, lo=0.08, hi=0.92)
                            for _ in range(3)], axis=-1)

    cloud = []
    for gy in range(side):
        for gx in range(side):
            if len(cloud) >= spec.n_gaussians:
                break
            z = spec.d_min + (spec.d_max - spec.d_min) * depth_noise[gy, gx]
            jitter = rng.normal(0.0, 0.05 * spacing, size=2)
            axis = rng.normal(size=3)
            angle = rng.uniform(-0.3, 0.3)
            axis = axis / np.linalg.norm(axis)
            quat = np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])
            cloud.append(GaussianPrimitive(
                mean=np.array([xs[gx] + jitter[0], ys[gy] + jitter[1], z]),
                quat=quat,
                log_scale=np.log([0.75 * spacing, 0.75 * spacing, 0.25 * spacing]),
                opacity_logit=float(rng.uniform(1.8, 2.6)),
                color=color_noise[gy, gx].copy(),
            ))

    fov_scale = 0.9 * d_mid / extent
    cameras = []
    arc = 0.8
    for i in range(spec.n_views):
        t = (i / max(spec.n_views - 1, 1)) * 2.0 - 1.0
        center = np.array([arc * t, 0.15 * np.sin(2.0 * t), 0.0])
        rot, trans = _look_at(center, np.array([0.0, 0.0, d_mid]))
        cameras.append(Camera(
            fx=fov_scale * spec.width / 2.0, fy=fov_scale * spec.width / 2.0,
            cx=spec.width / 2.0 - 0.5, cy=spec.height / 2.0 - 0.5,
            rotation=rot, translation=trans,
            width=spec.width, height=spec.height,
        ))

    clean, depth, degraded = [], [], []
    any_content = False
    for cam in cameras:
        out = rasterize(cloud, cam, d_far=spec.d_far)
        if np.any(out.alpha > 0):
            any_content = True
        j = np.clip(out.color, 0.0, 1.0)
        clean.append(j)
        depth.append(out.depth)
        degraded.append(degrade(j, out.depth, spec.beta_c, spec.b, spec.b_inf))
    if not any_content:
        raise GenerationFailedError("no primitive is visible from any camera")
    return SceneBundle(spec=spec, cloud=cloud, cameras=cameras,
                       clean=clean, depth=depth, degraded=degraded)


# ---------------------------------------------------------------------------
# bundle persistence
# ---------------------------------------------------------------------------

def save_bundle(bundle: SceneBundle, out_dir) -> None:
    out = Path(out_dir)
    for sub in ("clean", "degraded", "depth"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    for i in range(len(bundle.cameras)):
        fileio.save_png(out / "clean" / f"{i:04d}.png", bundle.clean[i])
        fileio.save_png(out / "degraded" / f"{i:04d}.png", bundle.degraded[i])
        fileio.save_pfm(out / "depth" / f"{i:04d}.pfm", bundle.depth[i])
    cams = [
        {"fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy,
         "rotation": c.rotation.tolist(), "translation": c.translation.tolist(),
         "width": c.width, "height": c.height}
        for c in bundle.cameras
    ]
    (out / "cameras.json").write_text(json.dumps(cams, sort_keys=True, indent=1))
    params = cloud_to_params(bundle.cloud)
    truth = {
        "seed": bundle.spec.seed,
        "water_class": bundle.spec.water_class,
        "beta_c": np.asarray(bundle.spec.beta_c).tolist(),
        "b": bundle.spec.b,
        "b_inf": np.asarray(bundle.spec.b_inf).tolist(),
        "d_min": bundle.spec.d_min,
        "d_max": bundle.spec.d_max,
        "d_far": bundle.spec.d_far,
        "cloud": {k: v.tolist() for k, v in params.items()},
    }
    (out / "truth.json").write_text(json.dumps(truth, sort_keys=True, indent=1))


def load_bundle(in_dir) -> SceneBundle:
    src = Path(in_dir)
    cams = json.loads((src / "cameras.json").read_text())
    cameras = [Camera(fx=c["fx"], fy=c["fy"], cx=c["cx"], cy=c["cy"],
                      rotation=np.array(c["rotation"]), translation=np.array(c["translation"]),
                      width=c["width"], height=c["height"]) for c in cams]
    truth = json.loads((src / "truth.json").read_text())
    cloud = params_to_cloud({k: np.array(v) for k, v in truth["cloud"].items()})
    spec = SceneSpec(
        seed=truth["seed"], n_gaussians=len(cloud),
        width=cameras[0].width, height=cameras[0].height,
        n_views=len(cameras), water_class=truth["water_class"],
        beta_c=np.array(truth["beta_c"]), b=truth["b"], b_inf=np.array(truth["b_inf"]),
        d_min=truth["d_min"], d_max=truth["d_max"], d_far=truth["d_far"],
    )
    clean = [fileio.load_png(src / "clean" / f"{i:04d}.png") for i in range(len(cameras))]
    degraded = [fileio.load_png(src / "degraded" / f"{i:04d}.png") for i in range(len(cameras))]
    depth = [fileio.load_pfm(src / "depth" / f"{i:04d}.pfm") for i in range(len(cameras))]
    return SceneBundle(spec=spec, cloud=cloud, cameras=cameras,
                       clean=clean, depth=depth, degraded=degraded)
