"""Adam optimization, the two-phase training loop, and model inversion.

Phase 1 fits geometry only against the observed (degraded) images. Phase 2
renders radiance and depth, applies the attenuation and scattering maps,
and optimizes everything under the controller's schedule and the full loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import adapt, attenuation, losses, scattering, tape
from .core import DivergedError
from .losses import LossBreakdown, LossWeights
from .renderer import cloud_to_params, rasterize_tensors
from .tape import ParamVector, Tensor

# Stock per-attribute learning-rate multipliers relative to the position rate.
GAUSS_LR_SCALES = {
    "gauss.means": 1.0,
    "gauss.quats": 0.625,
    "gauss.log_scales": 3.125,
    "gauss.logits": 31.25,
    "gauss.colors": 1.5625,
}


@dataclass
class TrainConfig:
    iterations: int = 2000
    enable_fraction: float = 1.0 / 3.0
    lr_gaussians: float = 1.6e-3
    seed: int = 0
    eval_interval: int = 100
    init_jitter: float = 0.02
    d_far: float = 20.0
    sigma_c: float = 1.0
    detach_depth: bool = False
    neutral_scatter: bool = False
    weights: LossWeights = field(default_factory=LossWeights)

    def validate(self):
        if not 0.0 < self.enable_fraction < 1.0:
            raise ValueError("enable_fraction must be in (0, 1)")
        if self.lr_gaussians <= 0:
            raise ValueError("lr_gaussians must be positive")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def like(params: ParamVector) -> "AdamState":
        return AdamState(m=np.zeros_like(params.data), v=np.zeros_like(params.data))


def adam_step(params: ParamVector, grads: ParamVector, state: AdamState,
              lr) -> tuple[ParamVector, AdamState]:
    """One bias-corrected Adam update; `lr` is a scalar or per-element array."""
    g = grads.data
    if not np.all(np.isfinite(g)):
        bad = grads.slot_of(int(np.argmax(~np.isfinite(g))))
        raise DivergedError(f"non-finite gradient in slot {bad!r}", context={"slot": bad})
    state = AdamState(m=state.m.copy(), v=state.v.copy(), t=state.t + 1,
                      beta1=state.beta1, beta2=state.beta2, eps=state.eps)
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    out = params.copy()
    out.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return out, state


def _group_lr(params: ParamVector, group_lrs: dict[str, float]) -> np.ndarray:
    """Per-element learning rates from per-group base rates."""
    lr = np.zeros_like(params.data)
    for name, (off, size) in params.layout.items():
        if name.startswith("gauss."):
            lr[off:off + size] = group_lrs.get("gauss", 0.0) * GAUSS_LR_SCALES[name]
        elif name.startswith("atten."):
            lr[off:off + size] = group_lrs.get("atten", 0.0)
        elif name.startswith("scat."):
            lr[off:off + size] = group_lrs.get("scat", 0.0)
    return lr


def _project_constraints(params: ParamVector) -> None:
    """Re-impose parameter-domain invariants after an optimizer step."""
    if "gauss.quats" in params.layout:
        q = params.get("gauss.quats")
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        np.clip(params.get("gauss.colors"), 0.0, None, out=params.get("gauss.colors"))
    if "atten.gamma" in params.layout:
        np.clip(params.get("atten.gamma"), 0.0, 1.0, out=params.get("atten.gamma"))
        np.clip(params.get("atten.w_c"), 0.0, None, out=params.get("atten.w_c"))
    if "scat.lam" in params.layout:
        np.clip(params.get("scat.lam"), 0.0, 1.0, out=params.get("scat.lam"))
        np.clip(params.get("scat.delta"), 0.0, None, out=params.get("scat.delta"))


# ---------------------------------------------------------------------------
# forward composition shared by training and rendering
# ---------------------------------------------------------------------------

def composite_view(leaves: dict, cam, target: np.ndarray, cfg: TrainConfig,
                   profile: adapt.WaterProfile):
    """Render one view and apply the water model; returns the tape tensors."""
    render = rasterize_tensors(leaves, cam, d_far=cfg.d_far)
    j_hat = render.color
    depth = render.depth.detach() if cfg.detach_depth else render.depth
    edge = attenuation.edge_factor(target, depth.value)
    a_map = attenuation.attenuation_map(depth, edge, leaves, t_mod=profile.t_mod)
    b_map, b_s = scattering.scattering_map(depth, leaves, sigma_c=cfg.sigma_c,
                                           neutral=cfg.neutral_scatter)
    i_hat = j_hat * a_map + b_map
    return render, j_hat, depth, a_map, b_map, b_s, i_hat


def full_loss(leaves: dict, cam, target: np.ndarray, cfg: TrainConfig,
              profile: adapt.WaterProfile):
    """LossBreakdown tensors for one view under the complete objective."""
    wts = cfg.weights
    render, j_hat, depth, a_map, b_map, b_s, i_hat = composite_view(
        leaves, cam, target, cfg, profile)
    t_map = tape.tmean(a_map, axis=2)

    basic = losses.l_basic(i_hat, target, lambda_d=wts.lambda_d)
    ab = losses.l_ab(b_s, a_map, depth, t_map, wts.mu, cfg.d_far)
    l_att = losses.l_basic(j_hat * a_map + b_map.detach(), target, lambda_d=wts.lambda_d)
    l_sca = losses.l_basic((j_hat * a_map).detach() + b_map, target, lambda_d=wts.lambda_d)
    wat = losses.l_wat(l_att, l_sca, ab, profile.w, wts)
    edge = losses.l_edge(b_s, depth.value, wts.lambda_edge, wts.alpha_s)
    ms = losses.l_ms(i_hat, target, wts.lambda_ms)
    total = losses.combine_total(basic, ab, wat, edge, ms, wts)
    parts = LossBreakdown(
        basic=basic.item(), ab=ab.item(), wat=wat.item(), edge=edge.item(),
        ms=ms.item(), total=total.item(),
        l_attenuation=l_att.item(), l_scattering=l_sca.item(),
    )
    return total, parts, i_hat


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    params: ParamVector
    classifier: adapt.ClassifierWeights
    profile: adapt.WaterProfile
    config: TrainConfig
    iteration: int


def init_params(bundle, cfg: TrainConfig) -> ParamVector:
    """All learnable slots: jittered generator cloud plus default physics."""
    rng = np.random.default_rng(cfg.seed)
    gauss = cloud_to_params(bundle.cloud)
    gauss["gauss.means"] = gauss["gauss.means"] + rng.normal(
        0.0, cfg.init_jitter, gauss["gauss.means"].shape)
    gauss["gauss.colors"] = np.clip(gauss["gauss.colors"] + rng.normal(
        0.0, cfg.init_jitter, gauss["gauss.colors"].shape), 0.0, 1.0)
    slots = dict(gauss)
    slots.update(attenuation.AttenuationParams().slots())
    slots.update(scattering.ScatterParams().slots())
    return ParamVector(slots)


def train(bundle, cfg: TrainConfig):
    """Two-phase optimization; returns (Checkpoint, log rows).

    Log rows are (iter, basic, ab, wat, edge, ms, total, psnr). On numeric
    divergence the last checkpoint saved at an eval interval is returned.
    """
    cfg.validate()
    if len(bundle.cameras) < 2:
        raise ValueError("training needs at least 2 views")

    classifier = adapt.default_classifier()
    mean_rgb = np.mean([img.reshape(-1, 3).mean(axis=0) for img in bundle.degraded], axis=0)
    profile = adapt.classify_water(mean_rgb.reshape(1, 1, 3), classifier)

    params = init_params(bundle, cfg)
    states = {g: AdamState.like(params) for g in ("gauss", "atten", "scat")}
    logs = []
    last_good = Checkpoint(params.copy(), classifier, profile, cfg, 0)
    n_views = len(bundle.cameras)

    for it in range(cfg.iterations):
        sched = adapt.controller(profile, it, cfg.iterations,
                                 enable_fraction=cfg.enable_fraction,
                                 lr_gaussians=cfg.lr_gaussians)
        view = it % n_views
        cam = bundle.cameras[view]
        target = bundle.degraded[view]
        leaves = params.leaves()

        try:
            if sched.water_path_enabled:
                total, parts, i_hat = full_loss(leaves, cam, target, cfg, profile)
            else:
                render = rasterize_tensors(leaves, cam, d_far=cfg.d_far)
                total = losses.l_basic(render.color, target, lambda_d=cfg.weights.lambda_d)
                parts = LossBreakdown(basic=total.item(), ab=0.0, wat=0.0, edge=0.0,
                                      ms=0.0, total=total.item())
                i_hat = render.color
            total.backward()
            grads = ParamVector({n: (leaves[n].grad if leaves[n].grad is not None
                                     else np.zeros(params.shapes[n]))
                                 for n in params.names()})
            group_lrs = {"gauss": sched.lr_gaussians}
            if sched.water_path_enabled:
                group_lrs["atten"] = sched.lr_attenuation
                group_lrs["scat"] = sched.lr_scattering
            lr = _group_lr(params, group_lrs)
            # separate moment/bias-correction clocks per parameter group
            new_params = params.copy()
            for g in ("gauss", "atten", "scat"):
                if group_lrs.get(g, 0.0) <= 0.0:
                    continue
                mask = np.zeros_like(lr)
                for name, (off, size) in params.layout.items():
                    if name.startswith(g + "."):
                        mask[off:off + size] = 1.0
                stepped, states[g] = adam_step(params, grads, states[g], lr * mask)
                new_params.data = np.where(mask > 0, stepped.data, new_params.data)
            params = new_params
            _project_constraints(params)
        except DivergedError:
            return last_good, logs

        if it % cfg.eval_interval == 0 or it == cfg.iterations - 1:
            score = losses.psnr(np.clip(i_hat.value, 0.0, 1.0), target)
            logs.append((it, parts.basic, parts.ab, parts.wat, parts.edge,
                         parts.ms, parts.total, score))
            last_good = Checkpoint(params.copy(), classifier, profile, cfg, it + 1)

    return Checkpoint(params.copy(), classifier, profile, cfg, cfg.iterations), logs


# ---------------------------------------------------------------------------
# physics-only parameter recovery
# ---------------------------------------------------------------------------

def fit_physics(clean: list, depth: list, degraded: list, iters: int = 500,
                lr: float = 0.05, d_far: float = 20.0):
    """Recover water parameters with geometry frozen to ground-truth renders.

    Optimizes the attenuation coefficients and the backscatter parameters
    (neutral modulators, unit channel weights) against the observed images
    by masked MSE; saturated pixels are excluded.
    """
    atten = attenuation.AttenuationParams(w_c=np.ones(3), gamma=0.0)
    scat = scattering.ScatterParams()
    slots = {k: v for k, v in atten.slots().items() if k == "atten.theta_beta"}
    slots.update({k: v for k, v in scat.slots().items()
                  if k in ("scat.b_inf_raw", "scat.theta_b")})
    params = ParamVector(slots)
    state = AdamState.like(params)
    masks = [((img > 1e-6) & (img < 1.0 - 1e-6)).astype(np.float64) for img in degraded]

    def loss_fn(leaves):
        total = None
        for j, d, i_obs, mask in zip(clean, depth, degraded, masks):
            beta = tape.softplus(leaves["atten.theta_beta"])
            a_map = tape.exp(-Tensor(d[:, :, None]) * tape.reshape(beta, (1, 1, 3)))
            b = tape.softplus(leaves["scat.theta_b"])
            b_inf = tape.sigmoid(leaves["scat.b_inf_raw"])
            b_s = 1.0 - tape.exp(-(b * Tensor(d)))
            i_hat = Tensor(j) * a_map + tape.reshape(b_s, d.shape + (1,)) * tape.reshape(b_inf, (1, 1, 3))
            diff = (i_hat - Tensor(i_obs)) * Tensor(mask)
            term = tape.tsum(diff * diff) / max(float(mask.sum()), 1.0)
            total = term if total is None else total + term
        return total

    for _ in range(iters):
        grads = tape.backward(loss_fn, params)
        params, state = adam_step(params, grads, state, lr)

    beta = np.logaddexp(0.0, params.get("atten.theta_beta"))
    b = float(np.logaddexp(0.0, params.get("scat.theta_b")[0]))
    b_inf = 1.0 / (1.0 + np.exp(-params.get("scat.b_inf_raw")))
    beta, b, b_inf = _refine_physics(clean, depth, degraded, masks, beta, b, b_inf)
    params.set("atten.theta_beta", np.log(np.expm1(beta)))
    params.set("scat.theta_b", [np.log(np.expm1(b))])
    params.set("scat.b_inf_raw", np.log(b_inf / (1.0 - b_inf)))
    return {"beta_c": beta, "b": b, "b_inf": b_inf, "params": params}


def _golden_min(f, lo: float, hi: float, iters: int = 80) -> float:
    """Golden-section minimizer for a scalar unimodal function on [lo, hi]."""
    inv_phi = (np.sqrt(5.0) - 1.0) / 2.0
    x1 = hi - inv_phi * (hi - lo)
    x2 = lo + inv_phi * (hi - lo)
    f1, f2 = f(x1), f(x2)
    for _ in range(iters):
        if f1 < f2:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - inv_phi * (hi - lo)
            f1 = f(x1)
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + inv_phi * (hi - lo)
            f2 = f(x2)
    return 0.5 * (lo + hi)


def _refine_physics(clean, depth, degraded, masks, beta, b, b_inf, rounds: int = 3):
    """Coordinate refinement after the joint fit.

    The scatter amplitude and rate trade off along a nearly flat valley when
    optical depths are small, so resolve them directly: scan the rate with
    the per-channel amplitude solved in closed form (linear least squares),
    then rescan each attenuation coefficient.
    """
    j = np.stack(clean)           # (V, H, W, 3)
    d = np.stack(depth)           # (V, H, W)
    i_obs = np.stack(degraded)
    m = np.stack(masks)

    def amp_for_rate(rate, resid):
        s = 1.0 - np.exp(-rate * d)
        den = np.einsum("vhwc,vhw->c", m, s * s) + 1e-12
        num = np.einsum("vhwc,vhwc->c", m, resid * s[..., None])
        return np.clip(num / den, 1e-4, 1.0 - 1e-4)

    for _ in range(rounds):
        resid = i_obs - j * np.exp(-d[..., None] * beta)

        def sse_rate(log_rate):
            rate = np.exp(log_rate)
            amp = amp_for_rate(rate, resid)
            s = 1.0 - np.exp(-rate * d)
            r = resid - s[..., None] * amp
            return float(np.sum(m * r * r))

        b = float(np.exp(_golden_min(sse_rate, np.log(1e-3), np.log(2.0))))
        b_inf = amp_for_rate(b, resid)

        back = b_inf * (1.0 - np.exp(-b * d))[..., None]
        direct_target = i_obs - back
        for c in range(3):
            def sse_beta(log_bc, c=c):
                r = j[..., c] * np.exp(-np.exp(log_bc) * d) - direct_target[..., c]
                return float(np.sum(m[..., c] * r * r))
            beta[c] = float(np.exp(_golden_min(sse_beta, np.log(1e-3), np.log(3.0))))
    return beta, b, b_inf


# ---------------------------------------------------------------------------
# restoration
# ---------------------------------------------------------------------------

def restore(image: np.ndarray, depth: np.ndarray, atten: attenuation.AttenuationParams,
            scat: scattering.ScatterParams, profile: adapt.WaterProfile,
            a_min: float = 1e-3, neutral: bool = False):
    """Invert the water model: J = clamp((I - B) / max(A, a_min), 0, 1).

    Returns (restored, valid_mask); pixels where any attenuation channel is
    at or below `a_min` are clamped and flagged invalid.
    """
    edge = attenuation.edge_factor(image, depth)
    a_map = attenuation.attenuation_map_np(depth, edge, atten, t_mod=profile.t_mod)
    b_map, _ = scattering.scattering_map_np(depth, scat, neutral=neutral)
    valid = np.all(a_map > a_min, axis=2)
    restored = np.clip((image - b_map) / np.maximum(a_map, a_min), 0.0, 1.0)
    return restored, valid
