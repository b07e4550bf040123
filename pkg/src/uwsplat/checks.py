"""Finite-difference validation suite for every differentiable operation.

Each check builds a small, smooth problem (no pixel sits near a hard
support/coverage boundary, no absolute-value kink within a probe step) and
compares the tape gradient against central differences over every parameter
element. The CLI and the test suite both consume `run_gradcheck`.
"""

from __future__ import annotations

import numpy as np

from . import adapt, attenuation, losses, renderer, scattering, tape
from .renderer import Camera
from .tape import GradReport, ParamVector, Tensor

GRAD_TOL = 1e-4
FD_STEP = 1e-4
DEFAULT_SEEDS = (0, 1, 2)


def _probe_camera(size: int = 8) -> Camera:
    return Camera(fx=1.2 * size, fy=1.2 * size, cx=size / 2 - 0.5, cy=size / 2 - 0.5,
                  rotation=np.eye(3), translation=np.zeros(3),
                  width=size, height=size)


def _smooth_field(rng, h, w, lo=0.3, hi=0.7, noise=0.005):
    """A ramp plus small noise: gradient responses stay away from kinks."""
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    ramp = (xx + yy) / (h + w - 2)
    return lo + (hi - lo) * ramp + rng.uniform(-noise, noise, (h, w))


def _check_renderer(rng) -> GradReport:
    """Wide, opaque primitives: full coverage, no support-cutoff crossings."""
    n = 4
    cam = _probe_camera(8)
    slots = {
        "gauss.means": np.stack([
            rng.uniform(-0.5, 0.5, n),
            rng.uniform(-0.5, 0.5, n),
            rng.uniform(3.0, 5.0, n) + np.arange(n),     # distinct, sort-stable depths
        ], axis=1),
        "gauss.quats": rng.normal(1.0, 0.1, (n, 4)),
        "gauss.log_scales": np.log(rng.uniform(1.5, 2.5, (n, 3))),
        "gauss.logits": rng.uniform(1.5, 2.5, n),
        "gauss.colors": rng.uniform(0.2, 0.8, (n, 3)),
    }
    params = ParamVector(slots)
    wc = rng.uniform(0.5, 1.5, (8, 8, 3))
    wd = rng.uniform(0.5, 1.5, (8, 8))

    def loss_fn(leaves):
        out = renderer.rasterize_tensors(leaves, cam)
        return tape.tsum(out.color * Tensor(wc)) + 0.1 * tape.tsum(out.depth * Tensor(wd)) \
            + tape.tsum(out.alpha)

    return tape.grad_check(loss_fn, params, fd_step=FD_STEP, op_name="renderer")


def _check_attenuation(rng) -> GradReport:
    h = w = 8
    edge = rng.uniform(0.0, 1.0, (h, w))
    slots = attenuation.AttenuationParams().slots()
    slots["field.depth"] = rng.uniform(2.0, 8.0, (h, w))
    params = ParamVector(slots)
    wgt = rng.uniform(0.5, 1.5, (h, w, 3))

    def loss_fn(leaves):
        a = attenuation.attenuation_map(leaves["field.depth"], edge, leaves, t_mod=1.1)
        return tape.tsum(a * Tensor(wgt))

    return tape.grad_check(loss_fn, params, fd_step=FD_STEP, op_name="attenuation_map")


def _kink_margin(leaves: dict, depth: np.ndarray) -> float:
    """Distance of the nearest ReLU pre-activation / channel-max tie to its kink.

    Central differences step through parameter space; a kink inside the probe
    interval makes the comparison meaningless, so check setups keep all
    piecewise boundaries outside the probe's reach.
    """
    h, w = depth.shape
    with tape.no_grad():
        d1 = tape.reshape(Tensor(depth), (1, h, w))
        d2 = tape.downsample(d1, 2, hw_axes=(1, 2))
        d4 = tape.downsample(d1, 4, hw_axes=(1, 2))
        pres, acts = [], []
        for d, tag in ((d1, "f1"), (d2, "f2"), (d4, "f3")):
            pre = tape.conv3x3(d, leaves[f"scat.{tag}.w"], leaves[f"scat.{tag}.b"])
            pres.append(pre.value)
            act = tape.relu(pre)
            act = tape.upsample(act, (h, w), hw_axes=(1, 2))
            gap = tape.tmean(tape.tmean(act, axis=2), axis=1)
            hid = tape.einsum("hc,c->h", leaves["scat.ca.w1"], gap) + leaves["scat.ca.b1"]
            pres.append(hid.value)
            scale = tape.sigmoid(tape.einsum("ch,h->c", leaves["scat.ca.w2"],
                                             tape.relu(hid)) + leaves["scat.ca.b2"])
            acts.append((act * tape.reshape(scale, (act.shape[0], 1, 1))).value)
    margin = min(float(np.min(np.abs(p))) for p in pres)
    stacked = np.concatenate(acts, axis=0)
    top2 = np.sort(stacked, axis=0)[-2:]
    margin = min(margin, float(np.min(top2[1] - top2[0])))
    return margin


def _safe_depth(rng, leaves: dict, h: int, w: int, margin: float = 2e-3) -> np.ndarray:
    """A probe moves any pre-activation by at most fd_step * max depth
    (~8e-4 here), so a 2e-3 kink margin keeps every probe one-sided."""
    for _ in range(50):
        depth = rng.uniform(2.0, 8.0, (h, w))
        if _kink_margin(leaves, depth) > margin:
            return depth
    raise RuntimeError("could not find a kink-free depth field")


def _check_multiscale(rng) -> GradReport:
    h = w = 8
    sp = scattering.ScatterParams()
    slots = {k: v for k, v in sp.slots().items() if "." in k[len("scat."):]}
    leaves0 = {k: Tensor(v) for k, v in slots.items()}
    slots["field.depth"] = _safe_depth(rng, leaves0, h, w)
    params = ParamVector(slots)
    wgt = rng.uniform(0.5, 1.5, (h, w))

    def loss_fn(leaves):
        m = scattering.multiscale_features(leaves["field.depth"], leaves)
        return tape.tsum(m * Tensor(wgt))

    return tape.grad_check(loss_fn, params, fd_step=FD_STEP, op_name="multiscale_features")


def _check_scattering(rng) -> GradReport:
    """Gradients w.r.t. the scattering parameters (fixed depth: the depth-edge
    normalizer is intentionally detached, so depth is held constant here)."""
    h = w = 8
    slots = scattering.ScatterParams().slots()
    leaves0 = {k: Tensor(v) for k, v in slots.items()}
    depth = _safe_depth(rng, leaves0, h, w)
    params = ParamVector(slots)
    wgt = rng.uniform(0.5, 1.5, (h, w, 3))

    def loss_fn(leaves):
        b_map, b_s = scattering.scattering_map(depth, leaves)
        return tape.tsum(b_map * Tensor(wgt)) + tape.tsum(b_s)

    return tape.grad_check(loss_fn, params, fd_step=FD_STEP, op_name="scattering_map")


def _check_l_basic(rng) -> GradReport:
    h = w = 8
    img = rng.uniform(0.3, 0.7, (h, w, 3))
    target = img + rng.uniform(0.02, 0.08, (h, w, 3))     # difference bounded off zero
    params = ParamVector({"field.image": img})

    def loss_fn(leaves):
        return losses.l_basic(leaves["field.image"], target)

    return tape.grad_check(loss_fn, params, fd_step=FD_STEP, op_name="l_basic")


def _check_l_ab(rng) -> GradReport:
    h = w = 8
    params = ParamVector({
        "field.b_s": rng.uniform(0.2, 0.8, (h, w)),
        "field.a_map": rng.uniform(0.2, 0.8, (h, w, 3)),
        "field.depth": rng.uniform(2.0, 8.0, (h, w)),
        "field.t_map": rng.uniform(0.2, 0.8, (h, w)),
    })

    def loss_fn(leaves):
        return losses.l_ab(leaves["field.b_s"], leaves["field.a_map"],
                           leaves["field.depth"], leaves["field.t_map"],
                           mu=1.0, d_far=20.0)

    return tape.grad_check(loss_fn, params, fd_step=FD_STEP, op_name="l_ab")


def _check_l_edge(rng) -> GradReport:
    h = w = 8
    depth = _smooth_field(rng, h, w, lo=2.0, hi=8.0, noise=0.05)
    params = ParamVector({"field.b_s": _smooth_field(rng, h, w)})

    def loss_fn(leaves):
        return losses.l_edge(leaves["field.b_s"], depth, lambda_edge=0.1, alpha_s=10.0)

    return tape.grad_check(loss_fn, params, fd_step=FD_STEP, op_name="l_edge")


def _check_l_ms(rng) -> GradReport:
    h = w = 8
    img = rng.uniform(0.3, 0.7, (h, w, 3))
    target = img + rng.uniform(0.02, 0.08, (h, w, 3))
    params = ParamVector({"field.image": img})

    def loss_fn(leaves):
        return losses.l_ms(leaves["field.image"], target, lambda_ms=0.5)

    return tape.grad_check(loss_fn, params, fd_step=FD_STEP, op_name="l_ms")


def _check_l_wat(rng) -> GradReport:
    h = w = 8
    img = rng.uniform(0.3, 0.7, (h, w, 3))
    target = img + rng.uniform(0.02, 0.08, (h, w, 3))
    b_s = rng.uniform(0.2, 0.8, (h, w))
    depth = rng.uniform(2.0, 8.0, (h, w))
    params = ParamVector({"field.image": img, "field.b_s": b_s})
    wts = losses.LossWeights()

    def loss_fn(leaves):
        l_att = losses.l_basic(leaves["field.image"], target)
        l_sca = losses.l1(leaves["field.b_s"], b_s + 0.1)
        a_map = tape.reshape(leaves["field.b_s"], (h, w, 1)) * Tensor(np.ones((1, 1, 3)))
        ab = losses.l_ab(leaves["field.b_s"], a_map, depth,
                         tape.tmean(a_map, axis=2), mu=1.0, d_far=20.0)
        return losses.l_wat(l_att, l_sca, ab, w=0.4, weights=wts)

    return tape.grad_check(loss_fn, params, fd_step=FD_STEP, op_name="l_wat")


def _check_classifier(rng) -> GradReport:
    cw = adapt.ClassifierWeights(
        w1=rng.normal(0.0, 0.5, (adapt.HIDDEN, 3)),
        b1=rng.normal(0.0, 0.1, adapt.HIDDEN),
        w2=rng.normal(0.0, 0.5, (3, adapt.HIDDEN)),
        b2=rng.normal(0.0, 0.1, 3),
    )
    mean_rgb = rng.uniform(0.1, 0.6, 3)
    params = ParamVector(cw.slots())
    wgt = rng.uniform(0.5, 1.5, 3)

    def loss_fn(leaves):
        probs = adapt.classifier_probs(mean_rgb, leaves)
        return tape.tsum(probs * Tensor(wgt))

    return tape.grad_check(loss_fn, params, fd_step=FD_STEP, op_name="classifier")


_CHECKS = (
    _check_renderer,
    _check_attenuation,
    _check_multiscale,
    _check_scattering,
    _check_l_basic,
    _check_l_ab,
    _check_l_edge,
    _check_l_ms,
    _check_l_wat,
    _check_classifier,
)


def run_gradcheck(seeds=DEFAULT_SEEDS) -> list[GradReport]:
    """All checks over all seeds; the op name is suffixed with the seed."""
    reports = []
    for seed in seeds:
        for fn in _CHECKS:
            rng = np.random.default_rng(seed)
            rep = fn(rng)
            reports.append(GradReport(op=f"{rep.op}[seed={seed}]",
                                      max_rel_err=rep.max_rel_err,
                                      argmax_slot=rep.argmax_slot,
                                      fd_step=rep.fd_step))
    return reports
