"""Water-body-type classification and the adaptive optimization controller.

A tiny MLP over the global mean color assigns probabilities to
{clear, medium, turbid}; a blue/green-ratio heuristic provides an
independent scalar water index. The controller maps the profile and the
training progress to per-group learning rates and loss-path weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import losses, tape
from .tape import Tensor

CLASS_NAMES = ("clear", "medium", "turbid")
CLASS_ANCHORS = np.array([0.0, 0.5, 1.0])
T_MOD_ANCHORS = np.array([1.0, 1.1, 1.2])

HIDDEN = 16
RATIO_LO = 0.8   # blue/green ratio mapped to water index 1 (turbid)
RATIO_HI = 1.3   # blue/green ratio mapped to water index 0 (clear)

LR_PHYSICS_HIGH = 1e-4
LR_PHYSICS_LOW = 5e-5
LR_CAP_ATTENUATION = 5e-4
LR_CAP_SCATTERING = 1e-4


@dataclass
class WaterProfile:
    probs: np.ndarray          # (3,) over CLASS_NAMES, sums to 1
    w: float                   # scalar water index in [0, 1]
    bg_ratio: float

    @property
    def argmax_class(self) -> str:
        return CLASS_NAMES[int(np.argmax(self.probs))]

    @property
    def t_mod(self) -> float:
        return float(self.probs @ T_MOD_ANCHORS)


@dataclass
class ClassifierWeights:
    w1: np.ndarray = field(default_factory=lambda: np.zeros((HIDDEN, 3)))
    b1: np.ndarray = field(default_factory=lambda: np.zeros(HIDDEN))
    w2: np.ndarray = field(default_factory=lambda: np.zeros((3, HIDDEN)))
    b2: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def slots(self) -> dict[str, np.ndarray]:
        return {"cls.w1": self.w1, "cls.b1": self.b1,
                "cls.w2": self.w2, "cls.b2": self.b2}

    @staticmethod
    def from_slots(leaves: dict) -> "ClassifierWeights":
        def val(x):
            return x.value if isinstance(x, Tensor) else np.asarray(x)
        return ClassifierWeights(w1=val(leaves["cls.w1"]).copy(), b1=val(leaves["cls.b1"]).copy(),
                                 w2=val(leaves["cls.w2"]).copy(), b2=val(leaves["cls.b2"]).copy())


@dataclass
class TrainingSchedule:
    lr_gaussians: float
    lr_attenuation: float
    lr_scattering: float
    alpha_w: float
    beta_w: float
    water_path_enabled: bool


def classifier_probs(mean_rgb, leaves: dict) -> Tensor:
    """Softmax(W2 . ReLU(W1 . x + b1) + b2) on the tape.

    The mean color is chromaticity-normalized (divided by its channel sum)
    so the decision depends on hue balance, not overall brightness.
    """
    mean_rgb = np.asarray(mean_rgb, dtype=np.float64)
    x = tape.as_tensor(mean_rgb / max(mean_rgb.sum(), 1e-8))
    hidden = tape.relu(tape.einsum("hc,c->h", leaves["cls.w1"], x) + leaves["cls.b1"])
    logits = tape.einsum("ch,h->c", leaves["cls.w2"], hidden) + leaves["cls.b2"]
    shifted = logits - float(np.max(logits.value))
    e = tape.exp(shifted)
    return e / tape.tsum(e)


def classify_water(image: np.ndarray, cw: ClassifierWeights) -> WaterProfile:
    """Classify one linear-RGB image by its global mean color."""
    image = np.asarray(image, dtype=np.float64)
    if image.size == 0:
        raise ValueError("cannot classify an empty image")
    mean_rgb = image.reshape(-1, 3).mean(axis=0)
    leaves = {k: Tensor(v) for k, v in cw.slots().items()}
    with tape.no_grad():
        probs = classifier_probs(mean_rgb, leaves).value
    bg_ratio = float(mean_rgb[2] / max(mean_rgb[1], 1e-8))
    return WaterProfile(probs=probs, w=float(probs @ CLASS_ANCHORS), bg_ratio=bg_ratio)


def water_index_heuristic(image: np.ndarray) -> float:
    """Blue/green-ratio water index: high ratio (blue cast) means clear water."""
    image = np.asarray(image, dtype=np.float64)
    mean_rgb = image.reshape(-1, 3).mean(axis=0)
    ratio = mean_rgb[2] / max(mean_rgb[1], 1e-8)
    return float(np.clip((RATIO_HI - ratio) / (RATIO_HI - RATIO_LO), 0.0, 1.0))


def ratio_to_index(bg_ratio: float) -> float:
    return float(np.clip((RATIO_HI - bg_ratio) / (RATIO_HI - RATIO_LO), 0.0, 1.0))


def index_to_class(w: float) -> str:
    if w < 1.0 / 3.0:
        return "clear"
    if w < 2.0 / 3.0:
        return "medium"
    return "turbid"


def controller(profile: WaterProfile, iteration: int, total: int,
               enable_fraction: float = 1.0 / 3.0,
               lr_gaussians: float = 1.6e-3) -> TrainingSchedule:
    """Per-iteration learning rates and loss-path weights.

    The water path switches on at enable_fraction * total. Clear water decays
    the physics learning rates linearly from 1e-4 to 5e-5 over the post-enable
    window; turbid water holds 1e-4; medium interpolates by the water index.
    """
    if not 0 <= iteration < max(total, 1):
        raise ValueError(f"iteration {iteration} outside [0, {total})")
    enable_iter = int(np.ceil(enable_fraction * total))
    enabled = iteration >= enable_iter
    if not enabled:
        return TrainingSchedule(lr_gaussians=lr_gaussians, lr_attenuation=0.0,
                                lr_scattering=0.0,
                                alpha_w=losses.alpha_of_w(profile.w),
                                beta_w=losses.beta_of_w(profile.w),
                                water_path_enabled=False)
    span = max(total - 1 - enable_iter, 1)
    frac = min((iteration - enable_iter) / span, 1.0)
    lr_clear = LR_PHYSICS_HIGH + frac * (LR_PHYSICS_LOW - LR_PHYSICS_HIGH)
    cls = profile.argmax_class
    if cls == "clear":
        lr_phys = lr_clear
    elif cls == "turbid":
        lr_phys = LR_PHYSICS_HIGH
    else:
        lr_phys = (1.0 - profile.w) * lr_clear + profile.w * LR_PHYSICS_HIGH
    return TrainingSchedule(
        lr_gaussians=lr_gaussians,
        lr_attenuation=min(lr_phys, LR_CAP_ATTENUATION),
        lr_scattering=min(lr_phys, LR_CAP_SCATTERING),
        alpha_w=losses.alpha_of_w(profile.w),
        beta_w=losses.beta_of_w(profile.w),
        water_path_enabled=True,
    )


# ---------------------------------------------------------------------------
# offline classifier fitting
# ---------------------------------------------------------------------------

def make_corpus(n_per_class: int = 120, seed: int = 11):
    """Labeled mean-color corpus with class-conditioned blue/green ratios."""
    rng = np.random.default_rng(seed)
    ranges = {"clear": (1.20, 1.50), "medium": (0.97, 1.13), "turbid": (0.60, 0.90)}
    feats, labels = [], []
    for ci, name in enumerate(CLASS_NAMES):
        lo, hi = ranges[name]
        for _ in range(n_per_class):
            green = rng.uniform(0.2, 0.5)
            blue = rng.uniform(lo, hi) * green
            red = rng.uniform(0.04, 0.18)
            feats.append([red, green, min(blue, 1.0)])
            labels.append(ci)
    return np.array(feats), np.array(labels)


def fit_classifier(feats: np.ndarray, labels: np.ndarray, iters: int = 2000,
                   lr: float = 0.2, seed: int = 3) -> ClassifierWeights:
    """Fit the 2-layer classifier by full-batch cross-entropy descent."""
    feats = feats / np.maximum(feats.sum(axis=1, keepdims=True), 1e-8)
    rng = np.random.default_rng(seed)
    w1 = rng.normal(0.0, 0.5, (HIDDEN, 3))
    b1 = np.zeros(HIDDEN)
    w2 = rng.normal(0.0, 0.5, (3, HIDDEN))
    b2 = np.zeros(3)
    onehot = np.eye(3)[labels]
    n = len(labels)
    for _ in range(iters):
        pre = feats @ w1.T + b1
        hid = np.maximum(pre, 0.0)
        logits = hid @ w2.T + b2
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        probs = e / e.sum(axis=1, keepdims=True)
        d_logits = (probs - onehot) / n
        g_w2 = d_logits.T @ hid
        g_b2 = d_logits.sum(axis=0)
        d_hid = (d_logits @ w2) * (pre > 0.0)
        g_w1 = d_hid.T @ feats
        g_b1 = d_hid.sum(axis=0)
        w1 -= lr * g_w1
        b1 -= lr * g_b1
        w2 -= lr * g_w2
        b2 -= lr * g_b2
    return ClassifierWeights(w1=w1, b1=b1, w2=w2, b2=b2)


def default_classifier(seed: int = 11) -> ClassifierWeights:
    feats, labels = make_corpus(seed=seed)
    return fit_classifier(feats, labels)
