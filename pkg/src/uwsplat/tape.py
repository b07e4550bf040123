"""Reverse-mode autodiff over numpy arrays.

A small tape: every operation used by the renderer and the physics models
declares its analytic vector-Jacobian product here. Gradients are accumulated
in a fixed topological order, so two backward passes over identical inputs
produce bit-identical results.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from .core import DivergedError, block_mean, block_mean_vjp, resize_axis_plan

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph building inside the block (forward-only evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


class Tensor:
    __slots__ = ("value", "grad", "_parents", "_vjp")

    def __init__(self, value, parents=(), vjp=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = parents
        self._vjp = vjp

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def backward(self):
        if self.value.size != 1:
            raise ValueError("backward() requires a scalar output")
        if not np.isfinite(self.value):
            raise DivergedError("loss is non-finite")
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node._vjp is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._vjp(node.grad)):
                if g is None:
                    continue
                # never accumulate in place: vjp outputs may alias node.grad
                parent.grad = g if parent.grad is None else parent.grad + g

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def item(self) -> float:
        return float(self.value)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value, parents, vjp):
    if _grad_enabled:
        return Tensor(value, parents, vjp)
    return Tensor(value)


# -- elementwise -----------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.value * b.value, (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.shape),
                            _unbroadcast(g * a.value, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.value / b.value
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.value, a.shape),
                            _unbroadcast(-g * out / b.value, b.shape)))


def power(a, p: float):
    a = as_tensor(a)
    val = a.value ** p
    return _make(val, (a,), lambda g: (g * p * a.value ** (p - 1),))


def exp(a):
    a = as_tensor(a)
    val = np.exp(a.value)
    return _make(val, (a,), lambda g: (g * val,))


def log(a):
    a = as_tensor(a)
    return _make(np.log(a.value), (a,), lambda g: (g / a.value,))


def log1p(a):
    a = as_tensor(a)
    return _make(np.log1p(a.value), (a,), lambda g: (g / (1.0 + a.value),))


def sqrt(a):
    a = as_tensor(a)
    val = np.sqrt(a.value)
    return _make(val, (a,), lambda g: (g * 0.5 / val,))


def absolute(a):
    a = as_tensor(a)
    return _make(np.abs(a.value), (a,), lambda g: (g * np.sign(a.value),))


def relu(a):
    a = as_tensor(a)
    mask = a.value > 0.0
    return _make(a.value * mask, (a,), lambda g: (g * mask,))


def sigmoid(a):
    a = as_tensor(a)
    z = np.exp(-np.abs(a.value))
    val = np.where(a.value >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return _make(val, (a,), lambda g: (g * val * (1.0 - val),))


def softplus(a):
    a = as_tensor(a)
    val = np.logaddexp(0.0, a.value)
    sig = 1.0 / (1.0 + np.exp(-np.clip(a.value, -500, 500)))
    return _make(val, (a,), lambda g: (g * sig,))


def maximum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    mask = a.value >= b.value
    return _make(np.maximum(a.value, b.value), (a, b),
                 lambda g: (_unbroadcast(g * mask, a.shape),
                            _unbroadcast(g * ~mask, b.shape)))


def minimum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    mask = a.value <= b.value
    return _make(np.minimum(a.value, b.value), (a, b),
                 lambda g: (_unbroadcast(g * mask, a.shape),
                            _unbroadcast(g * ~mask, b.shape)))


def clip(a, lo: float, hi: float):
    a = as_tensor(a)
    mask = (a.value >= lo) & (a.value <= hi)
    return _make(np.clip(a.value, lo, hi), (a,), lambda g: (g * mask,))


# -- reductions and shaping ------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    val = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return _make(val, (a,), vjp)


def tmean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def amax(a, axis: int, keepdims=False):
    a = as_tensor(a)
    arg = np.argmax(a.value, axis=axis)
    val = np.max(a.value, axis=axis, keepdims=keepdims)

    def vjp(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        out = np.zeros_like(a.value)
        np.put_along_axis(out, np.expand_dims(arg, axis), gg, axis=axis)
        return (out,)

    return _make(val, (a,), vjp)


def reshape(a, shape):
    a = as_tensor(a)
    return _make(a.value.reshape(shape), (a,),
                 lambda g: (g.reshape(a.shape),))


def moveaxis(a, src, dst):
    a = as_tensor(a)
    return _make(np.moveaxis(a.value, src, dst), (a,),
                 lambda g: (np.moveaxis(g, dst, src),))


def _is_basic_key(key) -> bool:
    """Basic indexing (ints/slices) selects without repetition, so the
    gradient can be added with a plain slice assignment instead of add.at."""
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(p, (int, np.integer, slice)) for p in parts)


def getitem(a, key):
    a = as_tensor(a)
    if _is_basic_key(key):
        def vjp(g):
            out = np.zeros_like(a.value)
            out[key] += g
            return (out,)
    else:
        def vjp(g):
            out = np.zeros_like(a.value)
            np.add.at(out, key, g)
            return (out,)

    return _make(a.value[key], (a,), vjp)


def take_axis(a, idx: np.ndarray, axis: int):
    """Gather along one axis with an integer index array (repeats allowed)."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)

    def vjp(g):
        out = np.zeros_like(a.value)
        om = np.moveaxis(out, axis, 0)
        np.add.at(om, idx, np.moveaxis(g, axis, 0))
        return (out,)

    return _make(np.take(a.value, idx, axis=axis), (a,), vjp)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    val = np.stack([t.value for t in tensors], axis=axis)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(val, tuple(tensors), vjp)


def concatenate(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    val = np.concatenate([t.value for t in tensors], axis=axis)
    sizes = [t.value.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        sl = [slice(None)] * g.ndim
        grads = []
        for i in range(len(tensors)):
            sl[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return _make(val, tuple(tensors), vjp)


def cumsum(a, axis: int):
    a = as_tensor(a)

    def vjp(g):
        return (np.flip(np.cumsum(np.flip(g, axis), axis), axis),)

    return _make(np.cumsum(a.value, axis=axis), (a,), vjp)


def einsum(spec: str, a, b):
    """Two-operand einsum; backward swaps the output subscript with one input.

    Valid for specs with no index repeated inside a single operand, which
    covers every contraction used in this package.
    """
    a, b = as_tensor(a), as_tensor(b)
    ins, out_sub = spec.split("->")
    sub_a, sub_b = ins.split(",")
    val = np.einsum(spec, a.value, b.value)

    def vjp(g):
        ga = np.einsum(f"{out_sub},{sub_b}->{sub_a}", g, b.value)
        gb = np.einsum(f"{out_sub},{sub_a}->{sub_b}", g, a.value)
        return (ga, gb)

    return _make(val, (a, b), vjp)


def matmul(a, b):
    return einsum("ij,jk->ik", a, b)


# -- resampling ------------------------------------------------------------

def downsample(a, factor: int, hw_axes=(0, 1)):
    """Block-mean downsample (ceil sizing, partial edge blocks averaged)."""
    a = as_tensor(a)
    in_shape = a.shape
    val = block_mean(a.value, factor, axes=hw_axes)
    return _make(val, (a,),
                 lambda g: (block_mean_vjp(g, in_shape, factor, axes=hw_axes),))


def upsample(a, target_dims, hw_axes=(0, 1)):
    """Bilinear resize to explicit target dims with edge clamping."""
    a = as_tensor(a)
    out = a
    for ax, m in zip(hw_axes, target_dims):
        i0, i1, w0, w1 = resize_axis_plan(out.shape[ax], int(m))
        shape = [1] * out.ndim
        shape[ax] = int(m)
        out = add(mul(take_axis(out, i0, ax), w0.reshape(shape)),
                  mul(take_axis(out, i1, ax), w1.reshape(shape)))
    return out


def pad_edge(a, width: int, hw_axes=(-2, -1)):
    """Replicate-pad the two spatial axes by `width`."""
    out = as_tensor(a)
    for ax in hw_axes:
        n = out.shape[ax]
        idx = np.clip(np.arange(-width, n + width), 0, n - 1)
        out = take_axis(out, idx, ax % out.ndim)
    return out


# -- convolution building blocks ------------------------------------------

def conv3x3(x, w, b=None):
    """3x3 convolution with replicate padding.

    x: (Cin, H, W) tensor; w: (Cout, Cin, 3, 3); b: (Cout,) or None.
    """
    cin, h, wd = x.shape
    xp = pad_edge(x, 1, hw_axes=(1, 2))
    patches = []
    for dy in range(3):
        for dx in range(3):
            patches.append(xp[:, dy:dy + h, dx:dx + wd])
    s = stack(patches, axis=1)            # (Cin, 9, H, W)
    s = reshape(s, (cin * 9, h, wd))
    wf = reshape(w, (w.shape[0], cin * 9))
    out = einsum("ok,khw->ohw", wf, s)
    if b is not None:
        out = add(out, reshape(b, (b.shape[0], 1, 1)))
    return out


def conv1x1(x, w, b=None):
    """1x1 convolution: x (Cin, H, W), w (Cout, Cin)."""
    out = einsum("ok,khw->ohw", w, x)
    if b is not None:
        out = add(out, reshape(b, (b.shape[0], 1, 1)))
    return out


_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T


def sobel_pair(f):
    """Differentiable Sobel gradients of a (H, W) tensor, replicate borders."""
    x = reshape(f, (1,) + f.shape)
    k = Tensor(np.stack([_SOBEL_X, _SOBEL_Y])[:, None, :, :])
    g = conv3x3(x, k)
    return g[0], g[1]


def conv1d_axis(x, kernel: np.ndarray, axis: int):
    """Correlate with a 1-D kernel along `axis`, replicate padding.

    Implemented as a single tape node: the forward pass dots sliding windows
    of the edge-padded input with the kernel; the backward pass scatters the
    flipped kernel and folds the padding gradient onto the border samples.
    """
    x = as_tensor(x)
    kernel = np.asarray(kernel, dtype=np.float64)
    k = kernel.size
    r = k // 2
    n = x.shape[axis]
    xm = np.moveaxis(x.value, axis, -1)
    pad = [(0, 0)] * xm.ndim
    pad[-1] = (r, k - 1 - r)
    xp = np.pad(xm, pad, mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(xp, k, axis=-1)
    val = np.moveaxis(windows @ kernel, -1, axis)

    def vjp(g):
        gm = np.moveaxis(g, axis, -1)
        buf = np.zeros(xp.shape, dtype=np.float64)
        for i in range(k):
            buf[..., i:i + n] += gm * kernel[i]
        gx = buf[..., r:r + n].copy()
        if r:
            gx[..., 0] += buf[..., :r].sum(axis=-1)
        if k - 1 - r:
            gx[..., -1] += buf[..., r + n:].sum(axis=-1)
        return (np.moveaxis(gx, -1, axis),)

    return _make(val, (x,), vjp)


# -- parameter plumbing ----------------------------------------------------

class ParamVector:
    """Named parameter slots over one flat float64 array.

    Slots are laid out contiguously in sorted-name order, giving a
    deterministic iteration order and a stable flat representation for
    optimizers, checkpoints and finite differences.
    """

    def __init__(self, slots: dict[str, np.ndarray]):
        names = sorted(slots)
        self.shapes = {n: np.asarray(slots[n]).shape for n in names}
        offset = 0
        self.layout = {}
        for n in names:
            size = int(np.prod(self.shapes[n], dtype=int)) if self.shapes[n] else 1
            self.layout[n] = (offset, size)
            offset += size
        self.data = np.empty(offset, dtype=np.float64)
        for n in names:
            off, size = self.layout[n]
            self.data[off:off + size] = np.asarray(slots[n], dtype=np.float64).ravel()

    def names(self):
        return list(self.layout)

    def get(self, name: str) -> np.ndarray:
        off, size = self.layout[name]
        return self.data[off:off + size].reshape(self.shapes[name])

    def set(self, name: str, value) -> None:
        off, size = self.layout[name]
        self.data[off:off + size] = np.asarray(value, dtype=np.float64).ravel()

    def copy(self) -> "ParamVector":
        return ParamVector({n: self.get(n).copy() for n in self.layout})

    def zeros_like(self) -> "ParamVector":
        return ParamVector({n: np.zeros(self.shapes[n]) for n in self.layout})

    def slot_of(self, flat_index: int) -> str:
        for n, (off, size) in self.layout.items():
            if off <= flat_index < off + size:
                return n
        raise IndexError(flat_index)

    def leaves(self) -> dict[str, Tensor]:
        return {n: Tensor(self.get(n)) for n in self.layout}


@dataclass
class GradReport:
    op: str
    max_rel_err: float
    argmax_slot: str
    fd_step: float


def backward(loss_fn, params: ParamVector) -> ParamVector:
    """Gradient of a scalar loss w.r.t. every slot of `params`.

    `loss_fn` receives a dict of leaf tensors keyed by slot name and must
    return a scalar Tensor.
    """
    leaves = params.leaves()
    loss = loss_fn(leaves)
    if not np.isfinite(loss.value):
        raise DivergedError("loss is non-finite", context={"loss": float(loss.value)})
    loss.backward()
    grads = {}
    for n in params.names():
        g = leaves[n].grad
        grads[n] = np.zeros(params.shapes[n]) if g is None else g
    return ParamVector(grads)


def grad_check(loss_fn, params: ParamVector, fd_step: float = 1e-4,
               op_name: str = "loss") -> GradReport:
    """Central-difference check of `backward` over every slot element."""
    if fd_step <= 0:
        raise ValueError("fd_step must be positive")
    analytic = backward(loss_fn, params)

    def eval_loss(pv):
        with no_grad():
            val = float(loss_fn(pv.leaves()).value)
        if not np.isfinite(val):
            raise DivergedError("non-finite value while probing", context={"op": op_name})
        return val

    probe = params.copy()
    max_err = 0.0
    argmax_slot = params.names()[0] if params.names() else ""
    for i in range(probe.data.size):
        orig = probe.data[i]
        probe.data[i] = orig + fd_step
        f_plus = eval_loss(probe)
        probe.data[i] = orig - fd_step
        f_minus = eval_loss(probe)
        probe.data[i] = orig
        fd = (f_plus - f_minus) / (2.0 * fd_step)
        an = analytic.data[i]
        err = abs(an - fd) / max(abs(an), abs(fd), 1e-8)
        if err > max_err:
            max_err = err
            argmax_slot = probe.slot_of(i)
    return GradReport(op=op_name, max_rel_err=max_err, argmax_slot=argmax_slot, fd_step=fd_step)
