"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything downstream (attention blocks, detector heads, losses) is built
from the primitives in this module.  Tensors are treated as immutable once
they participate in a recorded graph; backward() accumulates gradients by
summation into every reachable leaf that requires them.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np


class TensorError(ValueError):
    """Base class for tensor usage errors."""


class ShapeError(TensorError):
    """Operand shapes do not conform to the primitive's shape rule."""


class NumericError(TensorError):
    """NaN or Inf encountered where finite values are required."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by {where}")


class Tensor:
    """An n-dimensional float64 array, optionally carrying a gradient."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        _check_finite(self.data, "tensor construction")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._bwd: Callable[[np.ndarray], None] | None = None
        self._op: str = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise TensorError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Populate .grad on every requires-grad leaf reachable from this scalar."""
        if self.data.size != 1:
            raise TensorError("backward() requires a scalar loss")
        if self._bwd is None and not self.requires_grad:
            raise TensorError("backward() on a tensor outside any recorded graph")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self._accum(np.ones_like(self.data))
        for node in reversed(topo):
            if node._bwd is not None and node.grad is not None:
                node._bwd(node.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, affine(as_tensor(other), -1.0, 0.0))

    def __rsub__(self, other):
        return add(as_tensor(other), affine(self, -1.0, 0.0))

    def __neg__(self):
        return affine(self, -1.0, 0.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def make_op(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward: Callable[[np.ndarray], None],
    op: str,
) -> Tensor:
    """Wrap an op result, recording it into the graph when gradients flow.

    `backward` receives the upstream gradient and must call parent._accum.
    Custom differentiable ops outside this module use this hook.
    """
    _check_finite(data, op)
    out = Tensor(data)
    out._op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._bwd = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum-reduce a broadcasted gradient back to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: incompatible shapes {a.shape} vs {b.shape}") from e

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return make_op(data, (a, b), bwd, "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: incompatible shapes {a.shape} vs {b.shape}") from e

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return make_op(data, (a, b), bwd, "mul")


def channel_scale(w: Tensor, x: Tensor) -> Tensor:
    """Per-channel reweighting: w[c] * x[c, :, :] for a C x H x W map."""
    if w.data.ndim != 1 or x.data.ndim != 3 or w.shape[0] != x.shape[0]:
        raise ShapeError(
            f"channel_scale: need (C,) and (C,H,W), got {w.shape} and {x.shape}"
        )
    return mul(reshape(w, (w.shape[0], 1, 1)), x)


def affine(x, scale: float, shift: float) -> Tensor:
    x = as_tensor(x)
    data = scale * x.data + shift

    def bwd(g):
        if x.requires_grad:
            x._accum(scale * g)

    return make_op(data, (x,), bwd, "affine")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2):
        raise ShapeError("matmul supports 1-D and 2-D operands only")
    try:
        data = a.data @ b.data
    except ValueError as e:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}") from e

    def bwd(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1 and bd.ndim == 1:  # inner product
            if a.requires_grad:
                a._accum(g * bd)
            if b.requires_grad:
                b._accum(g * ad)
        elif ad.ndim == 2 and bd.ndim == 2:
            if a.requires_grad:
                a._accum(g @ bd.T)
            if b.requires_grad:
                b._accum(ad.T @ g)
        elif ad.ndim == 2 and bd.ndim == 1:  # (m,n)@(n,) -> (m,)
            if a.requires_grad:
                a._accum(np.outer(g, bd))
            if b.requires_grad:
                b._accum(ad.T @ g)
        else:  # (n,)@(n,k) -> (k,)
            if a.requires_grad:
                a._accum(bd @ g)
            if b.requires_grad:
                b._accum(np.outer(ad, g))

    return make_op(data, (a, b), bwd, "matmul")


def relu(x) -> Tensor:
    x = as_tensor(x)
    data = np.maximum(x.data, 0.0)

    def bwd(g):
        if x.requires_grad:
            x._accum(g * (x.data > 0.0))

    return make_op(data, (x,), bwd, "relu")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    data = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                    np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))

    def bwd(g):
        if x.requires_grad:
            x._accum(g * data * (1.0 - data))

    return make_op(data, (x,), bwd, "sigmoid")


def softmax(x, axis: int = -1) -> Tensor:
    """Softmax along one axis, computed with max-subtraction."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        if x.requires_grad:
            inner = (g * data).sum(axis=axis, keepdims=True)
            x._accum(data * (g - inner))

    return make_op(data, (x,), bwd, "softmax")


def gap(x) -> Tensor:
    """Global average pooling: (C, H, W) -> (C,) spatial mean per channel."""
    x = as_tensor(x)
    if x.data.ndim != 3:
        raise ShapeError(f"gap expects a (C,H,W) map, got shape {x.shape}")
    _, h, w = x.shape
    data = x.data.mean(axis=(1, 2))

    def bwd(g):
        if x.requires_grad:
            x._accum(np.broadcast_to(g[:, None, None] / (h * w), x.shape).copy())

    return make_op(data, (x,), bwd, "global-average-pool")


def crop(x, r0: int, r1: int, c0: int, c1: int) -> Tensor:
    """Spatial crop of a (C, H, W) map to rows [r0, r1) and cols [c0, c1)."""
    x = as_tensor(x)
    if x.data.ndim != 3:
        raise ShapeError(f"crop expects a (C,H,W) map, got shape {x.shape}")
    _, h, w = x.shape
    if not (0 <= r0 < r1 <= h and 0 <= c0 < c1 <= w):
        raise ShapeError(f"crop window [{r0}:{r1},{c0}:{c1}] outside {h}x{w} map")
    data = x.data[:, r0:r1, c0:c1].copy()

    def bwd(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[:, r0:r1, c0:c1] = g
            x._accum(full)

    return make_op(data, (x,), bwd, "spatial-crop")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from e
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, o0, o1 in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(o0, o1)
                t._accum(g[tuple(idx)])

    return make_op(data, ts, bwd, "concat")


def tsum(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    data = x.data.sum(axis=axis)

    def bwd(g):
        if x.requires_grad:
            if axis is None:
                x._accum(np.broadcast_to(g, x.shape).copy())
            else:
                x._accum(np.broadcast_to(np.expand_dims(g, axis), x.shape).copy())

    return make_op(data, (x,), bwd, "sum")


def tmean(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return affine(tsum(x, axis=axis), 1.0 / n, 0.0)


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    try:
        data = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from e

    def bwd(g):
        if x.requires_grad:
            x._accum(g.reshape(x.shape))

    return make_op(data.copy(), (x,), bwd, "reshape")


def permute(x, axes: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    data = np.transpose(x.data, axes).copy()
    inv = np.argsort(axes)

    def bwd(g):
        if x.requires_grad:
            x._accum(np.transpose(g, inv))

    return make_op(data, (x,), bwd, "permute")


def transpose2d(x) -> Tensor:
    return permute(x, (1, 0))


def channel_standardize(x, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance per channel over the spatial axes of (C, H, W)."""
    x = as_tensor(x)
    if len(x.shape) != 3:
        raise ShapeError(f"channel_standardize expects (C, H, W), got {x.shape}")
    mu = x.data.mean(axis=(1, 2), keepdims=True)
    var = x.data.var(axis=(1, 2), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x.data - mu) * inv

    def bwd(g):
        if not x.requires_grad:
            return
        gm = g.mean(axis=(1, 2), keepdims=True)
        gy = (g * y).mean(axis=(1, 2), keepdims=True)
        x._accum((g - gm - y * gy) * inv)

    return make_op(y, (x,), bwd, "channel-standardize")


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    c = xp.shape[0]
    cols = np.empty((c, kh, kw, ho, wo), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, xp_shape, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    c = xp_shape[0]
    xp = np.zeros(xp_shape, dtype=np.float64)
    cols = cols.reshape(c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, i, j]
    return xp


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution of a (C,H,W) map with (O,C,kh,kw) filters, zero padding."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects (C,H,W) and (O,C,kh,kw), got {x.shape}, {w.shape}")
    c, h, wd = x.shape
    o, c2, kh, kw = w.shape
    if c != c2:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, filters expect {c2}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output would be empty for input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wm = w.data.reshape(o, -1)
    out = wm @ cols
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (o,):
            raise ShapeError(f"conv2d bias must be ({o},), got {b.shape}")
        out = out + b.data[:, None]
        parents.append(b)

    def bwd(g):
        gm = g.reshape(o, -1)
        if w.requires_grad:
            w._accum((gm @ cols.T).reshape(w.shape))
        if b is not None and b.requires_grad:
            b._accum(gm.sum(axis=1))
        if x.requires_grad:
            dcols = wm.T @ gm
            dxp = _col2im(dcols, xp.shape, kh, kw, stride, ho, wo)
            x._accum(dxp[:, pad : pad + h, pad : pad + wd] if pad else dxp)

    return make_op(out.reshape(o, ho, wo), parents, bwd, "conv2d")


_PRIMITIVES = {
    "add": lambda inputs, attrs: add(*inputs),
    "elementwise-mul": lambda inputs, attrs: mul(*inputs),
    "channel-broadcast-mul": lambda inputs, attrs: channel_scale(*inputs),
    "matmul": lambda inputs, attrs: matmul(*inputs),
    "conv2d": lambda inputs, attrs: conv2d(*inputs, **attrs),
    "relu": lambda inputs, attrs: relu(*inputs),
    "sigmoid": lambda inputs, attrs: sigmoid(*inputs),
    "softmax-along-axis": lambda inputs, attrs: softmax(*inputs, **attrs),
    "global-average-pool": lambda inputs, attrs: gap(*inputs),
    "spatial-crop": lambda inputs, attrs: crop(*inputs, **attrs),
    "concat-along-axis": lambda inputs, attrs: concat(inputs, **attrs),
    "sum": lambda inputs, attrs: tsum(*inputs, **attrs),
    "mean": lambda inputs, attrs: tmean(*inputs, **attrs),
    "scalar-affine": lambda inputs, attrs: affine(*inputs, **attrs),
    "channel-standardize": lambda inputs, attrs: channel_standardize(*inputs, **attrs),
}


def primitive_forward(kind: str, inputs: Sequence[Tensor], attrs: dict | None = None) -> Tensor:
    """Dispatch a primitive by name; records into the graph when needed."""
    if kind not in _PRIMITIVES:
        raise TensorError(f"unknown primitive kind {kind!r}")
    return _PRIMITIVES[kind](list(inputs), attrs or {})


# ---------------------------------------------------------------------------
# gradient checking and optimizer


class GradCheckReport:
    """Per-element comparison of analytic gradients against central differences."""

    def __init__(self):
        self.entries: list[tuple[str, np.ndarray]] = []
        self.failures: list[tuple[str, int, float]] = []

    @property
    def max_rel_err(self) -> float:
        if not self.entries:
            return 0.0
        return max(float(e.max()) for _, e in self.entries)

    @property
    def ok(self) -> bool:
        return not self.failures


def gradient_check(f, inputs: Sequence[Tensor], h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients of scalar f(inputs) with central differences."""
    if h <= 0:
        raise TensorError("gradient_check requires h > 0")
    for t in inputs:
        t.zero_grad()
    out = f(*inputs)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise TensorError("gradient_check requires f to return a scalar Tensor")
    out.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    report = GradCheckReport()
    for which, (t, ag) in enumerate(zip(inputs, analytic)):
        if not t.requires_grad:
            continue
        flat = t.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                fp = f(*inputs).item()
            flat[i] = orig - h
            with no_grad():
                fm = f(*inputs).item()
            flat[i] = orig
            num[i] = (fp - fm) / (2.0 * h)
        af = ag.reshape(-1)
        rel = np.abs(af - num) / np.maximum(np.maximum(np.abs(af), np.abs(num)), 1.0)
        name = f"input{which}"
        report.entries.append((name, rel))
        for i in np.nonzero(rel > tol)[0]:
            report.failures.append((name, int(i), float(rel[i])))
    return report


class SGD:
    """SGD with momentum and step learning-rate decay.

    v <- momentum * v + grad;  p <- p - lr(epoch) * v, with
    lr(epoch) = base_lr * decay_factor ** floor(epoch / decay_every_epochs).

    If clip_norm is set, the gradient is rescaled before the momentum
    update so its global L2 norm (over all parameters) is at most clip_norm.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 0.01, momentum: float = 0.9,
                 decay_factor: float = 0.1, decay_every_epochs: int = 4,
                 clip_norm: float | None = None):
        self.params = params
        self.base_lr = lr
        self.momentum = momentum
        self.decay_factor = decay_factor
        self.decay_every_epochs = decay_every_epochs
        self.clip_norm = clip_norm
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def lr_at(self, epoch: int) -> float:
        return self.base_lr * self.decay_factor ** (epoch // self.decay_every_epochs)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, epoch: int = 0) -> None:
        lr = self.lr_at(epoch)
        scale = 1.0
        if self.clip_norm is not None:
            sq = sum(float((p.grad * p.grad).sum())
                     for p in self.params.values() if p.grad is not None)
            norm = np.sqrt(sq)
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        for k, p in self.params.items():
            if p.grad is None:
                continue
            if p.grad.shape != p.data.shape:
                raise ShapeError(f"gradient shape {p.grad.shape} != param shape {p.data.shape} for {k}")
            v = self.velocity[k]
            v *= self.momentum
            v += scale * p.grad
            p.data = p.data - lr * v
