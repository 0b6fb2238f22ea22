"""Dense arrays with tape-based reverse-mode differentiation.

Every differentiable operation goes through :func:`forward_op`, which looks the
kind up in the op registry, validates shapes, and records the operation on the
active :class:`Tape` when any input requires a gradient.
"""

from __future__ import annotations

import functools
import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Array",
    "Tape",
    "ShapeError",
    "forward_op",
    "backward",
    "set_default_dtype",
    "get_default_dtype",
    "set_debug",
    "kink_log",
    "OP_KINDS",
]

_DEFAULT_DTYPE = np.float32
_DEBUG = False
_local = threading.local()


class ShapeError(ValueError):
    """Raised when op inputs have incompatible shapes."""


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


def get_default_dtype():
    return _DEFAULT_DTYPE


class _KinkLog:
    """Branch patterns of piecewise-linear ops seen while the log is active."""

    def __init__(self):
        self.patterns: list[bytes] = []

    def __enter__(self):
        stack = getattr(_local, "kinks", None)
        if stack is None:
            stack = _local.kinks = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.kinks.pop()
        return False


def kink_log() -> _KinkLog:
    """Context manager recording which side of each ReLU kink every element fell on."""
    return _KinkLog()


def _note_branch(mask: np.ndarray) -> None:
    stack = getattr(_local, "kinks", None)
    if stack:
        stack[-1].patterns.append(np.packbits(mask).tobytes())


def set_debug(flag: bool) -> None:
    """Toggle the post-op finiteness check."""
    global _DEBUG
    _DEBUG = bool(flag)


class Array:
    """An n-dimensional float buffer with an optional gradient."""

    __slots__ = ("data", "requires_grad", "grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Array):
            data = data.data
        dtype = dtype or (data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else _DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype))
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Array(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar; all routed through the registry
    def __add__(self, other):
        if isinstance(other, Array):
            return forward_op("add", [self, other])
        return forward_op("affine", [self], scale=1.0, shift=float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Array):
            return forward_op("sub", [self, other])
        return forward_op("affine", [self], scale=1.0, shift=-float(other))

    def __rsub__(self, other):
        return forward_op("affine", [self], scale=-1.0, shift=float(other))

    def __mul__(self, other):
        if isinstance(other, Array):
            return forward_op("mul", [self, other])
        return forward_op("affine", [self], scale=float(other), shift=0.0)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return forward_op("affine", [self], scale=1.0 / float(other), shift=0.0)

    def __neg__(self):
        return forward_op("affine", [self], scale=-1.0, shift=0.0)

    def __matmul__(self, other):
        return forward_op("matmul", [self, other])


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations executed inside the block on inputs
    that require gradients are appended in execution order, which is a valid
    topological order.
    """

    def __init__(self):
        self.records: list[tuple[Array, tuple[Array, ...], Callable]] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Array, inputs: Sequence[Array], fn: Callable) -> None:
        self.records.append((out, tuple(inputs), fn))
        self._produced.add(id(out))

    def backward(self, root: Array) -> None:
        backward(self, root)


def _active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def backward(tape: Tape, root: Array) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf that requires it."""
    if root.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    if id(root) not in tape._produced:
        raise ValueError("backward: root was not recorded on this tape")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for out, inputs, fn in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = fn(g)
        for arr, ig in zip(inputs, in_grads):
            if ig is None or not arr.requires_grad:
                continue
            key = id(arr)
            if key in tape._produced:
                prev = grads.get(key)
                grads[key] = ig if prev is None else prev + ig
            else:
                ig = np.asarray(ig, dtype=arr.dtype).reshape(arr.shape)
                arr.grad = ig.copy() if arr.grad is None else arr.grad + ig


# ---------------------------------------------------------------------------
# op registry

_OPS: dict[str, Callable] = {}
# ops whose backward accepts ``need`` and skips gradients nobody asked for
_MASK_AWARE = {"conv2d", "convT2d"}


def _register(name: str):
    def deco(fn):
        _OPS[name] = fn
        return fn
    return deco


def forward_op(kind: str, inputs: Sequence[Array], **attrs) -> Array:
    """Run op ``kind`` on ``inputs`` and record it on the active tape."""
    fn = _OPS.get(kind)
    if fn is None:
        raise ValueError(f"unknown op kind {kind!r}")
    inputs = [x if isinstance(x, Array) else Array(x) for x in inputs]
    out_data, bwd = fn(*[x.data for x in inputs], **attrs)
    if _DEBUG and not np.all(np.isfinite(out_data)):
        if all(np.all(np.isfinite(x.data)) for x in inputs):
            raise FloatingPointError(f"{kind}: non-finite output from finite inputs")
    tape = _active_tape()
    needs = tape is not None and any(x.requires_grad for x in inputs)
    out = Array(out_data, requires_grad=needs, dtype=out_data.dtype)
    if needs:
        if kind in _MASK_AWARE:
            bwd = functools.partial(bwd, need=tuple(x.requires_grad for x in inputs))
        tape.record(out, inputs, bwd)
    return out


def _shapes(*arrs) -> str:
    return ", ".join(str(tuple(a.shape)) for a in arrs)


def _sum_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    return g


# --- elementwise -----------------------------------------------------------

def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {_shapes(a, b)}")


@_register("add")
def _add(a, b):
    _same_shape("add", a, b)
    return a + b, lambda g: (g, g)


@_register("sub")
def _sub(a, b):
    _same_shape("sub", a, b)
    return a - b, lambda g: (g, -g)


@_register("mul")
def _mul(a, b):
    _same_shape("mul", a, b)
    return a * b, lambda g: (g * b, g * a)


@_register("affine")
def _affine(a, scale=1.0, shift=0.0):
    s = a.dtype.type(scale)
    return a * s + a.dtype.type(shift), lambda g: (g * s,)


@_register("square")
def _square(a):
    return a * a, lambda g: (2 * a * g,)


@_register("relu")
def _relu(a):
    mask = a > 0
    _note_branch(mask)
    return a * mask, lambda g: (g * mask,)


@_register("leaky_relu")
def _leaky_relu(a, slope=0.2):
    s = a.dtype.type(slope)
    pos = a > 0
    _note_branch(pos)
    out = np.where(pos, a, a * s)
    return out, lambda g: (np.where(pos, g, g * s),)


@_register("tanh")
def _tanh(a):
    t = np.tanh(a)
    return t, lambda g: (g * (1 - t * t),)


@_register("exp")
def _exp(a):
    e = np.exp(a)
    return e, lambda g: (g * e,)


@_register("log")
def _log(a):
    return np.log(a), lambda g: (g / a,)


# --- reductions and shape ops ---------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(ax % ndim for ax in axes)


@_register("sum")
def _sum(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    out = np.sum(a, axis=axes, keepdims=keepdims)

    def bwd(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return np.asarray(out, dtype=a.dtype), bwd


@_register("mean")
def _mean(a, axis=None, keepdims=False):
    axes = _norm_axis(axis, a.ndim)
    count = a.size if axes is None else int(np.prod([a.shape[ax] for ax in axes]))
    out = np.mean(a, axis=axes, keepdims=keepdims)

    def bwd(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape),)

    return np.asarray(out, dtype=a.dtype), bwd


@_register("logsumexp")
def _logsumexp(a, axis=-1):
    m = np.max(a, axis=axis, keepdims=True)
    e = np.exp(a - m)
    s = np.sum(e, axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)

    def bwd(g):
        return (np.expand_dims(g, axis) * (e / s),)

    return out, bwd


@_register("diagonal")
def _diagonal(a):
    """Diagonal of the last two (square) axes."""
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ShapeError(f"diagonal: expected square trailing axes, got {a.shape}")
    idx = np.arange(a.shape[-1])

    def bwd(g):
        full = np.zeros_like(a)
        full[..., idx, idx] = g
        return (full,)

    return np.ascontiguousarray(a[..., idx, idx]), bwd


@_register("fill_diagonal")
def _fill_diagonal(a, value=0.0):
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ShapeError(f"fill_diagonal: expected square trailing axes, got {a.shape}")
    idx = np.arange(a.shape[-1])
    out = a.copy()
    out[..., idx, idx] = value

    def bwd(g):
        g = g.copy()
        g[..., idx, idx] = 0
        return (g,)

    return out, bwd


@_register("reshape")
def _reshape(a, shape=None):
    try:
        out = a.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    return out, lambda g: (g.reshape(a.shape),)


@_register("transpose")
def _transpose(a, axes=None):
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: bad axes {axes} for shape {a.shape}")
    inv = np.argsort(axes)
    return np.ascontiguousarray(a.transpose(axes)), lambda g: (g.transpose(inv),)


@_register("concat")
def _concat(*arrs, axis=0):
    ref = arrs[0]
    ax = axis % ref.ndim
    for x in arrs[1:]:
        if x.ndim != ref.ndim or any(x.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {_shapes(*arrs)} along axis {axis}")
    out = np.concatenate(arrs, axis=ax)
    bounds = np.cumsum([0] + [x.shape[ax] for x in arrs])

    def bwd(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(arrs)))

    return out, bwd


@_register("slice")
def _slice(a, index=None):
    out = np.ascontiguousarray(a[index])

    def bwd(g):
        full = np.zeros_like(a)
        full[index] = g
        return (full,)

    return out, bwd


# --- linear algebra --------------------------------------------------------

@_register("matmul")
def _matmul(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shape mismatch {_shapes(a, b)}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ {_shapes(a, b)}")
    if a.ndim == 2 and b.ndim > 2:
        raise ShapeError(f"matmul: batched right operand needs batched left {_shapes(a, b)}")
    out = np.matmul(a, b)

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b, -1, -2))
        gb = np.matmul(np.swapaxes(a, -1, -2), g)
        return ga, _sum_to(gb, b.shape)

    return out, bwd


@_register("inv")
def _inv(a):
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"inv: expected square matrix, got {a.shape}")
    ai = np.linalg.inv(a)
    return ai, lambda g: (-ai.T @ g @ ai.T,)


@_register("bias_add")
def _bias_add(x, b, axis=1):
    ax = axis % x.ndim
    if b.ndim != 1 or b.shape[0] != x.shape[ax]:
        raise ShapeError(f"bias_add: bias {b.shape} does not match axis {axis} of {x.shape}")
    view = [1] * x.ndim
    view[ax] = -1
    others = tuple(i for i in range(x.ndim) if i != ax)
    return x + b.reshape(view), lambda g: (g, g.sum(axis=others))


# --- convolutions ----------------------------------------------------------

def _im2col(x, kh, kw, stride, pad):
    """Patches of ``x`` (N, C, H, W) as a (kh*kw*C, N*Ho*Wo) matrix."""
    n, c, h, w = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    xt = np.zeros((c, n, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    xt[:, :, pad:pad + h, pad:pad + w] = x.transpose(1, 0, 2, 3)
    cols = np.empty((kh, kw, c, n, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[i, j] = xt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(kh * kw * c, n * ho * wo), ho, wo


def _col2im(cols, shape, kh, kw, stride, pad, ho, wo):
    """Adjoint of :func:`_im2col`: scatter-add patches back to (N, C, H, W)."""
    n, c, h, w = shape
    cols = cols.reshape(kh, kw, c, n, ho, wo)
    out = np.zeros((c, n, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[i, j]
    return np.ascontiguousarray(out[:, :, pad:pad + h, pad:pad + w].transpose(1, 0, 2, 3))


@_register("conv2d")
def _conv2d(x, w, stride=1, pad=0):
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: shape mismatch input/kernel {_shapes(x, w)}")
    o, c, kh, kw = w.shape
    if x.shape[2] + 2 * pad < kh or x.shape[3] + 2 * pad < kw:
        raise ShapeError(f"conv2d: kernel larger than padded input {_shapes(x, w)}")
    n = x.shape[0]
    if kh == kw == 1 and stride == 1 and pad == 0:
        cols, ho, wo = x.transpose(1, 0, 2, 3).reshape(c, -1), x.shape[2], x.shape[3]
    else:
        cols, ho, wo = _im2col(x, kh, kw, stride, pad)
    wmat = w.transpose(0, 2, 3, 1).reshape(o, -1)  # (O, kh*kw*C)
    out = (wmat @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)

    def bwd(g, need=(True, True)):
        g2 = g.transpose(1, 0, 2, 3).reshape(o, -1)
        gw = (g2 @ cols.T).reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
        if not need[0]:
            return None, np.ascontiguousarray(gw)
        gcols = wmat.T @ g2
        if kh == kw == 1 and stride == 1 and pad == 0:
            gx = gcols.reshape(c, n, ho, wo).transpose(1, 0, 2, 3)
        else:
            gx = _col2im(gcols, x.shape, kh, kw, stride, pad, ho, wo)
        return np.ascontiguousarray(gx), np.ascontiguousarray(gw)

    return np.ascontiguousarray(out), bwd


@_register("convT2d")
def _convT2d(x, w, stride=1, pad=0):
    # w is (in_channels, out_channels, kh, kw)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"convT2d: shape mismatch input/kernel {_shapes(x, w)}")
    n, ci, h, wd = x.shape
    _, co, kh, kw = w.shape
    ho = (h - 1) * stride - 2 * pad + kh
    wo = (wd - 1) * stride - 2 * pad + kw
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"convT2d: empty output for {_shapes(x, w)}")
    x2 = x.transpose(1, 0, 2, 3).reshape(ci, -1)  # (Ci, N*H*W)
    wmat = w.transpose(2, 3, 1, 0).reshape(kh * kw * co, ci)
    out = _col2im(wmat @ x2, (n, co, ho, wo), kh, kw, stride, pad, h, wd)

    def bwd(g, need=(True, True)):
        gcols, _, _ = _im2col(g, kh, kw, stride, pad)
        if not need[0]:
            return None, np.ascontiguousarray((gcols @ x2.T).reshape(kh, kw, co, ci).transpose(3, 2, 0, 1))
        gx = (wmat.T @ gcols).reshape(ci, n, h, wd).transpose(1, 0, 2, 3)
        gw = (gcols @ x2.T).reshape(kh, kw, co, ci).transpose(3, 2, 0, 1)
        return np.ascontiguousarray(gx), np.ascontiguousarray(gw)

    return out, bwd


@_register("batchnorm2d")
def _batchnorm2d(x, gamma, beta, training=True, running_mean=None, running_var=None,
                 momentum=0.1, eps=1e-5):
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batchnorm2d: shape mismatch {_shapes(x, gamma, beta)}")
    axes = (0, 2, 3)
    view = (1, -1, 1, 1)
    if training:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        mu = x.mean(axis=axes)
        var = x.var(axis=axes)
        if running_mean is not None:
            running_mean *= 1 - momentum
            running_mean += momentum * mu
        if running_var is not None:
            unbiased = var * m / max(m - 1, 1)
            running_var *= 1 - momentum
            running_var += momentum * unbiased
    else:
        mu, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)
    invstd = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x - mu.reshape(view)) * invstd.reshape(view)
    out = xhat * gamma.reshape(view) + beta.reshape(view)

    def bwd(g):
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        dxhat = g * gamma.reshape(view)
        if training:
            mean_d = dxhat.mean(axis=axes, keepdims=True)
            mean_dx = (dxhat * xhat).mean(axis=axes, keepdims=True)
            gx = (dxhat - mean_d - xhat * mean_dx) * invstd.reshape(view)
        else:
            gx = dxhat * invstd.reshape(view)
        return gx, ggamma, gbeta

    return out, bwd


# --- losses ----------------------------------------------------------------

@_register("softmax_xent")
def _softmax_xent(logits, labels=None):
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_xent: logits {logits.shape} vs labels {labels.shape}")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ShapeError(f"softmax_xent: labels outside [0, {logits.shape[1]})")
    n = logits.shape[0]
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    s = e.sum(axis=1, keepdims=True)
    logp = logits - m - np.log(s)
    loss = -logp[np.arange(n), labels].mean()

    def bwd(g):
        p = e / s
        p[np.arange(n), labels] -= 1
        return (p * (g / n),)

    return np.asarray(loss, dtype=logits.dtype), bwd


@_register("mse")
def _mse(a, b):
    _same_shape("mse", a, b)
    diff = a - b
    n = diff.size

    def bwd(g):
        ga = (2.0 / n) * g * diff
        return ga, -ga

    return np.asarray(np.mean(diff * diff), dtype=a.dtype), bwd


OP_KINDS = tuple(sorted(_OPS))
