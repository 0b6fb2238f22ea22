"""Thin functional wrappers over :func:`forward_op`."""

from __future__ import annotations

import numpy as np

from .core import Array, forward_op


def matmul(a: Array, b: Array) -> Array:
    return forward_op("matmul", [a, b])


def conv2d(x: Array, w: Array, stride: int = 1, pad: int = 0) -> Array:
    return forward_op("conv2d", [x, w], stride=stride, pad=pad)


def conv_transpose2d(x: Array, w: Array, stride: int = 1, pad: int = 0) -> Array:
    return forward_op("convT2d", [x, w], stride=stride, pad=pad)


def batchnorm2d(x: Array, gamma: Array, beta: Array, *, training: bool = True,
                running_mean: np.ndarray | None = None, running_var: np.ndarray | None = None,
                momentum: float = 0.1, eps: float = 1e-5) -> Array:
    return forward_op("batchnorm2d", [x, gamma, beta], training=training,
                      running_mean=running_mean, running_var=running_var,
                      momentum=momentum, eps=eps)


def leaky_relu(x: Array, slope: float = 0.2) -> Array:
    return forward_op("leaky_relu", [x], slope=slope)


def relu(x: Array) -> Array:
    return forward_op("relu", [x])


def tanh(x: Array) -> Array:
    return forward_op("tanh", [x])


def exp(x: Array) -> Array:
    return forward_op("exp", [x])


def log(x: Array) -> Array:
    return forward_op("log", [x])


def square(x: Array) -> Array:
    return forward_op("square", [x])


def affine(x: Array, scale: float = 1.0, shift: float = 0.0) -> Array:
    return forward_op("affine", [x], scale=scale, shift=shift)


def sum(x: Array, axis=None, keepdims: bool = False) -> Array:  # noqa: A001
    return forward_op("sum", [x], axis=axis, keepdims=keepdims)


def mean(x: Array, axis=None, keepdims: bool = False) -> Array:
    return forward_op("mean", [x], axis=axis, keepdims=keepdims)


def logsumexp(x: Array, axis: int = -1) -> Array:
    return forward_op("logsumexp", [x], axis=axis)


def diagonal(x: Array) -> Array:
    return forward_op("diagonal", [x])


def fill_diagonal(x: Array, value: float) -> Array:
    return forward_op("fill_diagonal", [x], value=value)


def reshape(x: Array, shape) -> Array:
    return forward_op("reshape", [x], shape=tuple(shape))


def transpose(x: Array, axes=None) -> Array:
    return forward_op("transpose", [x], axes=axes)


def concat(xs, axis: int = 0) -> Array:
    return forward_op("concat", list(xs), axis=axis)


def slice(x: Array, index) -> Array:  # noqa: A001
    return forward_op("slice", [x], index=index)


def bias_add(x: Array, b: Array, axis: int = 1) -> Array:
    return forward_op("bias_add", [x, b], axis=axis)


def inv(x: Array) -> Array:
    return forward_op("inv", [x])


def softmax_xent(logits: Array, labels) -> Array:
    return forward_op("softmax_xent", [logits], labels=np.asarray(labels))


def mse(a: Array, b: Array) -> Array:
    return forward_op("mse", [a, b])


def linear(x: Array, w: Array, b: Array | None = None) -> Array:
    """``x @ w.T + b`` with ``w`` stored as (out, in)."""
    out = matmul(x, transpose(w))
    return out if b is None else bias_add(out, b, axis=-1)


def center_columns(x: Array) -> Array:
    """Subtract the column mean of a 2-D array (expressed with explicit matmuls)."""
    n = x.shape[0]
    ones = Array(np.ones((n, 1), dtype=x.dtype))
    mu = mean(x, axis=0, keepdims=True)
    return x - matmul(ones, mu)
