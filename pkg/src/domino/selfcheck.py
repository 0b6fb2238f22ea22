"""Finite-difference self-checks for every op kind and every objective edge.

Each case builds float64 inputs from a seed and returns ``(inputs, fn)`` where
``fn(*inputs)`` is the op output. The checked scalar is ``sum(out * W)`` with a
fixed random ``W`` so that no coordinate has a structurally zero gradient.
"""

import numpy as np

from .ndgrad import Array, Tape, forward_op, get_default_dtype, grad_check, set_default_dtype
from .ndgrad import ops


def _away_from_zero(rng, shape):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.1, 1.0, size=shape)


def _case(kind, rng):
    r = rng.standard_normal
    if kind == "add":
        return [r((3, 4)), r((3, 4))], lambda a, b: forward_op("add", [a, b])
    if kind == "sub":
        return [r((3, 4)), r((3, 4))], lambda a, b: forward_op("sub", [a, b])
    if kind == "mul":
        return [r((3, 4)), r((3, 4))], lambda a, b: forward_op("mul", [a, b])
    if kind == "affine":
        return [r((3, 4))], lambda a: ops.affine(a, -1.7, 0.3)
    if kind == "square":
        return [r((3, 4))], ops.square
    if kind == "relu":
        return [_away_from_zero(rng, (3, 4))], ops.relu
    if kind == "leaky_relu":
        return [_away_from_zero(rng, (3, 4))], lambda a: ops.leaky_relu(a, 0.2)
    if kind == "tanh":
        return [r((3, 4))], ops.tanh
    if kind == "exp":
        return [r((3, 4))], ops.exp
    if kind == "log":
        return [rng.uniform(0.5, 2.0, (3, 4))], ops.log
    if kind == "sum":
        return [r((2, 3, 4))], lambda a: ops.sum(a, axis=1)
    if kind == "mean":
        return [r((2, 3, 4))], lambda a: ops.mean(a, axis=(0, 2), keepdims=True)
    if kind == "logsumexp":
        return [r((3, 5))], lambda a: ops.logsumexp(a, axis=-1)
    if kind == "diagonal":
        return [r((2, 4, 4))], ops.diagonal
    if kind == "fill_diagonal":
        return [r((2, 4, 4))], lambda a: ops.fill_diagonal(a, -3.0)
    if kind == "reshape":
        return [r((2, 6))], lambda a: ops.reshape(a, (3, 4))
    if kind == "transpose":
        return [r((2, 3, 4))], lambda a: ops.transpose(a, (2, 0, 1))
    if kind == "concat":
        return [r((2, 3)), r((4, 3))], lambda a, b: ops.concat([a, b], axis=0)
    if kind == "slice":
        return [r((4, 5))], lambda a: ops.slice(a, (slice(1, 3), slice(None, None, 2)))
    if kind == "matmul":
        return [r((2, 3, 4)), r((4, 5))], ops.matmul
    if kind == "inv":
        return [3 * np.eye(3) + 0.3 * r((3, 3))], ops.inv
    if kind == "bias_add":
        return [r((2, 3, 4, 4)), r((3,))], lambda x, b: ops.bias_add(x, b, axis=1)
    if kind == "conv2d":
        return [r((2, 3, 6, 6)), r((4, 3, 3, 3))], lambda x, w: ops.conv2d(x, w, stride=2, pad=1)
    if kind == "convT2d":
        return [r((2, 3, 3, 3)), r((3, 2, 4, 4))], lambda x, w: ops.conv_transpose2d(x, w, stride=2, pad=1)
    if kind == "batchnorm2d":
        return ([r((3, 2, 3, 3)) * 2 + 1, 1 + 0.1 * r((2,)), r((2,))],
                lambda x, g, b: ops.batchnorm2d(x, g, b, training=True))
    if kind == "softmax_xent":
        labels = rng.integers(0, 4, size=5)
        return [r((5, 4))], lambda a: ops.softmax_xent(a, labels)
    if kind == "mse":
        return [r((3, 4)), r((3, 4))], ops.mse
    raise KeyError(kind)


def op_grad_error(kind: str, seed: int) -> float:
    """Max relative error over every input of one op kind at one seed."""
    rng = np.random.default_rng(seed)
    raw, fn = _case(kind, rng)
    arrays = [Array(x, dtype=np.float64) for x in raw]
    probe = fn(*arrays)
    weight = Array(rng.standard_normal(probe.shape), dtype=np.float64)

    worst = 0.0
    for k, target in enumerate(arrays):
        others = [a for a in arrays]
        for j, a in enumerate(others):
            a.requires_grad = j == k

        def f(x, _k=k):
            args = list(others)
            args[_k] = x
            out = fn(*args)
            return ops.sum(out * weight) if out.size > 1 else out

        worst = max(worst, grad_check(f, target, eps=1e-5))
    return worst


# --- objective edges ---------------------------------------------------------

LATENT_BATCH = 72
EDGE_CASES = ("CR:0", "XX:0-1", "CC:0-1", "RR:0-1", "AE:0", "CCA:0-1", "SUP:0")


def edge_grad_error(edge: str, seed: int, coords: int = 6, batch: int | None = None,
                    eps: float = 1e-5, stats: dict | None = None) -> float:
    """Finite-difference check of one objective edge on a narrow float64 model.

    Every parameter tensor with a nonzero gradient is probed at ``coords`` random
    flat positions, and so are the first modality's input images. The CCA edge
    needs more samples than latent dimensions to be well posed, so it defaults to
    a larger batch. Coordinates whose perturbation flips some ReLU branch are
    skipped and counted in ``stats``.
    """
    if batch is None:
        batch = LATENT_BATCH if edge.startswith("CCA") else 4
    from .model import MultimodalModel
    from .objectives import PairGraph, total_loss

    prev = get_default_dtype()
    set_default_dtype(np.float64)
    try:
        rng = np.random.default_rng(seed)
        graph = PairGraph.parse([edge])
        model = MultimodalModel([1, 1], base_channels=2, seed=seed, with_heads=graph.heads_needed(),
                                with_decoders=graph.decoders_needed(), with_sup=graph.sup_needed(),
                                num_classes=3)
        xs = [Array(rng.uniform(0, 1, (batch, 1, 32, 32))) for _ in range(2)]
        labels = rng.integers(0, 3, size=batch)

        def loss(_x=None):
            return total_loss(graph, xs, model, labels)[0]

        params = model.parameters()
        with Tape() as tape:
            root = loss()
        tape.backward(root)
        # biases feeding batchnorm (or a centred CCA) have exactly-zero gradient up to roundoff
        touched = [p for p in params.values() if p.grad is not None and np.max(np.abs(p.grad)) > 1e-10]
        for p in params.values():
            p.grad = None
            p.requires_grad = False

        worst = 0.0
        for target in touched + [xs[0]]:
            idx = rng.choice(target.size, size=min(coords, target.size), replace=False)
            worst = max(worst, grad_check(loss, target, eps=eps, indices=idx, skip_kinks=True, stats=stats))
            target.requires_grad = False
        return worst
    finally:
        set_default_dtype(prev)
