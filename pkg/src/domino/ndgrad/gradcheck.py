from __future__ import annotations

from contextlib import nullcontext
from typing import Callable

import numpy as np

from .core import Array, ShapeError, Tape, kink_log


def grad_check(f: Callable[[Array], Array], x: Array, eps: float = 1e-5,
               indices=None, skip_kinks: bool = False, stats: dict | None = None) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` builds a scalar from ``x`` (it may also close over ``x``). ``indices``
    restricts the finite-difference sweep to a subset of flat coordinates, which
    keeps checks on large parameter tensors affordable.

    With ``skip_kinks`` a coordinate is left out when the two perturbed
    evaluations put some ReLU input on different sides of zero: the central
    difference then straddles a kink and does not estimate the derivative.
    ``stats`` (if given) receives running ``checked`` and ``skipped`` counts.
    """
    if x.dtype != np.float64:
        raise TypeError("grad_check needs a float64 array")
    x.requires_grad = True
    x.grad = None
    with Tape() as tape:
        out = f(x)
    if out.size != 1:
        raise ShapeError(f"grad_check: f must return a scalar, got shape {out.shape}")
    tape.backward(out)
    analytic = np.zeros(x.size) if x.grad is None else x.grad.reshape(-1).copy()
    x.grad = None

    flat = x.data.reshape(-1)
    coords = range(x.size) if indices is None else indices
    log = kink_log if skip_kinks else nullcontext
    stats = {} if stats is None else stats
    stats.setdefault("checked", 0)
    stats.setdefault("skipped", 0)
    worst = 0.0
    for i in coords:
        orig = flat[i]
        with log() as k_hi:
            flat[i] = orig + eps
            hi = f(x).item()
        with log() as k_lo:
            flat[i] = orig - eps
            lo = f(x).item()
        flat[i] = orig
        if skip_kinks and k_hi.patterns != k_lo.patterns:
            stats["skipped"] += 1
            continue
        stats["checked"] += 1
        numeric = (hi - lo) / (2 * eps)
        err = abs(analytic[i] - numeric) / (abs(analytic[i]) + 1e-8)
        worst = max(worst, err)
    return worst
