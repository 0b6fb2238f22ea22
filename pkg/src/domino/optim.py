"""RAdam and the one-cycle learning-rate schedule."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class OptimizerState:
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    skipped: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def rho_inf(self) -> float:
        b2 = self.betas[1]
        return 2.0 / (1.0 - b2) - 1.0

    def rho(self, t: int) -> float:
        b2 = self.betas[1]
        return self.rho_inf - 2.0 * t * b2 ** t / (1.0 - b2 ** t)


def radam_step(state: OptimizerState, params: dict[str, np.ndarray],
               grads: dict[str, np.ndarray | None], lr: float) -> bool:
    """One in-place RAdam update. Returns False when the step was skipped.

    A step with any non-finite gradient is skipped and counted in
    ``state.skipped``; the moments are left untouched.
    """
    for g in grads.values():
        if g is not None and not np.all(np.isfinite(g)):
            state.skipped += 1
            log.warning("non-finite gradient; skipping step %d (skipped so far: %d)",
                        state.step + 1, state.skipped)
            return False
    b1, b2 = state.betas
    state.step += 1
    t = state.step
    rho_t = state.rho(t)
    bc1 = 1.0 - b1 ** t
    adaptive = rho_t > 4.0
    if adaptive:
        rho_inf = state.rho_inf
        rect = math.sqrt((rho_t - 4) * (rho_t - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho_t))
        bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if adaptive:
            denom = np.sqrt(v / bc2) + state.eps
            p -= (lr * rect / bc1) * m / denom
        else:
            p -= (lr / bc1) * m
    return True


class RAdam:
    """Applies :func:`radam_step` to the ``.grad`` of named ndgrad arrays."""

    def __init__(self, params: dict, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.state = OptimizerState(betas=tuple(betas), eps=eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float) -> bool:
        return radam_step(self.state,
                          {k: p.data for k, p in self.params.items()},
                          {k: p.grad for k, p in self.params.items()},
                          lr)


def onecycle_lr(step: int, total_steps: int, lr0: float = 4e-4, max_lr: float = 0.01,
                pct_start: float = 0.3, final_div: float = 1e4) -> float:
    """Cosine warm-up from ``lr0`` to ``max_lr`` over the first ``pct_start`` of
    the run, then cosine annealing to ``lr0 / final_div``."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    peak = int(round(pct_start * total_steps))
    peak = min(max(peak, 1), total_steps - 1) if total_steps > 1 else 0
    if step <= peak:
        if peak == 0:
            return max_lr
        frac = step / peak
        return max_lr + (lr0 - max_lr) * (1 + math.cos(math.pi * frac)) / 2
    final = lr0 / final_div
    frac = (step - peak) / (total_steps - 1 - peak)
    return final + (max_lr - final) * (1 + math.cos(math.pi * frac)) / 2


def onecycle_schedule(total_steps: int, **kw) -> list[float]:
    return [onecycle_lr(s, total_steps, **kw) for s in range(total_steps)]
