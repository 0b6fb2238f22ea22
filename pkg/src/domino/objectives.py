"""Contrastive objectives and the pair-graph composer.

Every contrastive edge reduces to the same primitive: a block of raw critic
scores whose diagonal holds the positive pairs. Rows contrast each ``u``
against all ``v`` in the batch, columns contrast each ``v`` against all ``u``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .model import MultimodalModel
from .ndgrad import Array
from .ndgrad import ops

EDGE_KINDS = ("CR", "XX", "CC", "RR", "AE", "CCA", "SUP")
_UNIMODAL = {"CR", "AE", "SUP"}
_UNORDERED = {"CC", "RR", "CCA"}
_EDGE_RE = re.compile(r"^([A-Za-z]+):(\d+)(?:-(\d+))?$")


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class CriticConfig:
    d: int = 64
    clip: float = 20.0
    penalty: float = 4e-2

    def __post_init__(self):
        if self.clip <= 0:
            raise ValueError("clip must be positive")
        if self.penalty < 0:
            raise ValueError("penalty must be non-negative")


# --- critic and InfoNCE ----------------------------------------------------

def critic_scores(u: Array, v: Array, cfg: CriticConfig = CriticConfig()) -> tuple[Array, Array]:
    """Raw separable scores ``<u, v>/sqrt(d)`` and their ``c*tanh(f/c)`` clip."""
    if u.shape[-1] != v.shape[-1] or u.shape[-1] != cfg.d:
        raise ValueError(f"critic: embedding dims {u.shape[-1]} / {v.shape[-1]} != d={cfg.d}")
    vt = ops.transpose(v, tuple(range(v.ndim - 2)) + (v.ndim - 1, v.ndim - 2))
    raw = ops.affine(ops.matmul(u, vt), 1.0 / math.sqrt(cfg.d))
    return raw, clip_scores(raw, cfg.clip)


def clip_scores(raw: Array, c: float) -> Array:
    return ops.affine(ops.tanh(ops.affine(raw, 1.0 / c)), c)


def _nce_terms(clipped: Array, clip: float) -> tuple[Array, Array]:
    """Positive scores and the block with each positive replaced by ``-clip``."""
    return ops.diagonal(clipped), ops.fill_diagonal(clipped, -clip)


def _nce_direction(pos: Array, masked: Array, axis: int) -> Array:
    """Mean over positives of ``-s+ + log(sum_{k!=l} exp(s_lk) + exp(-c))``."""
    return ops.mean(ops.logsumexp(masked, axis=axis) - pos)


def infonce_from_scores(raw: Array, cfg: CriticConfig = CriticConfig(), symmetric: bool = False) -> Array:
    """InfoNCE loss on a (..., N, N) raw score block with positives on the diagonal.

    With ``symmetric`` the row and column directions are averaged. The squared
    raw-score penalty is added once.
    """
    if raw.ndim < 2 or raw.shape[-1] != raw.shape[-2]:
        raise ValueError(f"infonce: expected square score blocks, got {raw.shape}")
    if raw.shape[-1] < 2:
        raise ValueError("infonce: need at least 2 samples (no negatives otherwise)")
    pos, masked = _nce_terms(clip_scores(raw, cfg.clip), cfg.clip)
    loss = _nce_direction(pos, masked, axis=-1)
    if symmetric:
        loss = ops.affine(loss + _nce_direction(pos, masked, axis=-2), 0.5)
    if cfg.penalty:
        loss = loss + ops.affine(ops.mean(ops.square(raw)), cfg.penalty)
    return loss


def infonce(u: Array, v: Array, cfg: CriticConfig = CriticConfig()) -> Array:
    """One-directional InfoNCE loss; row ``l`` of ``u`` and ``v`` is the positive pair."""
    if u.shape != v.shape:
        raise ValueError(f"infonce: U {u.shape} and V {v.shape} must match")
    if u.shape[0] < 2:
        raise ValueError("infonce: need at least 2 samples (no negatives otherwise)")
    raw, _ = critic_scores(u, v, cfg)
    return infonce_from_scores(raw, cfg)


# --- graph -----------------------------------------------------------------

@dataclass(frozen=True)
class Edge:
    kind: str
    i: int
    j: int | None = None

    def __str__(self) -> str:
        return f"{self.kind}:{self.i}" if self.j is None else f"{self.kind}:{self.i}-{self.j}"

    @property
    def modalities(self) -> tuple[int, ...]:
        return (self.i,) if self.j is None else (self.i, self.j)


def parse_edge(text: str) -> Edge:
    m = _EDGE_RE.match(text.strip())
    if not m:
        raise GraphError(f"malformed edge {text!r}")
    kind, i, j = m.group(1), int(m.group(2)), m.group(3)
    if kind not in EDGE_KINDS:
        raise GraphError(f"unknown edge kind {kind!r} in {text!r}")
    if kind in _UNIMODAL:
        if j is not None:
            raise GraphError(f"{kind} takes one modality: {text!r}")
        return Edge(kind, i)
    if j is None:
        raise GraphError(f"{kind} needs two modalities: {text!r}")
    j = int(j)
    if i == j:
        raise GraphError(f"{kind} needs distinct modalities: {text!r}")
    if kind in _UNORDERED:
        i, j = min(i, j), max(i, j)
    return Edge(kind, i, j)


@dataclass
class PairGraph:
    edges: list[Edge]
    weights: dict[str, float] = field(default_factory=dict)

    @classmethod
    def parse(cls, edges, weights=None) -> "PairGraph":
        parsed = [e if isinstance(e, Edge) else parse_edge(e) for e in edges]
        if not parsed:
            raise GraphError("graph needs at least one edge")
        if len(set(parsed)) != len(parsed):
            dup = sorted({str(e) for e in parsed if parsed.count(e) > 1})
            raise GraphError(f"duplicate edges: {dup}")
        graph = cls(parsed, {})
        for key, w in (weights or {}).items():
            graph.weights[key] = float(w)
        names = {str(e) for e in parsed}
        kinds = {e.kind for e in parsed}
        for key in graph.weights:
            if key not in names and key not in kinds:
                raise GraphError(f"weight for unknown edge {key!r}")
        return graph

    def weight(self, edge: Edge) -> float:
        return self.weights.get(str(edge), self.weights.get(edge.kind, 1.0))

    @property
    def modalities(self) -> set[int]:
        return {m for e in self.edges for m in e.modalities}

    def heads_needed(self) -> set[int]:
        out = set()
        for e in self.edges:
            if e.kind in ("CR", "XX"):
                out.add(e.i)
            elif e.kind == "CC":
                out.update((e.i, e.j))
        return out

    def decoders_needed(self) -> set[int]:
        return {e.i for e in self.edges if e.kind == "AE"}

    def sup_needed(self) -> set[int]:
        return {e.i for e in self.edges if e.kind == "SUP"}

    def validate(self, n_modalities: int, model: MultimodalModel | None = None,
                 has_labels: bool = True) -> None:
        for e in self.edges:
            if any(m < 0 or m >= n_modalities for m in e.modalities):
                raise GraphError(f"edge {e} references a missing modality (have {n_modalities})")
            if e.kind == "SUP" and not has_labels:
                raise GraphError(f"edge {e} needs labels")
            if model is not None:
                if e.kind == "AE" and e.i not in model.decoders:
                    raise GraphError(f"edge {e} needs a decoder for modality {e.i}")
                if e.kind == "SUP" and e.i not in model.sup:
                    raise GraphError(f"edge {e} needs a classifier for modality {e.i}")
                if e.kind in ("CR", "XX", "CC") and e.i not in model.heads:
                    raise GraphError(f"edge {e} needs a projection head for modality {e.i}")
                if e.kind == "CC" and e.j not in model.heads:
                    raise GraphError(f"edge {e} needs a projection head for modality {e.j}")

    def __str__(self) -> str:
        return ",".join(str(e) for e in self.edges)


def _combo_graphs() -> dict[str, list[str]]:
    base = {
        "CR": ["CR:0", "CR:1"],
        "XX": ["XX:0-1", "XX:1-0"],
        "CC": ["CC:0-1"],
        "RR": ["RR:0-1"],
    }
    out: dict[str, list[str]] = {}
    order = list(base)
    for r in range(1, len(order) + 1):
        for combo in combinations(order, r):
            out["-".join(combo)] = [e for k in combo for e in base[k]]
    return out


NAMED_GRAPHS: dict[str, list[str]] = {
    **_combo_graphs(),
    "AE": ["AE:0", "AE:1"],
    "RR-AE": ["RR:0-1", "AE:0", "AE:1"],
    "CR-CCA": ["CR:0", "CR:1", "CCA:0-1"],
    "DCCAE": ["AE:0", "AE:1", "CCA:0-1"],
    "Supervised": ["SUP:0", "SUP:1"],
}


def named_graph(name: str) -> PairGraph:
    try:
        return PairGraph.parse(NAMED_GRAPHS[name])
    except KeyError:
        raise GraphError(f"unknown objective {name!r}") from None


# --- edge losses -----------------------------------------------------------

def _locations(u: Array) -> Array:
    """(B, D, H, W) embeddings -> (H*W, B, D)."""
    b, d, h, w = u.shape
    return ops.transpose(ops.reshape(u, (b, d, h * w)), (2, 0, 1))


def _soft_cca(zi: Array, zj: Array, eps: float) -> Array:
    """Negative mean squared canonical correlation under a ridge ``eps``."""
    n, d = zi.shape
    ci, cj = ops.center_columns(zi), ops.center_columns(zj)
    eye = np.eye(d, dtype=zi.dtype)
    ridge = Array(eps * eye)

    def cov(a, b):
        return ops.affine(ops.matmul(ops.transpose(a), b), 1.0 / (n - 1))

    s11 = cov(ci, ci) + ridge
    s22 = cov(cj, cj) + ridge
    s12 = cov(ci, cj)
    t = ops.matmul(ops.matmul(ops.inv(s11), s12), ops.matmul(ops.inv(s22), ops.transpose(s12)))
    score = ops.sum(t * Array(eye))
    return ops.affine(score, -1.0 / d)


class _BatchView:
    """Lazily computed, cached encoder/head outputs for one batch."""

    def __init__(self, model: MultimodalModel, xs: list[Array]):
        self.model = model
        self.xs = xs
        self._enc: dict[int, object] = {}
        self._loc: dict[int, Array] = {}

    def enc(self, m: int):
        if m not in self._enc:
            self._enc[m] = self.model.encode(m, self.xs[m])
        return self._enc[m]

    def z(self, m: int) -> Array:
        return self.enc(m).z

    def locations(self, m: int) -> Array:
        if m not in self._loc:
            self._loc[m] = _locations(self.model.heads[m](self.enc(m).c))
        return self._loc[m]


def edge_loss(edge: Edge, view: _BatchView, labels, cfg: CriticConfig, cca_eps: float = 1e-3) -> Array:
    k = edge.kind
    scale = 1.0 / math.sqrt(cfg.d)
    if k in ("CR", "XX"):
        target = edge.i if k == "CR" else edge.j
        u = view.locations(edge.i)
        raw = ops.affine(ops.matmul(u, ops.transpose(view.z(target))), scale)
        return infonce_from_scores(raw, cfg, symmetric=True)
    if k == "CC":
        ui, uj = view.locations(edge.i), view.locations(edge.j)
        raw = ops.affine(ops.matmul(ui, ops.transpose(uj, (0, 2, 1))), scale)
        return infonce_from_scores(raw, cfg, symmetric=True)
    if k == "RR":
        raw = ops.affine(ops.matmul(view.z(edge.i), ops.transpose(view.z(edge.j))), scale)
        return infonce_from_scores(raw, cfg, symmetric=True)
    if k == "AE":
        return ops.mse(view.model.decoders[edge.i](view.z(edge.i)), view.xs[edge.i])
    if k == "CCA":
        return _soft_cca(view.z(edge.i), view.z(edge.j), cca_eps)
    if k == "SUP":
        if labels is None:
            raise GraphError(f"edge {edge} needs labels")
        return ops.softmax_xent(view.model.sup[edge.i](view.z(edge.i)), labels)
    raise GraphError(f"unknown edge kind {k!r}")


def total_loss(graph: PairGraph, xs: list[Array], model: MultimodalModel,
               labels=None, cfg: CriticConfig = CriticConfig(),
               cca_eps: float = 1e-3) -> tuple[Array, dict[str, float]]:
    """Weighted sum of edge losses and a per-edge breakdown (unweighted values)."""
    view = _BatchView(model, xs)
    total = None
    breakdown: dict[str, float] = {}
    for e in graph.edges:
        val = edge_loss(e, view, labels, cfg, cca_eps)
        breakdown[str(e)] = val.item()
        w = graph.weight(e)
        term = val if w == 1.0 else ops.affine(val, w)
        total = term if total is None else total + term
    return total, breakdown
