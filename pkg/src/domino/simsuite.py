"""Representation-similarity measures: CCA, SVCCA, PWCCA and linear CKA.

All measures column-center their inputs. CCA-family measures fall back to a
ridge-regularised covariance path when either matrix is rank deficient or has
no more samples than features; that case is flagged as degenerate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

CCA_EPS = 1e-3
_RANK_TOL = 1e-10


@dataclass
class RepMatrix:
    Z: np.ndarray
    modality: int = 0
    split: str = "train"

    @property
    def n(self) -> int:
        return self.Z.shape[0]

    @property
    def d(self) -> int:
        return self.Z.shape[1]


@dataclass
class SimilarityReport:
    model: str
    values: dict[str, dict[str, float]]  # split -> measure -> value
    flags: dict[str, object] = field(default_factory=dict)
    epoch: int | None = None

    MEASURES = ("cca", "svcca", "pwcca_ij", "pwcca_ji", "cka")

    def rows(self) -> list[dict]:
        return [{"model": self.model, "split": split, **vals} for split, vals in self.values.items()]

    def to_json(self) -> list[dict]:
        return [{**row, "flags": self.flags} for row in self.rows()]


def _center(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2:
        raise ValueError(f"expected an n x d matrix, got shape {z.shape}")
    return z - z.mean(axis=0, keepdims=True)


def _rank(z: np.ndarray) -> int:
    s = np.linalg.svd(z, compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.sum(s > s[0] * max(z.shape) * np.finfo(float).eps * 1e2))


def is_degenerate(zi, zj) -> bool:
    ci, cj = _center(zi), _center(zj)
    n = ci.shape[0]
    return (n <= max(ci.shape[1], cj.shape[1])
            or _rank(ci) < ci.shape[1] or _rank(cj) < cj.shape[1])


def _inv_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(m)
    return (v / np.sqrt(np.maximum(w, _RANK_TOL))) @ v.T


def _cca_parts(zi, zj, eps: float = CCA_EPS):
    """Canonical correlations plus the pieces PWCCA needs.

    Returns (rho, variates_i, degenerate) where ``variates_i`` holds the
    canonical variates of ``zi`` (n x k) in the same order as ``rho``.
    """
    ci, cj = _center(zi), _center(zj)
    if ci.shape[0] != cj.shape[0]:
        raise ValueError(f"sample counts differ: {ci.shape[0]} vs {cj.shape[0]}")
    degenerate = is_degenerate(ci, cj)
    if not degenerate:
        qi, _ = np.linalg.qr(ci)
        qj, _ = np.linalg.qr(cj)
        u, s, _ = np.linalg.svd(qi.T @ qj, full_matrices=False)
        return np.clip(s, 0.0, 1.0), qi @ u, False
    n = ci.shape[0]
    sii = ci.T @ ci / max(n - 1, 1) + eps * np.eye(ci.shape[1])
    sjj = cj.T @ cj / max(n - 1, 1) + eps * np.eye(cj.shape[1])
    sij = ci.T @ cj / max(n - 1, 1)
    wi = _inv_sqrt(sii)
    u, s, _ = np.linalg.svd(wi @ sij @ _inv_sqrt(sjj), full_matrices=False)
    return np.clip(s, 0.0, 1.0), ci @ (wi @ u), True


def canonical_correlations(zi, zj, eps: float = CCA_EPS) -> np.ndarray:
    return _cca_parts(zi, zj, eps)[0]


def cca_measure(zi, zj, eps: float = CCA_EPS) -> float:
    """Mean canonical correlation: nuclear norm of Q_j^T Q_i divided by d."""
    rho = canonical_correlations(zi, zj, eps)
    return float(rho.sum() / rho.size) if rho.size else float("nan")


def cka_linear(zi, zj) -> float:
    ci, cj = _center(zi), _center(zj)
    denom = np.linalg.norm(ci.T @ ci) * np.linalg.norm(cj.T @ cj)
    if denom == 0:
        return float("nan")
    return float(np.linalg.norm(cj.T @ ci) ** 2 / denom)


def svd_reduce(z, variance_keep: float = 0.99) -> np.ndarray:
    """Project centered ``z`` onto the fewest top singular directions holding
    ``variance_keep`` of the squared singular mass."""
    c = _center(z)
    u, s, _ = np.linalg.svd(c, full_matrices=False)
    mass = s ** 2
    total = mass.sum()
    if total == 0:
        return c[:, :1] * 0
    frac = np.cumsum(mass) / total
    k = int(np.searchsorted(frac, variance_keep - 1e-12) + 1)
    k = min(k, max(_rank(c), 1))
    return u[:, :k] * s[:k]


def svcca(zi, zj, variance_keep: float = 0.99, eps: float = CCA_EPS) -> float:
    return cca_measure(svd_reduce(zi, variance_keep), svd_reduce(zj, variance_keep), eps)


def pwcca_weights(zi, zj, eps: float = CCA_EPS) -> tuple[np.ndarray, np.ndarray]:
    """Projection weights (normalised to sum 1) and canonical correlations."""
    rho, variates, _ = _cca_parts(zi, zj, eps)
    ci = _center(zi)
    h = variates[:, : rho.size]
    h = h / np.maximum(np.linalg.norm(h, axis=0, keepdims=True), 1e-300)
    alpha = np.abs(h.T @ ci).sum(axis=1)
    total = alpha.sum()
    alpha = alpha / total if total > 0 else np.full_like(alpha, 1.0 / max(alpha.size, 1))
    return alpha, rho


def pwcca(zi, zj, eps: float = CCA_EPS) -> float:
    """Projection-weighted mean canonical correlation, weights taken from ``zi``."""
    alpha, rho = pwcca_weights(zi, zj, eps)
    return float(alpha @ rho)


def compare(zi, zj, variance_keep: float = 0.99, eps: float = CCA_EPS) -> tuple[dict[str, float], bool]:
    vals = {
        "cca": cca_measure(zi, zj, eps),
        "svcca": svcca(zi, zj, variance_keep, eps),
        "pwcca_ij": pwcca(zi, zj, eps),
        "pwcca_ji": pwcca(zj, zi, eps),
        "cka": cka_linear(zi, zj),
    }
    for name, v in vals.items():
        if not np.isnan(v) and not (-1e-8 <= v <= 1 + 1e-8):
            raise AssertionError(f"{name}={v} outside [0, 1]")
    return vals, is_degenerate(zi, zj)
