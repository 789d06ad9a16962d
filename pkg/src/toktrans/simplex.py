"""Projection onto the scaled simplex {p >= 0, sum(p) = alpha} and friends.

Row-wise variants operate on the last axis of a 2-D array so that a whole
Dykstra half-step is a single call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SimplexScale:
    alpha: float

    def __post_init__(self):
        if not (np.isfinite(self.alpha) and self.alpha > 0):
            raise ValueError(f"simplex scale must be positive, got {self.alpha}")


@dataclass(frozen=True)
class SparsemaxResult:
    p: np.ndarray
    support: np.ndarray  # indices with p_i > 0
    tau: float

    @property
    def k(self) -> int:
        return len(self.support)


def _as_alpha(scale) -> float:
    return scale.alpha if isinstance(scale, SimplexScale) else SimplexScale(float(scale)).alpha


def sparsemax_rows(Z: np.ndarray, alpha) -> tuple[np.ndarray, np.ndarray]:
    """Project every row of ``Z`` onto the simplex scaled by ``alpha[i]``.

    Returns ``(P, tau)`` with ``P[i] = max(Z[i] - tau[i], 0)``.
    """
    Z = np.asarray(Z)
    if Z.ndim != 2 or Z.shape[1] == 0:
        raise ValueError(f"expected a non-empty 2-D array, got shape {Z.shape}")
    alpha = np.broadcast_to(np.asarray(alpha, dtype=Z.dtype), (Z.shape[0],))
    if not np.all(alpha > 0):
        raise ValueError("simplex scales must be positive")
    if not np.isfinite(Z).all():
        raise ValueError("sparsemax input contains non-finite entries")
    K = Z.shape[1]
    # stable sort on -Z: ties keep original index order
    zs = -np.sort(-Z, axis=1, kind="stable")
    css = np.cumsum(zs, axis=1)
    ks = np.arange(1, K + 1, dtype=Z.dtype)
    cond = alpha[:, None] + ks * zs > css
    # cond holds on a prefix; k(z) is its length (always >= 1)
    k = cond.sum(axis=1)
    tau = (css[np.arange(Z.shape[0]), k - 1] - alpha) / k
    P = np.maximum(Z - tau[:, None], 0.0)
    return P, tau


def sparsemax(z, scale=1.0) -> SparsemaxResult:
    """Euclidean projection of ``z`` onto {p >= 0 : sum(p) = alpha}."""
    z = np.asarray(z, dtype=np.float64 if np.asarray(z).dtype.kind != "f" else None)
    if z.ndim != 1 or z.size == 0:
        raise ValueError("sparsemax needs a non-empty vector")
    alpha = _as_alpha(scale)
    P, tau = sparsemax_rows(z[None, :], alpha)
    p = P[0]
    return SparsemaxResult(p=p, support=np.flatnonzero(p > 0), tau=float(tau[0]))


def sparsemax_vjp_rows(P: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Row-wise sparsemax VJP using the support of ``P`` (its positive entries)."""
    if P.shape != G.shape:
        raise ValueError(f"upstream shape {G.shape} does not match output shape {P.shape}")
    mask = P > 0
    n = mask.sum(axis=1, keepdims=True)
    mean_s = (G * mask).sum(axis=1, keepdims=True) / np.maximum(n, 1)
    return (G - mean_s) * mask


def sparsemax_vjp(result: SparsemaxResult, upstream) -> np.ndarray:
    upstream = np.asarray(upstream, dtype=result.p.dtype)
    if upstream.shape != result.p.shape:
        raise ValueError(f"upstream length {upstream.shape} does not match {result.p.shape}")
    return sparsemax_vjp_rows(result.p[None, :], upstream[None, :])[0]


def softmax_scaled_rows(Z: np.ndarray, alpha) -> np.ndarray:
    Z = np.asarray(Z)
    if not np.isfinite(Z).all():
        raise ValueError("softmax input contains non-finite entries")
    alpha = np.broadcast_to(np.asarray(alpha, dtype=Z.dtype), (Z.shape[0],))
    e = np.exp(Z - Z.max(axis=1, keepdims=True))
    return alpha[:, None] * e / e.sum(axis=1, keepdims=True)


def softmax_scaled(z, scale=1.0) -> np.ndarray:
    """``alpha * softmax(z)``: strictly positive, sums to ``alpha``."""
    z = np.asarray(z, dtype=float)
    return softmax_scaled_rows(z[None, :], _as_alpha(scale))[0]


def softmax_scaled_vjp_rows(P: np.ndarray, G: np.ndarray, alpha) -> np.ndarray:
    # J = diag(p) - p p^T / alpha, symmetric
    alpha = np.broadcast_to(np.asarray(alpha, dtype=P.dtype), (P.shape[0],))
    return P * (G - (P * G).sum(axis=1, keepdims=True) / alpha[:, None])

