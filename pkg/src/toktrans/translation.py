"""Rewrite a source model's embedding and output head for a new vocabulary.

With a coupling P (v x u) between source and target tokens:

    E' = (P^T * (1/mu)) E        (row t: sum_s P[s,t]/mu[s] E[s])
    L' = (P * (1/nu))^T L        (row t: sum_s P[s,t]/nu[t] L[s])

Both are differentiable in P, so a loss on the translated model reaches the
weight matrix that produced P.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .coupling import Coupling, Marginals
from .lm import LmParams

EmbeddingScaling = Literal["mu", "nu"]


@dataclass(frozen=True)
class VocabMap:
    v: int
    u: int
    d: int

    def __post_init__(self):
        if min(self.v, self.u, self.d) < 1:
            raise ValueError("vocabulary sizes and width must be positive")


@dataclass
class TranslatedHeads:
    E_prime: Tensor
    L_prime: Tensor
    provenance: str

    def __post_init__(self):
        if self.E_prime.shape != self.L_prime.shape:
            raise ValueError("translated embedding and head must have the same shape")


def _coupling_tensor(P) -> Tensor:
    if isinstance(P, Coupling):
        return Tensor(P.P)
    return ad.as_tensor(P)


def _positive(vec, name: str) -> np.ndarray:
    vec = np.asarray(vec.data if isinstance(vec, Tensor) else vec, dtype=np.float64)
    if np.any(vec <= 0):
        raise ValueError(f"{name} must be strictly positive to divide by it")
    return vec


def translate_embeddings(E, P, mu, scaling: EmbeddingScaling = "mu", nu=None) -> Tensor:
    """Target-token embeddings ``(P^T * (1/mu)) E``.

    ``scaling="nu"`` instead normalises each target row by ``1/nu[t]``, making
    every row a convex combination of source rows when columns are exact.
    """
    E, P = ad.as_tensor(E), _coupling_tensor(P)
    if P.shape[0] != E.shape[0]:
        raise ValueError(f"coupling has {P.shape[0]} source rows, embedding has {E.shape[0]}")
    if scaling == "mu":
        inv = 1.0 / _positive(mu, "mu")
        if inv.size != P.shape[0]:
            raise ValueError("mu length does not match the coupling")
        W = ad.hadamard_broadcast_last(ad.transpose(P), Tensor(inv, dtype=P.data.dtype))
    elif scaling == "nu":
        if nu is None:
            raise ValueError("scaling='nu' needs the target marginal")
        return translate_head(E, P, nu)
    else:
        raise ValueError(f"unknown embedding scaling {scaling!r}")
    return W @ E


def translate_head(L, P, nu) -> Tensor:
    """Target-token head rows ``(P * (1/nu))^T L``."""
    L, P = ad.as_tensor(L), _coupling_tensor(P)
    if P.shape[0] != L.shape[0]:
        raise ValueError(f"coupling has {P.shape[0]} source rows, head has {L.shape[0]}")
    inv = 1.0 / _positive(nu, "nu")
    if inv.size != P.shape[1]:
        raise ValueError("nu length does not match the coupling")
    W = ad.hadamard_broadcast_last(P, Tensor(inv, dtype=P.data.dtype))
    return ad.transpose(W) @ L


def translate_heads(E, L, P, m: Marginals, scaling: EmbeddingScaling = "mu",
                    P_head=None, provenance: str = "coupling") -> TranslatedHeads:
    """Both translated matrices; ``P_head`` optionally uses a second coupling for L."""
    E_p = translate_embeddings(E, P, m.mu, scaling, nu=m.nu)
    L_p = translate_head(L, P if P_head is None else P_head, m.nu)
    return TranslatedHeads(E_p, L_p, provenance)


def build_translated_model(source: LmParams, P, m: Marginals, scaling: EmbeddingScaling = "mu",
                           P_head=None) -> LmParams:
    """Source encoder with translated embedding/head; P stays in the graph if it is."""
    heads = translate_heads(source.E, source.L, P, m, scaling, P_head)
    return source.with_heads(heads.E_prime, heads.L_prime)


def truncation_resize(E, L, u: int, seed: int = 0) -> TranslatedHeads:
    """Keep the first ``min(u, v)`` rows; extra rows are seeded Gaussians.

    The fill scale is the mean row norm of E divided by sqrt(d).
    """
    E = np.asarray(E.data if isinstance(E, Tensor) else E)
    L = np.asarray(L.data if isinstance(L, Tensor) else L)
    v, d = E.shape
    keep = min(u, v)
    E_new, L_new = E[:keep].copy(), L[:keep].copy()
    if u > v:
        rng = np.random.default_rng(seed)
        sigma = np.linalg.norm(E, axis=1).mean() / np.sqrt(d)
        E_new = np.concatenate([E_new, rng.standard_normal((u - v, d)) * sigma])
        L_new = np.concatenate([L_new, rng.standard_normal((u - v, d)) * sigma])
    return TranslatedHeads(Tensor(E_new, dtype=E.dtype), Tensor(L_new, dtype=L.dtype), "truncation")


def unconstrained_translate(E, L, W) -> TranslatedHeads:
    """Free translator: ``E' = W^T E`` and ``L' = W^T L`` with no marginal scaling."""
    E, L, W = ad.as_tensor(E), ad.as_tensor(L), ad.as_tensor(W)
    if W.shape[0] != E.shape[0]:
        raise ValueError(f"translator has {W.shape[0]} source rows, embedding has {E.shape[0]}")
    Wt = ad.transpose(W)
    return TranslatedHeads(Wt @ E, Wt @ L, "unconstrained")
