"""Sparse couplings between two vocabularies.

``dykstra_project`` alternates row and column simplex projections with
Dykstra correction terms, which converges to the Euclidean projection of a
weight matrix onto the transportation polytope

    C(mu, nu) = {P >= 0 : P 1 = mu, P^T 1 = nu}.

That projection is the quadratically regularised OT plan for cost ``-C`` and
is sparse. ``dense_sinkhorn_project`` runs the same loop with a scaled
softmax in place of the projection. Both keep a trace so the unrolled
iterations can be differentiated exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .autodiff import NumericalError, Tensor, register_custom_op
from .simplex import (
    softmax_scaled_rows,
    softmax_scaled_vjp_rows,
    sparsemax_rows,
    sparsemax_vjp_rows,
)

Method = Literal["sparsemax", "softmax"]
ENTROPY_FLOOR = 1e-12


@dataclass(frozen=True)
class Marginals:
    mu: np.ndarray
    nu: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        nu = np.asarray(self.nu, dtype=np.float64)
        for name, m in (("mu", mu), ("nu", nu)):
            if m.ndim != 1 or m.size == 0:
                raise ValueError(f"{name} must be a non-empty vector")
            if np.any(m < 0) or not np.isfinite(m).all():
                raise ValueError(f"{name} must be non-negative and finite")
            if abs(m.sum() - 1.0) > 1e-9:
                raise ValueError(f"{name} must sum to 1 (got {m.sum():.12f})")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "nu", nu)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.mu.size, self.nu.size)

    @classmethod
    def uniform(cls, v: int, u: int) -> "Marginals":
        return cls(np.full(v, 1.0 / v), np.full(u, 1.0 / u))

    @classmethod
    def from_counts(cls, source_counts, target_counts, smoothing: float = 1.0) -> "Marginals":
        """Empirical token frequencies with additive smoothing (keeps every entry > 0)."""
        a = np.asarray(source_counts, dtype=np.float64) + smoothing
        b = np.asarray(target_counts, dtype=np.float64) + smoothing
        return cls(a / a.sum(), b / b.sum())


@dataclass
class DykstraTrace:
    """Outputs of every projection, enough to replay the VJP."""

    method: Method
    mu: np.ndarray
    nu: np.ndarray
    corrections: bool
    row_outputs: list[np.ndarray] = field(default_factory=list)  # Y_k
    col_outputs: list[np.ndarray] = field(default_factory=list)  # X_{k+1}

    @property
    def n_iters(self) -> int:
        return len(self.row_outputs)


@dataclass
class Coupling:
    P: np.ndarray
    marginals: Marginals
    row_err: float
    col_err: float
    trace: DykstraTrace | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.P.shape


def marginal_residual(P, m: Marginals) -> tuple[float, float]:
    P = np.asarray(P)
    row_err = float(np.max(np.abs(P.sum(axis=1) - m.mu)))
    col_err = float(np.max(np.abs(P.sum(axis=0) - m.nu)))
    return row_err, col_err


def sparsity(P) -> float:
    """Fraction of exactly-zero entries."""
    P = np.asarray(P.P if isinstance(P, Coupling) else P)
    return float(np.count_nonzero(P == 0) / P.size)


def projection_objective(P, C) -> float:
    """1/2 ||P - C||_F^2, the nearest-coupling form of the problem."""
    D = np.asarray(P) - np.asarray(C)
    return 0.5 * float(np.sum(D * D))


def transport_objective(P, C) -> float:
    """<-C, P> + 1/2 ||P||_F^2, the l2-regularised transport form.

    Differs from ``projection_objective`` by the constant 1/2 ||C||_F^2, so
    both share the same minimiser over C(mu, nu).
    """
    P, C = np.asarray(P), np.asarray(C)
    return float(-np.sum(C * P) + 0.5 * np.sum(P * P))


def _check_inputs(C: np.ndarray, m: Marginals, n_iters: int) -> np.ndarray:
    C = np.asarray(C, dtype=np.float64 if np.asarray(C).dtype.kind != "f" else None)
    if C.ndim != 2 or C.shape != m.shape:
        raise ValueError(f"weight matrix shape {C.shape} does not match marginals {m.shape}")
    if n_iters < 0:
        raise ValueError("n_iters must be non-negative")
    if not np.isfinite(C).all():
        raise NumericalError("weight matrix contains non-finite entries")
    if np.any(m.mu <= 0) or np.any(m.nu <= 0):
        raise ValueError("marginals must be strictly positive for projection")
    return C


def _row_proj(method: Method, Z: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    if method == "sparsemax":
        return sparsemax_rows(Z, alpha)[0]
    return softmax_scaled_rows(Z, alpha)


def _row_vjp(method: Method, out: np.ndarray, G: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    if method == "sparsemax":
        return sparsemax_vjp_rows(out, G)
    return softmax_scaled_vjp_rows(out, G, alpha)


def _alternating_projections(C, m: Marginals, n_iters: int, method: Method, corrections: bool) -> Coupling:
    C = _check_inputs(C, m, n_iters)
    mu = m.mu.astype(C.dtype)
    nu = m.nu.astype(C.dtype)
    trace = DykstraTrace(method, mu, nu, corrections)
    X = C
    Pc = np.zeros_like(C)
    Qc = np.zeros_like(C)
    for _ in range(n_iters):
        Y = _row_proj(method, X + Pc, mu)
        Xn = _row_proj(method, (Y + Qc).T, nu).T
        if corrections:
            Pc = X + Pc - Y
            Qc = Y + Qc - Xn
        X = Xn
        if not np.isfinite(X).all():
            raise NumericalError("non-finite value inside the alternating projections")
        trace.row_outputs.append(Y)
        trace.col_outputs.append(X)
    X = np.ascontiguousarray(X)
    row_err, col_err = marginal_residual(X, m)
    return Coupling(X, m, row_err, col_err, trace)


def dykstra_project(C, m: Marginals, n_iters: int = 3) -> Coupling:
    """Sparse Sinkhorn: Dykstra's projections with row/column sparsemax.

    Each iteration projects rows onto simplices scaled by ``mu_i`` then
    columns onto simplices scaled by ``nu_j``; the returned plan is the
    iterate after the last column projection, so its column sums are exact
    and its row residual is reported in ``row_err``.
    """
    return _alternating_projections(C, m, n_iters, "sparsemax", corrections=True)


def dense_sinkhorn_project(C, m: Marginals, n_iters: int = 3, corrections: bool = True) -> Coupling:
    """Same loop as ``dykstra_project`` with scaled softmax as the projection."""
    return _alternating_projections(C, m, n_iters, "softmax", corrections=corrections)


def dykstra_vjp(trace: DykstraTrace, upstream) -> np.ndarray:
    """Gradient w.r.t. the weight matrix of ``<upstream, P>`` through the unrolled loop.

    Reverse of, per iteration k,
        Y_k     = rows(X_k + P_k)        P_{k+1} = X_k + P_k - Y_k
        X_{k+1} = cols(Y_k + Q_k)        Q_{k+1} = Y_k + Q_k - X_{k+1}
    """
    G = np.asarray(upstream)
    if trace.n_iters and G.shape != trace.col_outputs[-1].shape:
        raise ValueError(f"upstream shape {G.shape} does not match coupling {trace.col_outputs[-1].shape}")
    gX = G
    gP = np.zeros_like(G)
    gQ = np.zeros_like(G)
    for k in reversed(range(trace.n_iters)):
        Y, Xn = trace.row_outputs[k], trace.col_outputs[k]
        if trace.corrections:
            a = gX - gQ
            b = _row_vjp(trace.method, Xn.T, a.T, trace.nu).T
            gY = gQ + b - gP
            c = _row_vjp(trace.method, Y, gY, trace.mu)
            gQ = gQ + b
            gX, gP = gP + c, gP + c
        else:
            gY = _row_vjp(trace.method, Xn.T, gX.T, trace.nu).T
            gX = _row_vjp(trace.method, Y, gY, trace.mu)
    return gX


def _solver_forward(C, *, marginals, n_iters, method, corrections):
    cp = _alternating_projections(C, marginals, n_iters, method, corrections)
    return cp.P, cp.trace


coupling_op = register_custom_op(
    _solver_forward, lambda trace, g: (dykstra_vjp(trace, g),), name="coupling"
)


def project_tensor(C: Tensor, m: Marginals, n_iters: int = 3, method: Method = "sparsemax",
                   corrections: bool = True) -> Tensor:
    """Differentiable coupling: a Tensor P whose backward runs ``dykstra_vjp``."""
    return coupling_op(C, marginals=m, n_iters=n_iters, method=method, corrections=corrections)


def entropy(P) -> float:
    """H(P) = -sum P ln P with 0 ln 0 = 0 (natural log)."""
    P = np.asarray(P.P if isinstance(P, Coupling) else P)
    if np.any(P < 0):
        raise ValueError("entropy of a matrix with negative entries")
    pos = P[P > 0]
    return float(-(pos * np.log(pos)).sum())


def _entropy_forward(P):
    if np.any(P < 0):
        raise ValueError("entropy of a matrix with negative entries")
    return np.asarray(entropy(P), dtype=P.dtype), P


def _entropy_backward(P, g):
    above = P > ENTROPY_FLOOR
    safe = np.where(above, P, 1.0)
    return (g * np.where(above, -(np.log(safe) + 1.0), 0.0),)


entropy_op = register_custom_op(_entropy_forward, _entropy_backward, name="entropy")


def init_weights(v: int, u: int, kind: str = "constant", rng: np.random.Generator | None = None,
                 dtype=np.float64) -> np.ndarray:
    """Initial weight matrix: every entry 1/v (default), Gaussian, or zeros."""
    if kind == "constant":
        return np.full((v, u), 1.0 / v, dtype=dtype)
    if kind == "zeros":
        return np.zeros((v, u), dtype=dtype)
    if kind == "gaussian":
        rng = rng or np.random.default_rng(0)
        return (rng.standard_normal((v, u)) / v).astype(dtype)
    raise ValueError(f"unknown init kind {kind!r}")
