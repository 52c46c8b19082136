"""Reducers from encoder embeddings to 2D: PCA and exact t-SNE."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from feast.data_model import DistanceMatrix, Embedding2D, EmbeddingTable
from feast.errors import InputError, NumericalError

JITTER = 1e-12


def standardize(t: EmbeddingTable) -> EmbeddingTable:
    """Center every column; scale columns with nonzero variance to unit variance."""
    if len(t) < 2:
        raise InputError("standardize needs at least 2 rows")
    X = t.vectors - t.vectors.mean(axis=0)
    sd = X.std(axis=0)
    nz = sd > 0
    X[:, nz] /= sd[nz]
    return EmbeddingTable(t.ids, X)


def pca_reduce(t: EmbeddingTable, dims: int = 2) -> Embedding2D:
    """Project onto the two leading principal axes.

    Each axis is signed so that its largest-magnitude loading is positive.
    """
    if dims != 2:
        raise ValueError("only 2D projections are supported")
    if len(t) < 3 or t.dim < 2:
        raise InputError("PCA needs N >= 3 rows and D >= 2 columns")
    X = t.vectors - t.vectors.mean(axis=0)
    _, s, Vt = np.linalg.svd(X, full_matrices=False)
    comps = Vt[:2]
    for c in comps:
        if c[np.argmax(np.abs(c))] < 0:
            c *= -1
    Y = X @ comps.T
    var = s[:2] ** 2 / (len(t) - 1)
    return Embedding2D(t.ids, Y, {"explained_variance": var.tolist()})


# --------------------------------------------------------------------------
# Input affinities
# --------------------------------------------------------------------------


def squared_distances(X: np.ndarray) -> np.ndarray:
    sq = (X * X).sum(axis=1)
    D = sq[:, None] + sq[None, :] - 2.0 * X @ X.T
    np.maximum(D, 0.0, out=D)
    np.fill_diagonal(D, 0.0)
    return D


def _row_entropy(d_row: np.ndarray, beta: float):
    """Conditional distribution for one point and its entropy in bits."""
    shifted = d_row - d_row.min()
    e = np.exp(-beta * shifted)
    p = e / e.sum()
    nz = p > 0
    return p, float(-(p[nz] * np.log2(p[nz])).sum())


def conditional_affinities(D2: np.ndarray, perplexity: float, tol: float = 1e-4, max_steps: int = 50):
    """Row-conditional Gaussian affinities with per-row calibrated bandwidth.

    Bisection on log(beta) for each row until the entropy is within ``tol``
    bits of log2(perplexity). Returns (P_cond, betas).
    """
    n = D2.shape[0]
    target = np.log2(perplexity)
    P = np.zeros((n, n))
    betas = np.empty(n)
    for i in range(n):
        d = np.delete(D2[i], i)
        scale = d[d > 0].mean() if np.any(d > 0) else 1.0
        lo, hi = np.log(1e-20 / scale), np.log(1e20 / scale)
        u = np.log(1.0 / scale)
        p, h = _row_entropy(d, np.exp(u))
        for _ in range(max_steps):
            if abs(h - target) <= tol:
                break
            if h > target:
                lo = u  # too flat: sharpen
            else:
                hi = u
            u = 0.5 * (lo + hi)
            p, h = _row_entropy(d, np.exp(u))
        betas[i] = np.exp(u)
        P[i, np.arange(n) != i] = p
    return P, betas


def perplexity_affinities(
    t: Union[EmbeddingTable, DistanceMatrix, np.ndarray],
    perplexity: float,
    *,
    fill_missing: str = "max",
) -> np.ndarray:
    """Symmetric joint affinities ``p_ij = (p_j|i + p_i|j) / 2N``.

    ``t`` may be an embedding table, a distance matrix (treated as
    precomputed distances; missing zero entries are filled with the matrix
    maximum) or a raw point array. Exactly-zero distances between distinct
    points are replaced by a tiny jitter so affinities stay finite.
    """
    P, _ = _affinities_with_meta(t, perplexity, fill_missing=fill_missing)
    return P


def _affinities_with_meta(t, perplexity, fill_missing="max"):
    if isinstance(t, DistanceMatrix):
        D = t.d.copy()
        off = ~np.eye(len(t), dtype=bool)
        missing = off & (D == 0)
        if missing.any():
            if fill_missing != "max":
                raise ValueError(f"unknown fill rule {fill_missing!r}")
            D[missing] = D.max() if D.max() > 0 else 1.0
        D2 = D * D
    else:
        X = t.vectors if isinstance(t, EmbeddingTable) else np.asarray(t, dtype=float)
        D2 = squared_distances(X)
    n = D2.shape[0]
    if not 1 < perplexity < n:
        raise ValueError(f"perplexity must lie in (1, N={n}), got {perplexity}")
    off = ~np.eye(n, dtype=bool)
    jitter = bool(np.any(D2[off] == 0))
    if jitter:
        D2 = D2.copy()
        D2[off & (D2 == 0)] = JITTER**2
    Pc, betas = conditional_affinities(D2, perplexity)
    P = (Pc + Pc.T) / (2.0 * n)
    P /= P.sum()
    return P, {"jitter_applied": jitter, "betas": betas}


# --------------------------------------------------------------------------
# t-SNE
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TsneParams:
    perplexity: float = 30.0
    learning_rate: float = 200.0
    max_iters: int = 1000
    exaggeration: float = 12.0
    exaggeration_iters: int = 250
    momentum_early: float = 0.5
    momentum_late: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.perplexity <= 1:
            raise ValueError("perplexity must exceed 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.exaggeration < 1:
            raise ValueError("exaggeration must be >= 1")
        if not 0 <= self.exaggeration_iters < self.max_iters:
            raise ValueError("exaggeration_iters must lie in [0, max_iters)")


def student_t_affinities(Y: np.ndarray):
    """Heavy-tailed kernel matrix ``(1 + |y_i - y_j|^2)^-1`` (zero diagonal) and Q."""
    num = 1.0 / (1.0 + squared_distances(Y))
    np.fill_diagonal(num, 0.0)
    return num, num / num.sum()


def tsne_kl(Y: np.ndarray, P: np.ndarray, exaggeration: float = 1.0):
    """KL(P || Q) and its gradient at configuration ``Y``.

    With ``exaggeration`` != 1 the gradient uses ``exaggeration * P`` while the
    returned objective is still the plain KL divergence.
    """
    num, Q = student_t_affinities(Y)
    nz = P > 0
    kl = float(np.sum(P[nz] * np.log(P[nz] / np.maximum(Q[nz], np.finfo(float).tiny))))
    W = (exaggeration * P - Q) * num
    grad = 4.0 * (W.sum(axis=1)[:, None] * Y - W @ Y)
    return kl, grad


def tsne_optimize(P: np.ndarray, p: TsneParams, Y0: Optional[np.ndarray] = None, extra_grad=None):
    """Momentum gradient descent with per-coordinate adaptive gains.

    ``extra_grad(Y) -> (value, grad)`` adds a term to the objective; used by
    the SNaCK combiner. Returns (Y, trace) where trace holds the objective
    after every iteration.
    """
    n = P.shape[0]
    rng = np.random.default_rng(p.seed)
    Y = rng.standard_normal((n, 2)) * 1e-4 if Y0 is None else np.array(Y0, dtype=float)
    update = np.zeros_like(Y)
    gains = np.ones_like(Y)
    trace = []
    for it in range(p.max_iters):
        early = it < p.exaggeration_iters
        exag = p.exaggeration if early else 1.0
        momentum = p.momentum_early if early else p.momentum_late
        value, grad = tsne_kl(Y, P, exag)
        if extra_grad is not None:
            value, grad = extra_grad(Y, value, grad)
        if not np.all(np.isfinite(grad)):
            raise NumericalError(f"non-finite t-SNE gradient at iteration {it}")
        trace.append(value)
        same = np.sign(grad) == np.sign(update)
        gains = np.where(same, gains * 0.8, gains + 0.2)
        np.maximum(gains, 0.01, out=gains)
        update = momentum * update - p.learning_rate * gains * grad
        Y = Y + update
        Y -= Y.mean(axis=0)
    value, _ = tsne_kl(Y, P)
    if extra_grad is not None:
        value, _ = extra_grad(Y, value, np.zeros_like(Y))
    trace.append(value)
    return Y, trace


def tsne_reduce(t: Union[EmbeddingTable, DistanceMatrix], p: Optional[TsneParams] = None) -> Embedding2D:
    """Exact t-SNE of an embedding table (or precomputed distance matrix) to 2D.

    Metadata carries the final KL divergence, the per-iteration KL trace,
    the iteration count and whether duplicate-point jitter was applied.
    """
    p = p or TsneParams()
    n = len(t)
    if n < 5:
        raise InputError("t-SNE needs at least 5 points")
    if not p.perplexity < n:
        raise ValueError(f"perplexity {p.perplexity} must be below N={n}")
    P, meta = _affinities_with_meta(t, p.perplexity)
    Y, trace = tsne_optimize(P, p)
    return Embedding2D(
        t.ids,
        Y,
        {
            "kl": trace[-1],
            "kl_trace": trace,
            "iterations": p.max_iters,
            "jitter_applied": meta["jitter_applied"],
        },
    )
