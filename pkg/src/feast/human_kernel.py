"""Human-kernel embeddings of annotated flavor dissimilarities.

Two routes into 2D:

* non-metric MDS fitted by SMACOF majorization, using only the rank order
  of the observed dissimilarities (missing pairs carry zero weight);
* t-STE, which sees only the triplet orderings derived from the matrix.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from feast.data_model import (
    DistanceMatrix,
    Embedding2D,
    FlavorTriplet,
    triplet_index_array,
    triplet_wines,
)
from feast.errors import InputError, NumericalError

log = logging.getLogger(__name__)

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None


# --------------------------------------------------------------------------
# Isotonic regression
# --------------------------------------------------------------------------


def _pava(y, w):
    n = y.shape[0]
    vals = np.empty(n)
    wts = np.empty(n)
    size = np.empty(n, dtype=np.int64)
    k = 0
    for i in range(n):
        vals[k] = y[i]
        wts[k] = w[i]
        size[k] = 1
        while k > 0 and vals[k - 1] > vals[k]:
            total = wts[k - 1] + wts[k]
            vals[k - 1] = (wts[k - 1] * vals[k - 1] + wts[k] * vals[k]) / total
            wts[k - 1] = total
            size[k - 1] += size[k]
            k -= 1
        k += 1
    out = np.empty(n)
    pos = 0
    for b in range(k):
        for _ in range(size[b]):
            out[pos] = vals[b]
            pos += 1
    return out


if numba is not None:
    _pava = numba.njit(cache=True)(_pava)


def pava_isotonic(values, weights=None) -> np.ndarray:
    """Least-squares nondecreasing fit by pool-adjacent-violators.

    >>> pava_isotonic([1, 3, 2]).tolist()
    [1.0, 2.5, 2.5]
    """
    y = np.ascontiguousarray(values, dtype=float)
    if y.ndim != 1:
        raise ValueError("values must be one-dimensional")
    if not np.all(np.isfinite(y)):
        raise ValueError("values must be finite")
    if weights is None:
        w = np.ones_like(y)
    else:
        w = np.ascontiguousarray(weights, dtype=float)
        if w.shape != y.shape or np.any(w <= 0):
            raise ValueError("weights must be positive and match values")
    if y.size == 0:
        return y.copy()
    return _pava(y, w)


# --------------------------------------------------------------------------
# Non-metric SMACOF
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class NmdsResult:
    embedding: Embedding2D
    stress: float
    iterations_used: int
    restart_index: int
    stress_history: tuple[float, ...] = ()
    restart_stresses: tuple[float, ...] = field(default=())


def _pair_distances(X, I, J):
    diff = X[I] - X[J]
    return np.sqrt((diff * diff).sum(axis=1))


def _smacof_single(delta, I, J, w, n, X, max_iter, eps, vplus, restart):
    """One SMACOF run from configuration ``X``; returns (X, stress, history)."""
    history = []
    prev = np.inf
    stress = np.inf
    wsum_uniform = vplus is None
    for it in range(max_iter):
        dist = _pair_distances(X, I, J)
        # primary tie treatment: tied dissimilarities are ordered by current distance
        order = np.lexsort((dist, delta))
        dhat = np.empty_like(dist)
        dhat[order] = _pava(np.ascontiguousarray(dist[order]), np.ascontiguousarray(w[order]))
        eta2 = float(np.dot(w, dist * dist))
        norm2 = float(np.dot(w, dhat * dhat))
        if eta2 <= 0 or norm2 <= 0:
            # collapsed configuration or all-zero disparities; nothing to fit
            stress = 0.0 if eta2 <= 0 and norm2 <= 0 else 1.0
            history.append(stress)
            break
        dhat *= np.sqrt(eta2 / norm2)
        stress = float(np.sqrt(np.dot(w, (dhat - dist) ** 2) / eta2))
        if not np.isfinite(stress):
            raise NumericalError(f"non-finite stress in SMACOF restart {restart}, iteration {it}")
        history.append(stress)
        if prev - stress < eps:
            break
        prev = stress

        # Guttman transform: X <- V^+ B(X) X
        ratio = np.zeros_like(dist)
        nz = dist > 0
        ratio[nz] = w[nz] * dhat[nz] / dist[nz]
        B = np.zeros((n, n))
        B[I, J] = -ratio
        B[J, I] = -ratio
        B[np.diag_indices(n)] = -B.sum(axis=1)
        BX = B @ X
        X = BX / n if wsum_uniform else vplus @ BX
        if not np.all(np.isfinite(X)):
            raise NumericalError(f"non-finite configuration in SMACOF restart {restart}, iteration {it}")
    return X, stress, history


def nmds_smacof(
    m: DistanceMatrix,
    n_init: int = 10,
    max_iter: int = 500,
    eps: float = 1e-4,
    seed: int = 0,
    weights: Optional[np.ndarray] = None,
) -> NmdsResult:
    """Non-metric MDS of ``m`` into 2D by SMACOF with random restarts.

    ``weights`` overrides the default weighting (1 for observed pairs, 0 for
    zero entries). Zero-weight pairs never enter the fit, so their values in
    ``m`` are irrelevant. The reported stress is
    ``sqrt(sum w (dhat - d)^2 / sum w d^2)`` with the disparities rescaled to
    the configuration's sum of squares; it is non-increasing per iteration.
    """
    n = len(m)
    if n < 3:
        raise InputError("NMDS needs at least 3 wines")
    if n_init < 1 or max_iter < 1:
        raise ValueError("n_init and max_iter must be positive")
    W = m.observed.astype(float) if weights is None else np.asarray(weights, dtype=float)
    if W.shape != (n, n) or not np.array_equal(W, W.T) or np.any(W < 0):
        raise ValueError("weights must be a symmetric nonnegative N x N matrix")
    I, J = np.triu_indices(n, k=1)
    keep = W[I, J] > 0
    I, J = I[keep], J[keep]
    w = W[I, J]
    delta = m.d[I, J]
    if len(delta) == 0:
        raise InputError("all dissimilarities are missing")
    if len(delta) < 3:
        raise InputError("NMDS needs at least 3 observed dissimilarities")

    uniform = len(delta) == n * (n - 1) // 2 and np.all(w == w[0])
    vplus = None
    if not uniform:
        V = np.zeros((n, n))
        V[I, J] = -w
        V[J, I] = -w
        V[np.diag_indices(n)] = -V.sum(axis=1)
        vplus = np.linalg.pinv(V)
    elif w[0] != 1.0:
        # uniform weights other than one simply rescale B; fold them into V^+
        vplus = np.eye(n) / (n * w[0]) - 1.0 / (n * n * w[0])

    rms_delta = float(np.sqrt(np.dot(w, delta**2) / w.sum()))
    seeds = np.random.SeedSequence(seed).spawn(n_init)
    best = None
    stresses = []
    for r, ss in enumerate(seeds):
        rng = np.random.default_rng(ss)
        X0 = rng.standard_normal((n, 2)) * max(rms_delta, 1e-12)
        X0 -= X0.mean(axis=0)
        X, stress, history = _smacof_single(delta, I, J, w, n, X0, max_iter, eps, vplus, r)
        stresses.append(stress)
        if best is None or stress < best[1]:
            best = (X, stress, history, r)

    X, stress, history, r = best
    X = X - X.mean(axis=0)
    dist = _pair_distances(X, I, J)
    rms = float(np.sqrt(np.dot(w, dist**2) / w.sum()))
    if rms > 0:
        X = X * (rms_delta / rms)
    emb = Embedding2D(m.ids, X, {"stress": stress, "iterations": len(history), "restart": r})
    return NmdsResult(emb, stress, len(history), r, tuple(history), tuple(stresses))


# --------------------------------------------------------------------------
# t-STE
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TsteParams:
    alpha: float = 1.0
    learning_rate: float = 2.0
    max_iters: int = 1000
    seed: int = 0
    tol: float = 1e-9

    def __post_init__(self):
        if self.alpha <= 0 or self.learning_rate <= 0:
            raise ValueError("alpha and learning_rate must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")


def tste_loglik(X: np.ndarray, trip: np.ndarray, alpha: float = 1.0):
    """Sum of log p_ijk over index triplets and its gradient w.r.t. ``X``."""
    i, j, k = trip[:, 0], trip[:, 1], trip[:, 2]
    dij = X[i] - X[j]
    dik = X[i] - X[k]
    base_ij = 1.0 + (dij * dij).sum(1) / alpha
    base_ik = 1.0 + (dik * dik).sum(1) / alpha
    expo = -(alpha + 1.0) / 2.0
    log_tij = expo * np.log(base_ij)
    log_tik = expo * np.log(base_ik)
    # log p = log t_ij - log(t_ij + t_ik), computed stably
    log_p = -np.logaddexp(0.0, log_tik - log_tij)
    p = np.exp(log_p)
    c = (alpha + 1.0) / alpha
    gij = -c * dij / base_ij[:, None]
    gik = -c * dik / base_ik[:, None]
    q = (1.0 - p)[:, None]
    n = len(X)
    idx = np.concatenate([i, j, k])
    contrib = np.concatenate([q * (gij - gik), -q * gij, q * gik])
    grad = np.stack([np.bincount(idx, weights=contrib[:, d], minlength=n) for d in range(X.shape[1])], axis=1)
    return float(log_p.sum()), grad


def tste_embed(triplets: Sequence[FlavorTriplet], dims: int = 2, p: Optional[TsteParams] = None) -> Embedding2D:
    """Fit a 2D configuration maximizing the t-STE triplet log-likelihood.

    Gradient ascent with a fixed step that is halved whenever a step would
    lower the objective (the step is then retried).
    """
    if dims != 2:
        raise ValueError("only 2D embeddings are supported")
    p = p or TsteParams()
    if len(triplets) == 0:
        raise InputError("t-STE needs at least one triplet")
    ids = sorted(triplet_wines(triplets))
    index = {w: r for r, w in enumerate(ids)}
    trip = triplet_index_array(triplets, index)
    n = len(ids)
    rng = np.random.default_rng(p.seed)
    X = rng.standard_normal((n, 2)) * 0.1
    scale = n / len(trip)
    step = p.learning_rate
    L, G = tste_loglik(X, trip, p.alpha)
    it = 0
    for it in range(p.max_iters):
        X_new = X + step * scale * G
        L_new, G_new = tste_loglik(X_new, trip, p.alpha)
        if not np.isfinite(L_new):
            raise NumericalError(f"non-finite t-STE objective at iteration {it}")
        if L_new < L:
            step *= 0.5
            if step < 1e-12:
                break
            continue
        improvement = L_new - L
        X, L, G = X_new, L_new, G_new
        if improvement < p.tol * max(1.0, abs(L)):
            break
    X = X - X.mean(axis=0)
    return Embedding2D(tuple(ids), X, {"loglik": L, "iterations": it + 1, "final_step": step})
