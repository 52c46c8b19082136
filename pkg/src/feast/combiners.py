"""Align a machine-kernel and a human-kernel 2D space into one embedding."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from feast.data_model import (
    Embedding2D,
    EmbeddingTable,
    FlavorTriplet,
    shared_ids,
    triplet_index_array,
)
from feast.errors import InputError, NumericalError
from feast.human_kernel import TsteParams, tste_loglik
from feast.machine_kernel import TsneParams, _affinities_with_meta, tsne_kl, tsne_optimize

EIG_FLOOR = 1e-12


# --------------------------------------------------------------------------
# CCA
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AffineMap:
    """``y = (x - center) @ matrix``."""

    center: np.ndarray
    matrix: np.ndarray

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.center) @ self.matrix


@dataclass(frozen=True, eq=False)
class CcaResult:
    combined: Embedding2D
    correlations: tuple[float, float]
    machine_transform: AffineMap
    human_transform: AffineMap
    overlap: tuple[int, ...] = ()
    rank_deficient: bool = False


def _whitener(X: np.ndarray):
    cov = X.T @ X / (len(X) - 1)
    vals, vecs = np.linalg.eigh(cov)
    floored = bool(np.any(vals < EIG_FLOOR))
    vals = np.maximum(vals, EIG_FLOOR)
    return vecs @ np.diag(vals**-0.5) @ vecs.T, floored


def cca_align(machine: Embedding2D, human: Embedding2D, mode: str = "average") -> CcaResult:
    """Canonical correlation alignment over the ids both embeddings share.

    Both sides are centered and whitened; the SVD of the whitened
    cross-covariance gives the canonical directions. For shared ids the
    combined point is the mean of the two unit-variance canonical variates;
    machine-only ids get the machine-side projection alone. ``mode="concat"``
    instead returns the machine variates (a 2D output is required downstream;
    the human variates are kept in ``meta``).
    """
    if mode not in ("average", "concat"):
        raise ValueError(f"unknown CCA mode {mode!r}")
    common = shared_ids(machine, human)
    if len(common) < 3:
        raise InputError(f"CCA needs at least 3 shared ids, got {len(common)}")
    Xm = machine.subset(common).points
    Xh = human.subset(common).points
    mu_m, mu_h = Xm.mean(axis=0), Xh.mean(axis=0)
    Am, fm = _whitener(Xm - mu_m)
    Ah, fh = _whitener(Xh - mu_h)
    Zm = (Xm - mu_m) @ Am
    Zh = (Xh - mu_h) @ Ah
    cross = Zm.T @ Zh / (len(common) - 1)
    U, s, Vt = np.linalg.svd(cross)
    corr = np.clip(s, 0.0, 1.0)
    machine_map = AffineMap(mu_m, Am @ U)
    human_map = AffineMap(mu_h, Ah @ Vt.T)
    if not (np.all(np.isfinite(machine_map.matrix)) and np.all(np.isfinite(human_map.matrix))):
        raise NumericalError("non-finite CCA transform")

    u_all = machine_map(machine.points)
    v_common = human_map(Xh)
    row = machine.index
    combined = u_all.copy()
    overlap_flag = np.zeros(len(machine), dtype=bool)
    for r, wine in enumerate(common):
        overlap_flag[row[wine]] = True
        if mode == "average":
            combined[row[wine]] = (u_all[row[wine]] + v_common[r]) / 2.0
    meta = {
        "correlations": corr.tolist(),
        "overlap_ids": list(common),
        "overlap_supported": overlap_flag.tolist(),
        "rank_deficient": fm or fh,
        "mode": mode,
    }
    if mode == "concat":
        meta["human_variates"] = v_common.tolist()
    emb = Embedding2D(machine.ids, combined, meta)
    return CcaResult(emb, (float(corr[0]), float(corr[1])), machine_map, human_map, tuple(common), fm or fh)


# --------------------------------------------------------------------------
# Procrustes and ICP
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RigidTransform2D:
    """``y = scale * x @ rotation.T + translation``."""

    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float)
        if R.shape != (2, 2) or not np.allclose(R @ R.T, np.eye(2), atol=1e-9):
            raise ValueError("rotation must be a 2x2 orthogonal matrix")
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float))

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(x, dtype=float) @ self.rotation.T + self.translation

    def compose(self, inner: "RigidTransform2D") -> "RigidTransform2D":
        """The transform ``self(inner(x))``."""
        return RigidTransform2D(
            self.rotation @ inner.rotation,
            self.scale * inner.translation @ self.rotation.T + self.translation,
            self.scale * inner.scale,
        )

    @classmethod
    def identity(cls) -> "RigidTransform2D":
        return cls(np.eye(2), np.zeros(2), 1.0)


def procrustes_align(reference: Embedding2D, moving: Embedding2D):
    """Similarity-transform alignment of ``moving`` onto ``reference``.

    Both shared-id point sets are centered and scaled to unit Frobenius norm;
    the orthogonal map (reflections allowed) minimizing the squared residual
    comes from an SVD. Returns (aligned, disparity) where ``aligned`` holds
    every moving id in the standardized reference frame.
    """
    common = shared_ids(reference, moving)
    if len(common) < 2:
        raise InputError("Procrustes needs at least 2 shared ids")
    A = reference.subset(common).points
    B = moving.subset(common).points
    mu_a, mu_b = A.mean(axis=0), B.mean(axis=0)
    A0, B0 = A - mu_a, B - mu_b
    na, nb = np.linalg.norm(A0), np.linalg.norm(B0)
    if na == 0 or nb == 0:
        raise InputError("Procrustes needs nonzero spread on both sides")
    A0, B0 = A0 / na, B0 / nb
    U, _, Vt = np.linalg.svd(B0.T @ A0)
    R = U @ Vt
    disparity = float(np.sum((A0 - B0 @ R) ** 2))
    aligned = ((moving.points - mu_b) / nb) @ R
    meta = {"disparity": disparity, "overlap_ids": list(common), "reflection": bool(np.linalg.det(R) < 0)}
    return Embedding2D(moving.ids, aligned, meta), disparity


def kabsch(src: np.ndarray, dst: np.ndarray) -> RigidTransform2D:
    """Proper rotation + translation minimizing ``|R src + t - dst|^2``."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    H = (src - mu_s).T @ (dst - mu_d)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ np.diag([1.0, d]) @ U.T
    return RigidTransform2D(R, mu_d - mu_s @ R.T, 1.0)


def _nearest(src: np.ndarray, ref: np.ndarray):
    """Index of and squared distance to the nearest reference row (lowest index on ties)."""
    d2 = ((src[:, None, :] - ref[None, :, :]) ** 2).sum(-1)
    idx = np.argmin(d2, axis=1)
    return idx, d2[np.arange(len(src)), idx]


@dataclass(frozen=True, eq=False)
class IcpResult:
    transform: RigidTransform2D
    aligned: Embedding2D
    mse_history: tuple[float, ...]
    iterations: int


def icp_align(
    reference: Embedding2D, moving: Embedding2D, max_iter: int = 100, tol: float = 1e-10
) -> IcpResult:
    """Rigid iterative closest point registration of ``moving`` onto ``reference``.

    Correspondences are true nearest neighbors, not id matches. Rows are
    visited in ascending id order so ties resolve to the lowest id.
    """
    if len(reference) == 0 or len(moving) == 0:
        raise InputError("ICP needs nonempty point sets")
    ref_order = np.argsort(reference.ids, kind="stable")
    mov_order = np.argsort(moving.ids, kind="stable")
    ref = reference.points[ref_order]
    src0 = moving.points[mov_order]
    total = RigidTransform2D.identity()
    src = src0.copy()
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        idx, d2 = _nearest(src, ref)
        mse = float(d2.mean())
        if history and history[-1] - mse < tol:
            history.append(mse)
            break
        history.append(mse)
        if mse == 0.0:
            break
        step = kabsch(src, ref[idx])
        total = step.compose(total)
        src = total.apply(src0)
    aligned = total.apply(moving.points)
    meta = {"mse_history": history, "iterations": it}
    return IcpResult(total, Embedding2D(moving.ids, aligned, meta), tuple(history), it)


# --------------------------------------------------------------------------
# SNaCK
# --------------------------------------------------------------------------


def snack_objective(Y, P, trip, lam, alpha=1.0, exaggeration=1.0):
    """``lam * KL(P||Q) - (1 - lam) * mean log p_ijk`` and its gradient."""
    kl, g_kl = tsne_kl(Y, P, exaggeration)
    ll, g_ll = tste_loglik(Y, trip, alpha)
    T = len(trip)
    return lam * kl - (1.0 - lam) * ll / T, lam * g_kl - (1.0 - lam) * g_ll / T


def snack_embed(
    machine: EmbeddingTable,
    triplets: Sequence[FlavorTriplet],
    lam: float = 0.5,
    tsne_params: Optional[TsneParams] = None,
    tste_params: Optional[TsteParams] = None,
) -> Embedding2D:
    """Joint t-SNE / t-STE embedding of the machine table constrained by triplets.

    Early exaggeration multiplies only the P term, as in plain t-SNE.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    if len(machine) == 0:
        raise InputError("machine table is empty")
    if len(triplets) == 0 and lam < 1.0:
        raise InputError("SNaCK needs triplets unless lambda = 1")
    tp = tsne_params or TsneParams(perplexity=min(30.0, (len(machine) - 1) / 3.0))
    sp = tste_params or TsteParams()
    trip = triplet_index_array(triplets, machine.index)
    P, aff_meta = _affinities_with_meta(machine, tp.perplexity)
    T = max(len(trip), 1)

    def extra(Y, kl_value, kl_grad):
        value = lam * kl_value
        grad = lam * kl_grad
        if lam < 1.0:
            ll, g_ll = tste_loglik(Y, trip, sp.alpha)
            value -= (1.0 - lam) * ll / T
            grad = grad - (1.0 - lam) * g_ll / T
        return value, grad

    Y, trace = tsne_optimize(P, tp, extra_grad=extra)
    meta = {"objective": trace[-1], "lambda": lam, "iterations": tp.max_iters,
            "jitter_applied": aff_meta["jitter_applied"]}
    return Embedding2D(machine.ids, Y, meta)
