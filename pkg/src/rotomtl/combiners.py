"""Strategies that merge K per-task feature gradients into one update.

Every combiner takes a list of B x d matrices (one per task) and returns a
:class:`CombineResult`.  Batch-level quantities (norms, cosine similarity)
treat each B x d matrix as one flat vector, i.e. Frobenius geometry.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .linalg import ZERO_NORM, frob_norm

__all__ = [
    "CombineResult",
    "CombinerKind",
    "COMBINERS",
    "batch_cosine",
    "pairwise_cosines",
    "scale_only",
    "vanilla",
    "pcgrad",
    "graddrop",
    "gradnorm",
    "mgda_ub",
    "imtl_g",
    "prop1_threshold",
    "prop1_certificate",
]

log = logging.getLogger(__name__)

COMBINERS = ("vanilla", "scale_only", "pcgrad", "graddrop", "gradnorm", "mgda_ub", "imtl_g")


@dataclass
class CombineResult:
    combined: np.ndarray
    weights: np.ndarray
    scale: float | None = None
    alphas: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)


@dataclass(frozen=True)
class CombinerKind:
    """Combiner name plus its parameters, as read from an experiment config."""

    name: str = "scale_only"
    gradnorm_alpha: float = 0.0
    graddrop_leak: float = 0.0
    mgda_max_iter: int = 250
    mgda_tol: float = 1e-7

    def __post_init__(self):
        if self.name not in COMBINERS:
            raise ValueError(f"unknown combiner {self.name!r}; expected one of {COMBINERS}")
        if self.gradnorm_alpha < 0:
            raise ValueError("gradnorm alpha must be >= 0")
        if not 0.0 <= self.graddrop_leak <= 1.0:
            raise ValueError("graddrop leak must lie in [0, 1]")
        if self.mgda_max_iter < 1 or self.mgda_tol <= 0:
            raise ValueError("mgda needs max_iter >= 1 and tol > 0")


def _stack(grads: Sequence[np.ndarray]) -> tuple[np.ndarray, tuple[int, ...]]:
    if len(grads) == 0:
        raise ValueError("need at least one task gradient")
    mats = [np.asarray(g, dtype=np.float64) for g in grads]
    shape = mats[0].shape
    if any(g.shape != shape for g in mats):
        raise ValueError("task gradients must share one shape")
    return np.stack([g.reshape(-1) for g in mats]), shape


def batch_cosine(a, b) -> float:
    na, nb = frob_norm(a), frob_norm(b)
    if na < ZERO_NORM or nb < ZERO_NORM:
        return float("nan")
    c = float(np.sum(np.asarray(a) * np.asarray(b))) / (na * nb)
    return min(1.0, max(-1.0, c))


def pairwise_cosines(grads: Sequence[np.ndarray]) -> dict[tuple[int, int], float]:
    return {(i, j): batch_cosine(grads[i], grads[j]) for i, j in itertools.combinations(range(len(grads)), 2)}


def _norm_diagnostics(flat: np.ndarray) -> dict:
    return {"norms": np.sqrt(np.sum(flat * flat, axis=1))}


def scale_only(grads: Sequence[np.ndarray], initial_norms: Sequence[float]) -> CombineResult:
    """Magnitude homogenization: every task contributes ``C * U_k``.

    ``alpha_k`` is proportional to ``|G_k| / |G_k^0|`` so tasks that have
    converged the least set the common magnitude ``C = sum_k alpha_k |G_k|``.
    Tasks whose current gradient vanishes get no direction and no alpha mass.
    """
    flat, shape = _stack(grads)
    k = flat.shape[0]
    init = np.asarray(initial_norms, dtype=np.float64).reshape(-1)
    if init.shape != (k,):
        raise ValueError("one initial norm per task is required")
    norms = np.sqrt(np.sum(flat * flat, axis=1))
    live = norms >= ZERO_NORM
    if np.any(~live):
        log.info("zero-norm gradient for tasks %s; they are skipped", np.flatnonzero(~live).tolist())
    init_safe = np.where(init < ZERO_NORM, ZERO_NORM, init)
    rel = np.where(live, norms / init_safe, 0.0)
    total = rel.sum()
    if total <= 0.0:
        zero = np.zeros(shape)
        return CombineResult(zero, np.zeros(k), 0.0, np.zeros(k), {"norms": norms, "units": [zero] * k})
    alphas = rel / total
    scale = float(np.sum(alphas * norms))
    units = np.zeros_like(flat)
    units[live] = flat[live] / norms[live, None]
    weights = np.where(live, scale / np.where(live, norms, 1.0), 0.0)
    combined = scale * units.sum(axis=0)
    return CombineResult(
        combined.reshape(shape),
        weights,
        scale,
        alphas,
        {"norms": norms, "units": [u.reshape(shape) for u in units]},
    )


def vanilla(grads: Sequence[np.ndarray]) -> CombineResult:
    flat, shape = _stack(grads)
    total = np.zeros(flat.shape[1])
    for g in flat:
        total = total + g
    return CombineResult(total.reshape(shape), np.ones(flat.shape[0]), diagnostics=_norm_diagnostics(flat))


def pcgrad(grads: Sequence[np.ndarray], rng: np.random.Generator) -> CombineResult:
    """Gradient surgery applied at the feature level.

    Each task gradient is, in turn, projected off every other task gradient
    it conflicts with (negative dot product).  The order of the other tasks
    is shuffled per call with ``rng``.
    """
    flat, shape = _stack(grads)
    k = flat.shape[0]
    sq = np.sum(flat * flat, axis=1)
    surgered = flat.copy()
    n_proj = 0
    for i in range(k):
        g = flat[i].copy()
        for j in rng.permutation(k):
            if j == i or sq[j] < ZERO_NORM**2:
                continue
            dot = float(g @ flat[j])
            if dot < 0.0:
                g = g - (dot / sq[j]) * flat[j]
                n_proj += 1
        surgered[i] = g
    diag = _norm_diagnostics(flat)
    diag["surgered"] = [s.reshape(shape) for s in surgered]
    diag["projections"] = n_proj
    return CombineResult(surgered.sum(axis=0).reshape(shape), np.ones(k), diagnostics=diag)


def graddrop(grads: Sequence[np.ndarray], rng: np.random.Generator, leak: float = 0.0) -> CombineResult:
    """Sign-purity dropout on every flattened coordinate.

    With purity ``P = (1 + sum_k g_k / sum_k |g_k|) / 2`` and ``U ~ U(0, 1)``
    the positive contributions survive where ``P > U`` and the negative ones
    elsewhere.  ``leak`` lets that fraction of every gradient bypass the mask.
    """
    if not 0.0 <= leak <= 1.0:
        raise ValueError("leak must lie in [0, 1]")
    flat, shape = _stack(grads)
    abs_sum = np.abs(flat).sum(axis=0)
    signed = flat.sum(axis=0)
    safe = np.where(abs_sum > 0, abs_sum, 1.0)
    purity = np.where(abs_sum > 0, 0.5 * (1.0 + signed / safe), 0.5)
    draw = rng.uniform(size=purity.shape)
    keep_pos = purity > draw
    mask = np.where(keep_pos, flat > 0, flat < 0)
    kept = flat * mask
    out = (leak * flat + (1.0 - leak) * kept).sum(axis=0)
    diag = _norm_diagnostics(flat)
    diag["purity"] = purity.reshape(shape)
    return CombineResult(out.reshape(shape), np.ones(flat.shape[0]), diagnostics=diag)


def gradnorm_targets(norms, weights, losses, initial_losses, alpha: float) -> tuple[np.ndarray, np.ndarray]:
    """Scaled norms ``w_k |G_k|`` and their targets ``mean * r_k**alpha``."""
    scaled = weights * norms
    ratio = np.asarray(losses, dtype=np.float64) / np.asarray(initial_losses, dtype=np.float64)
    inv_rate = ratio / ratio.mean()
    return scaled, scaled.mean() * inv_rate**alpha


def gradnorm_weight_loss(weights, norms, losses, initial_losses, alpha: float, target=None) -> float:
    scaled, tgt = gradnorm_targets(norms, weights, losses, initial_losses, alpha)
    if target is not None:
        tgt = target
    return float(np.sum(np.abs(scaled - tgt)))


def gradnorm(
    grads: Sequence[np.ndarray],
    live_weights: np.ndarray,
    losses: Sequence[float],
    initial_losses: Sequence[float],
    alpha: float,
    lr_w: float,
) -> CombineResult:
    """One GradNorm step on the task weights, then the weighted sum.

    The target ``mean_k(w_k |G_k|) * r_k**alpha`` is held constant while
    differentiating, as in the original method.  ``live_weights`` is updated
    in place (renormalized to sum to K) and the updated weights are used
    for the combined gradient.
    """
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    flat, shape = _stack(grads)
    k = flat.shape[0]
    w = np.asarray(live_weights, dtype=np.float64)
    if w.shape != (k,) or np.any(w <= 0):
        raise ValueError("live weights must be K positive reals")
    norms = np.sqrt(np.sum(flat * flat, axis=1))
    init = np.where(np.abs(np.asarray(initial_losses, dtype=np.float64)) < ZERO_NORM, ZERO_NORM, initial_losses)
    scaled, target = gradnorm_targets(norms, w, losses, init, alpha)
    loss_before = float(np.sum(np.abs(scaled - target)))
    grad_w = np.sign(scaled - target) * norms
    new_w = w - lr_w * grad_w
    clamped = new_w < 1e-6
    if np.any(clamped):
        log.warning("gradnorm weights clamped at 1e-6 for tasks %s", np.flatnonzero(clamped).tolist())
        new_w = np.where(clamped, 1e-6, new_w)
    new_w = new_w * (k / new_w.sum())
    if isinstance(live_weights, np.ndarray):
        live_weights[:] = new_w
    combined = np.zeros(flat.shape[1])
    for wk, g in zip(new_w, flat):
        combined = combined + wk * g
    diag = {"norms": norms, "weight_loss": loss_before, "weight_grad": grad_w, "clamped": clamped}
    return CombineResult(combined.reshape(shape), new_w, diagnostics=diag)


def _min_norm_segment(gram: np.ndarray, i: int, j: int) -> tuple[float, float]:
    """Weight ``gamma`` on ``i`` minimizing ``|gamma g_i + (1-gamma) g_j|^2`` and its value."""
    a, b, c = gram[i, i], gram[i, j], gram[j, j]
    denom = a - 2.0 * b + c
    if denom <= 0.0:
        gamma = 0.5
    else:
        gamma = min(1.0, max(0.0, (c - b) / denom))
    val = gamma * gamma * a + 2.0 * gamma * (1.0 - gamma) * b + (1.0 - gamma) ** 2 * c
    return gamma, val


def _polish_on_support(gram: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Exact minimizer on the affine hull of the current support, if feasible."""
    supp = np.flatnonzero(w > 1e-12)
    if supp.size < 2:
        return w
    sub = gram[np.ix_(supp, supp)]
    n = supp.size
    kkt = np.zeros((n + 1, n + 1))
    kkt[:n, :n] = 2.0 * sub
    kkt[:n, n] = 1.0
    kkt[n, :n] = 1.0
    rhs = np.zeros(n + 1)
    rhs[n] = 1.0
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError:
        return w
    cand = np.zeros_like(w)
    cand[supp] = sol[:n]
    if np.any(cand < -1e-12) or not np.all(np.isfinite(cand)):
        return w
    cand = np.clip(cand, 0.0, None)
    cand /= cand.sum()
    return cand if cand @ gram @ cand <= w @ gram @ w else w


def mgda_ub(grads: Sequence[np.ndarray], max_iter: int = 250, tol: float = 1e-7) -> CombineResult:
    """Min-norm point of the convex hull of the task gradients (Frank-Wolfe).

    Starts from the best pairwise segment solution, runs Frank-Wolfe with
    exact line search over the simplex, and finishes with an exact solve on
    the active face.  Returns the simplex weights; the combined gradient is
    ``sum_k w_k G_k``.
    """
    flat, shape = _stack(grads)
    k = flat.shape[0]
    gram = flat @ flat.T
    if k == 1:
        w = np.ones(1)
        return CombineResult(flat[0].reshape(shape), w, diagnostics={"converged": True, "iterations": 0, "objective": float(gram[0, 0])})
    best = (np.inf, 0, 1, 0.5)
    for i, j in itertools.combinations(range(k), 2):
        gamma, val = _min_norm_segment(gram, i, j)
        if val < best[0]:
            best = (val, i, j, gamma)
    w = np.zeros(k)
    w[best[1]] = best[3]
    w[best[2]] = 1.0 - best[3]
    obj = float(w @ gram @ w)
    converged = k == 2
    it = 0
    if k > 2:
        for it in range(1, max_iter + 1):
            grad = gram @ w
            t = int(np.argmin(grad))
            # line search between current point v = sum w G and vertex G_t
            vv = obj
            vt = float(grad[t])
            tt = float(gram[t, t])
            denom = vv - 2.0 * vt + tt
            if denom <= 0.0:
                step = 0.0
            else:
                step = min(1.0, max(0.0, (vv - vt) / denom))
            new_w = (1.0 - step) * w
            new_w[t] += step
            new_obj = float(new_w @ gram @ new_w)
            decrease = obj - new_obj
            w, obj = new_w, min(obj, new_obj)
            if decrease < tol:
                converged = True
                break
        w = _polish_on_support(gram, w)
        obj = float(w @ gram @ w)
    if not converged:
        log.info("mgda_ub stopped at max_iter=%d without meeting tol", max_iter)
    combined = (w[:, None] * flat).sum(axis=0)
    diag = {"converged": converged, "iterations": it, "objective": obj, "norms": np.sqrt(np.diag(gram))}
    return CombineResult(combined.reshape(shape), w, diagnostics=diag)


def imtl_g(grads: Sequence[np.ndarray]) -> CombineResult:
    """Closed-form weights making the combined update project equally on every unit gradient.

    Solves ``<sum_t w_t G_t, u_j - u_1> = 0`` for ``j > 1`` together with
    ``sum_t w_t = K``.  A singular system (e.g. duplicated gradients) falls
    back to the plain sum with ``diagnostics["fallback"] = True``.
    """
    flat, shape = _stack(grads)
    k = flat.shape[0]
    norms = np.sqrt(np.sum(flat * flat, axis=1))
    if k == 1:
        return CombineResult(flat[0].reshape(shape), np.ones(1), diagnostics={"norms": norms, "fallback": False})
    if np.any(norms < ZERO_NORM):
        res = vanilla(grads)
        res.diagnostics["fallback"] = True
        return res
    units = flat / norms[:, None]
    diffs = units[1:] - units[0]
    system = np.zeros((k, k))
    system[: k - 1] = diffs @ flat.T
    system[k - 1] = 1.0
    rhs = np.zeros(k)
    rhs[k - 1] = float(k)
    if np.linalg.cond(system) > 1e12:
        res = vanilla(grads)
        res.diagnostics["fallback"] = True
        return res
    w = np.linalg.solve(system, rhs)
    combined = w @ flat
    proj = units @ combined
    diag = {"norms": norms, "fallback": False, "projections": proj}
    return CombineResult(combined.reshape(shape), w, diagnostics=diag)


def prop1_threshold(k: int) -> float:
    """Pairwise cosine bound above which the scaled update descends every task."""
    if k < 2:
        return -np.inf
    return -1.0 / (k - 1)


def prop1_certificate(grads: Sequence[np.ndarray]) -> dict:
    flat, _ = _stack(grads)
    norms = np.sqrt(np.sum(flat * flat, axis=1))
    live = np.flatnonzero(norms >= ZERO_NORM)
    if live.size < flat.shape[0]:
        log.info("prop1: zero gradients excluded from pairs: %s", np.flatnonzero(norms < ZERO_NORM).tolist())
    threshold = prop1_threshold(flat.shape[0])
    sq = np.sum(flat * flat, axis=1)
    cosines = [
        max(-1.0, min(1.0, float(flat[i] @ flat[j]) / float(np.sqrt(sq[i] * sq[j]))))
        for i, j in itertools.combinations(live, 2)
    ]
    min_cos = min(cosines) if cosines else 1.0
    return {"threshold_ok": bool(min_cos > threshold), "min_pairwise_cos": min_cos, "threshold": threshold}
