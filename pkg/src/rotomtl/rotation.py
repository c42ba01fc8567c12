"""Per-task rotations of the shared feature and their alignment loss.

Task ``k`` sees ``r_k = [R_k z[:m], z[m:]]`` with ``R_k = exp(A_k)`` and
``A_k`` skew-symmetric, so ``R_k`` is always a proper rotation and can be
optimized without constraints.  Rotations are fit to make the pulled-back
task gradients point along a shared target ``V`` (the mean of the unit
batch gradients) rather than to reduce the task loss itself.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .linalg import SkewParam, expm, grad_through_exp, skew_expand

__all__ = [
    "RotationSet",
    "TargetVector",
    "apply",
    "pull_back",
    "rotation_loss",
    "rotation_loss_grad",
    "rotation_matrix_grad",
    "make_target",
]


@dataclass
class RotationSet:
    n_tasks: int
    dim: int  # d, the shared feature size
    m: int  # size of the rotated leading block
    params: list[SkewParam] = field(default_factory=list)
    _cache: list[np.ndarray | None] = field(default_factory=list, init=False, repr=False)

    def __post_init__(self):
        if self.n_tasks < 1:
            raise ValueError("need at least one task")
        if not 2 <= self.m <= self.dim:
            raise ValueError(f"subspace size must satisfy 2 <= m <= d, got m={self.m}, d={self.dim}")
        if not self.params:
            self.params = [SkewParam.zeros(self.m) for _ in range(self.n_tasks)]
        if len(self.params) != self.n_tasks or any(p.dim != self.m for p in self.params):
            raise ValueError("one SkewParam of size m per task is required")
        self._cache = [None] * self.n_tasks

    @property
    def n_params(self) -> int:
        return SkewParam.n_params(self.m)

    def _check_task(self, k: int) -> None:
        if not 0 <= k < self.n_tasks:
            raise IndexError(f"task {k} out of range for {self.n_tasks} tasks")

    def matrix(self, k: int) -> np.ndarray:
        self._check_task(k)
        if self._cache[k] is None:
            self._cache[k] = expm(skew_expand(self.params[k]))
        return self._cache[k]

    def is_clean(self, k: int) -> bool:
        return self._cache[k] is not None

    def set_param(self, k: int, upper) -> None:
        self._check_task(k)
        self.params[k] = SkewParam(self.m, np.array(upper, dtype=np.float64))
        self._cache[k] = None

    def param_vector(self, k: int) -> np.ndarray:
        return self.params[k].upper


@dataclass
class TargetVector:
    """Row ``n`` is the mean over tasks of the unit-gradient rows ``u_{n,k}``."""

    rows: np.ndarray  # B x d


def _split(rs: RotationSet, a: np.ndarray, what: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] not in (rs.m, rs.dim):
        raise ValueError(f"{what} must be B x {rs.m} or B x {rs.dim}, got {a.shape}")
    return a


def apply(rs: RotationSet, z, k: int) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != rs.dim:
        raise ValueError(f"z must be B x {rs.dim}, got {z.shape}")
    r_mat = rs.matrix(k)
    out = z.copy()
    out[:, : rs.m] = z[:, : rs.m] @ r_mat.T
    return out


def pull_back(rs: RotationSet, k: int, g_rot) -> np.ndarray:
    """Map gradients w.r.t. ``r_k`` back to gradients w.r.t. ``z`` (``R_k^T g``).

    Accepts either the rotated block alone (B x m) or the full feature
    gradient (B x d), in which case the trailing coordinates pass through.
    """
    g_rot = _split(rs, g_rot, "gradient")
    r_mat = rs.matrix(k)
    out = g_rot.copy()
    out[:, : rs.m] = g_rot[:, : rs.m] @ r_mat
    return out


def rotation_loss(rs: RotationSet, k: int, g_rot, v: TargetVector) -> float:
    """Alignment loss ``-sum_n <R_k^T g~_n, v_n>`` on the rotated block."""
    g_rot = _split(rs, g_rot, "gradient")[:, : rs.m]
    target = _split(rs, v.rows, "target")[:, : rs.m]
    if target.shape[0] != g_rot.shape[0]:
        raise ValueError("gradient and target batch sizes differ")
    pulled = g_rot @ rs.matrix(k)
    return -float(np.sum(pulled * target))


def rotation_matrix_grad(rs: RotationSet, g_rot, v: TargetVector) -> np.ndarray:
    """``d L_rot / d R_k = -sum_n g~_n v_n^T`` with ``g~`` held constant."""
    g_rot = _split(rs, g_rot, "gradient")[:, : rs.m]
    target = _split(rs, v.rows, "target")[:, : rs.m]
    if target.shape[0] != g_rot.shape[0]:
        raise ValueError("gradient and target batch sizes differ")
    return -(g_rot.T @ target)


def rotation_loss_grad(rs: RotationSet, k: int, g_rot, v: TargetVector) -> np.ndarray:
    """Gradient of :func:`rotation_loss` w.r.t. the free parameters of ``A_k``."""
    rs._check_task(k)
    return grad_through_exp(rs.params[k], rotation_matrix_grad(rs, g_rot, v))


def make_target(unit_grads: Sequence[np.ndarray]) -> TargetVector:
    if not unit_grads:
        raise ValueError("need at least one task")
    mats = [np.asarray(u, dtype=np.float64) for u in unit_grads]
    shape = mats[0].shape
    if any(u.shape != shape for u in mats):
        raise ValueError("unit gradients must share one shape")
    total = np.zeros(shape)
    for u in mats:
        total = total + u
    return TargetVector(total / len(mats))
