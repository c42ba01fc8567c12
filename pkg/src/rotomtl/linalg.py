"""Dense matrix helpers and the SO(d) exponential-map machinery.

Matrices are plain ``numpy`` float64 arrays.  The functions here add the
shape checks the rest of the package relies on, plus a self-contained
matrix exponential (scaling and squaring over a truncated Taylor series),
its Frechet derivative, and the chain rule from a loss on ``R = exp(A)``
back onto the free parameters of a skew-symmetric ``A``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "ZERO_NORM",
    "SkewParam",
    "matmul",
    "frob_norm",
    "skew_expand",
    "expm",
    "expm_frechet",
    "grad_through_exp",
]

# Norms below this are treated as exactly zero wherever we divide by one.
ZERO_NORM = 1e-12

_TAYLOR_DEGREE = 13
_SCALED_NORM = 0.5


def _as_matrix(a, name: str = "matrix") -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} has non-finite entries")
    return a


def _check_square(a: np.ndarray, name: str = "matrix") -> None:
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"{name} must be square, got shape {a.shape}")


@dataclass(frozen=True)
class SkewParam:
    """Free parameters of a ``dim x dim`` skew-symmetric matrix.

    ``upper`` lists one number per strictly-upper position ``(i, j)``,
    ``i < j``, in row-major order.  Expansion puts ``-upper`` at ``(i, j)``
    and ``+upper`` at ``(j, i)``, so in two dimensions a positive parameter
    generates a counter-clockwise rotation.  A ``dim``-dimensional rotation
    costs ``dim * (dim - 1) / 2`` numbers.
    """

    dim: int
    upper: np.ndarray

    def __post_init__(self):
        upper = np.asarray(self.upper, dtype=np.float64).reshape(-1)
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if upper.size != self.n_params(self.dim):
            raise ValueError(
                f"expected {self.n_params(self.dim)} parameters for dim={self.dim}, "
                f"got {upper.size}"
            )
        object.__setattr__(self, "upper", upper)

    @staticmethod
    def n_params(dim: int) -> int:
        return dim * (dim - 1) // 2

    @classmethod
    def zeros(cls, dim: int) -> "SkewParam":
        return cls(dim, np.zeros(cls.n_params(dim)))


def matmul(a, b) -> np.ndarray:
    a = _as_matrix(a, "a")
    b = _as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def frob_norm(m) -> float:
    m = np.asarray(m, dtype=np.float64)
    big = float(np.max(np.abs(m))) if m.size else 0.0
    if big == 0.0 or not np.isfinite(big):
        return big
    if 1e-150 < big < 1e150:
        return float(np.sqrt(np.sum(m * m)))
    # rescale so tiny or huge entries neither underflow nor overflow when squared
    s = m / big
    return big * float(np.sqrt(np.sum(s * s)))


def skew_expand(p: SkewParam) -> np.ndarray:
    a = np.zeros((p.dim, p.dim))
    iu = np.triu_indices(p.dim, k=1)
    a[iu] = -p.upper
    a[(iu[1], iu[0])] = p.upper
    return a


def expm(a) -> np.ndarray:
    """Matrix exponential by scaling and squaring.

    The input is scaled by ``2**-s`` until its Frobenius norm is at most
    0.5, the degree-13 Taylor polynomial is evaluated by Horner's rule and
    the result squared ``s`` times.  The truncation error of the scaled
    series is below ``0.5**14 / 14!``, i.e. under one ulp.
    """
    a = _as_matrix(a, "a")
    _check_square(a, "a")
    n = a.shape[0]
    norm = frob_norm(a)
    if not np.isfinite(norm):
        raise ValueError("expm input has non-finite entries")
    s = 0
    if norm > _SCALED_NORM:
        s = int(np.ceil(np.log2(norm / _SCALED_NORM)))
    scaled = a / (2.0 ** s)
    eye = np.eye(n)
    out = eye.copy()
    for k in range(_TAYLOR_DEGREE, 0, -1):
        out = eye + (scaled @ out) / k
    for _ in range(s):
        out = out @ out
    return out


def expm_frechet(a, e) -> np.ndarray:
    """Directional derivative ``D exp(a)[e]``.

    Uses the identity ``exp([[a, e], [0, a]]) = [[exp(a), L], [0, exp(a)]]``
    where ``L`` is the Frechet derivative, so the same exponential code path
    serves both.
    """
    a = _as_matrix(a, "a")
    e = _as_matrix(e, "e")
    _check_square(a, "a")
    if e.shape != a.shape:
        raise ValueError(f"direction shape {e.shape} does not match {a.shape}")
    n = a.shape[0]
    block = np.zeros((2 * n, 2 * n))
    block[:n, :n] = a
    block[n:, n:] = a
    block[:n, n:] = e
    return expm(block)[:n, n:]


def grad_through_exp(p: SkewParam, dL_dR) -> np.ndarray:
    """Gradient of a scalar loss w.r.t. ``p.upper`` given ``dL/dR``, ``R = exp(A)``.

    The adjoint of ``D exp(A)`` under the Frobenius inner product is
    ``D exp(A^T)``, which gives the gradient on the full matrix ``A``; each
    free parameter appears at ``(j, i)`` with sign +1 and at ``(i, j)``
    with sign -1.
    """
    dL_dR = _as_matrix(dL_dR, "dL_dR")
    if dL_dR.shape != (p.dim, p.dim):
        raise ValueError(f"dL_dR shape {dL_dR.shape} does not match dim {p.dim}")
    a = skew_expand(p)
    g_full = expm_frechet(a.T, dL_dR)
    iu = np.triu_indices(p.dim, k=1)
    return g_full[(iu[1], iu[0])] - g_full[iu]
