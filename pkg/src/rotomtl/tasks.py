"""Synthetic multitask problems.

* ``avocado`` and ``nonconvex``: two-dimensional test functions whose
  single global optimum moves with a shift ``s``; pairing ``s = 0`` with
  ``s = 1`` gives two identical tasks up to a translation.
* ``opposite_logistic_data``: two-cluster Gaussian mixture where task 2's
  label is the complement of task 1's, with a small flip rate.
* ``gaussian_multitask``: a K-task generalization over shared clusters.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .netcore import AnalyticLoss

__all__ = [
    "TASK_KINDS",
    "TaskSpec",
    "Batch",
    "avocado",
    "avocado_grad",
    "nonconvex",
    "nonconvex_grad",
    "sinc3",
    "sinc3_grad",
    "function_loss",
    "opposite_logistic_data",
    "gaussian_multitask",
    "iter_batches",
    "split",
]

TASK_KINDS = ("avocado", "nonconvex", "opposite_logistic", "gaussian_multitask")

# below this |u| the sin(3u)/u term switches to its Taylor expansion
_SERIES_CUTOFF = 1e-4


@dataclass
class TaskSpec:
    kind: str = "avocado"
    n_tasks: int = 2
    shifts: tuple[float, ...] = (0.0, 1.0)
    n_samples: int = 1000
    input_dim: int = 2
    flip: float = 0.05
    separation: float = 2.0  # cluster means sit at +-separation on the diagonal
    noise: float = 1.0  # within-cluster std
    target: str = "classification"  # gaussian_multitask only
    target_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.n_tasks < 1:
            raise ValueError("n_tasks must be >= 1")
        if not 0.0 <= self.flip <= 1.0:
            raise ValueError("flip probability must lie in [0, 1]")
        if self.target not in ("classification", "regression"):
            raise ValueError("target must be 'classification' or 'regression'")
        self.shifts = tuple(float(s) for s in self.shifts)
        if self.kind in ("avocado", "nonconvex") and len(self.shifts) != self.n_tasks:
            raise ValueError("one shift per task is required")


@dataclass
class Batch:
    x: np.ndarray  # B x D
    labels: list  # one array per task
    clusters: np.ndarray | None = field(default=None, repr=False)

    @property
    def size(self) -> int:
        return self.x.shape[0]

    def take(self, idx) -> "Batch":
        clusters = None if self.clusters is None else self.clusters[idx]
        labels = [None if y is None else y[idx] for y in self.labels]
        return Batch(self.x[idx], labels, clusters)


def _xy(p):
    p = np.asarray(p, dtype=np.float64)
    return p[..., 0], p[..., 1]


def avocado(p, s: float):
    """``(x - s)**2 + 25 y**2``; ``p`` is (..., 2)."""
    x, y = _xy(p)
    return (x - s) ** 2 + 25.0 * y**2


def avocado_grad(p, s: float) -> np.ndarray:
    x, y = _xy(p)
    return np.stack([2.0 * (x - s), 50.0 * y], axis=-1)


def sinc3(u):
    """``sin(3u) / u`` with its removable singularity filled in."""
    u = np.asarray(u, dtype=np.float64)
    small = np.abs(u) < _SERIES_CUTOFF
    safe = np.where(small, 1.0, u)
    out = np.sin(3.0 * safe) / safe
    if np.any(small):
        u2 = u * u
        # sum_{j<5} (-1)^j 3^(2j+1) u^(2j) / (2j+1)!
        series = np.zeros_like(u)
        for j in range(4, -1, -1):
            series = series * u2 + (-1) ** j * 3.0 ** (2 * j + 1) / math.factorial(2 * j + 1)
        out = np.where(small, series, out)
    return out


def sinc3_grad(u):
    u = np.asarray(u, dtype=np.float64)
    small = np.abs(u) < _SERIES_CUTOFF
    safe = np.where(small, 1.0, u)
    out = (3.0 * safe * np.cos(3.0 * safe) - np.sin(3.0 * safe)) / (safe * safe)
    if np.any(small):
        # derivative of the five-term series
        series = np.zeros_like(u)
        u2 = u * u
        for j in range(4, 0, -1):
            series = series * u2 + (-1) ** j * 3.0 ** (2 * j + 1) * (2 * j) / math.factorial(2 * j + 1)
        out = np.where(small, series * u, out)
    return out


def nonconvex(p, s: float):
    x, y = _xy(p)
    u, v = x + 1.5 * s, y + 1.5 * s
    return -sinc3(u) - sinc3(v) + np.abs(u) + np.abs(v)


def nonconvex_grad(p, s: float) -> np.ndarray:
    """Analytic gradient; the subgradient at ``|.|`` kinks is taken as 0."""
    x, y = _xy(p)
    u, v = x + 1.5 * s, y + 1.5 * s
    return np.stack([-sinc3_grad(u) + np.sign(u), -sinc3_grad(v) + np.sign(v)], axis=-1)


def function_loss(kind: str, shift: float) -> AnalyticLoss:
    """Wrap a test function as a per-sample loss for an identity head."""
    if kind == "avocado":
        f, g = avocado, avocado_grad
    elif kind == "nonconvex":
        f, g = nonconvex, nonconvex_grad
    else:
        raise ValueError(f"{kind!r} is not a test function")
    return AnalyticLoss(value=lambda out, _y: f(out, shift), grad=lambda out, _y: g(out, shift))


def _cluster_means(spec: TaskSpec, n_clusters: int) -> np.ndarray:
    if n_clusters == 2:
        base = np.full(spec.input_dim, spec.separation)
        return np.stack([-base, base])
    # spread K means on a circle in the first two input coordinates
    means = np.zeros((n_clusters, spec.input_dim))
    ang = 2.0 * np.pi * np.arange(n_clusters) / n_clusters
    means[:, 0] = spec.separation * math.sqrt(2.0) * np.cos(ang)
    if spec.input_dim > 1:
        means[:, 1] = spec.separation * math.sqrt(2.0) * np.sin(ang)
    return means


def _sample_mixture(spec: TaskSpec, n_clusters: int, rng: np.random.Generator):
    means = _cluster_means(spec, n_clusters)
    clusters = rng.integers(0, n_clusters, size=spec.n_samples)
    x = means[clusters] + spec.noise * rng.standard_normal((spec.n_samples, spec.input_dim))
    return x, clusters


def opposite_logistic_data(spec: TaskSpec) -> Batch:
    """Two-cluster mixture; ``y1`` marks cluster 1, ``y2 = 1 - y1`` then flipped at ``spec.flip``."""
    rng = np.random.default_rng(spec.seed)
    x, clusters = _sample_mixture(spec, 2, rng)
    y1 = (clusters == 0).astype(np.int64)
    y2 = 1 - y1
    flips = rng.uniform(size=spec.n_samples) < spec.flip
    y2 = np.where(flips, 1 - y2, y2)
    return Batch(x, [y1, y2], clusters)


def gaussian_multitask(spec: TaskSpec) -> Batch:
    """K targets over shared latent clusters.

    Classification: one cluster per task and ``y_k = 1[cluster == k]``, with
    the labels of tasks ``k >= 1`` flipped at ``spec.flip``.  Regression: ``y_k = <w_k, x> + target_noise * eps`` with
    fixed random ``w_k``.
    """
    if spec.n_tasks < 2:
        raise ValueError("gaussian_multitask needs at least two tasks")
    rng = np.random.default_rng(spec.seed)
    n_clusters = spec.n_tasks
    x, clusters = _sample_mixture(spec, n_clusters, rng)
    labels = []
    if spec.target == "classification":
        for k in range(spec.n_tasks):
            y = (clusters == k).astype(np.int64)
            if k >= 1:
                flips = rng.uniform(size=spec.n_samples) < spec.flip
                y = np.where(flips, 1 - y, y)
            labels.append(y)
    else:
        w = rng.standard_normal((spec.n_tasks, spec.input_dim))
        for k in range(spec.n_tasks):
            y = x @ w[k]
            if spec.target_noise > 0:
                y = y + spec.target_noise * rng.standard_normal(spec.n_samples)
            labels.append(y.reshape(-1, 1))
    return Batch(x, labels, clusters)


def single_input(spec: TaskSpec) -> Batch:
    """One input drawn from a standard normal, used by the test-function problems."""
    rng = np.random.default_rng(spec.seed)
    x = rng.standard_normal((1, spec.input_dim))
    return Batch(x, [None] * spec.n_tasks)


def make_data(spec: TaskSpec) -> Batch:
    if spec.kind in ("avocado", "nonconvex"):
        return single_input(spec)
    if spec.kind == "opposite_logistic":
        return opposite_logistic_data(spec)
    return gaussian_multitask(spec)


def split(batch: Batch, val_fraction: float, rng: np.random.Generator) -> tuple[Batch, Batch]:
    """Disjoint train/validation split.  A single-sample batch is used for both."""
    n = batch.size
    if n == 1 or val_fraction <= 0:
        return batch, batch
    perm = rng.permutation(n)
    n_val = max(1, int(round(val_fraction * n)))
    return batch.take(np.sort(perm[n_val:])), batch.take(np.sort(perm[:n_val]))


def iter_batches(batch: Batch, size: int, rng: np.random.Generator | None = None) -> Iterator[Batch]:
    n = batch.size
    order = np.arange(n) if rng is None else rng.permutation(n)
    for start in range(0, n, size):
        yield batch.take(order[start : start + size])
