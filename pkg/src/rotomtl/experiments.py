"""Assemble models, data and training state from an :class:`ExperimentConfig`.

Seeds are derived deterministically from the run seed: the dataset uses the
seed directly, while initialization and the train/validation split draw
from separate spawned streams.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .config import ExperimentConfig, ModelSection, TaskSection
from .combiners import CombinerKind
from .netcore import Backbone, Head, forward_shared, head_predict, init_dense
from .rotation import RotationSet, apply
from .tasks import Batch, TaskSpec, function_loss, make_data, split
from .trainer import MTLModel, OptimizerConfig, TrainConfig, TrainState, evaluate, init_state

__all__ = [
    "Experiment",
    "build",
    "build_model",
    "task_metrics",
    "metric_directions",
    "illustrative_config",
    "opposite_logistic_config",
    "QuadraticInstance",
    "random_quadratic_instance",
    "prop1_sweep",
]

_INIT_STREAM = 0x1417
_SPLIT_STREAM = 0x5917


@dataclass
class Experiment:
    config: ExperimentConfig
    seed: int
    state: TrainState
    train: Batch
    val: Batch


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream]))


def _head_loss(spec: TaskSpec) -> str:
    if spec.kind in ("avocado", "nonconvex"):
        return "custom"
    if spec.kind == "gaussian_multitask" and spec.target == "regression":
        return "mse"
    return "bce"


def build_model(spec: TaskSpec, msec: ModelSection, use_rotations: bool, rng: np.random.Generator) -> MTLModel:
    d = msec.features
    backbone = Backbone.mlp([spec.input_dim, *msec.hidden, d], rng, final_activation=msec.backbone_activation)
    loss = _head_loss(spec)

    def make_head(k: int) -> Head:
        if loss == "custom":
            return Head([], loss="custom", in_dim=d, analytic=function_loss(spec.kind, spec.shifts[k]))
        sizes = [d, *(msec.head_hidden if msec.head == "mlp" else []), 1]
        layers = [init_dense(a, b, rng, "relu" if i < len(sizes) - 2 else "none") for i, (a, b) in enumerate(zip(sizes, sizes[1:]))]
        return Head(layers, loss=loss, input_activation=msec.head_input_activation)

    if msec.shared_head:
        shared = make_head(0)
        heads = [shared] * spec.n_tasks
    else:
        heads = [make_head(k) for k in range(spec.n_tasks)]
    rotations = RotationSet(spec.n_tasks, d, msec.subspace or d) if use_rotations else None
    return MTLModel(backbone, heads, rotations)


def build(cfg: ExperimentConfig, seed: int | None = None) -> Experiment:
    seed = cfg.train.seed if seed is None else seed
    spec = replace(cfg.task.spec, seed=seed)
    train_cfg = replace(cfg.train, seed=seed)
    model = build_model(spec, cfg.model, train_cfg.rotations, _rng(seed, _INIT_STREAM))
    data = make_data(spec)
    tr, va = split(data, cfg.task.val_fraction, _rng(seed, _SPLIT_STREAM))
    return Experiment(cfg, seed, init_state(model, train_cfg), tr, va)


def metric_directions(model: MTLModel) -> list[bool]:
    """``lower_is_better`` per task: accuracy for classification heads, loss otherwise."""
    return [h.loss not in ("bce", "nll") for h in model.heads]


def task_metrics(model: MTLModel, data: Batch, use_rotations: bool) -> list[float]:
    """Per-task metric: accuracy for classification heads, summed loss otherwise."""
    losses = evaluate(model, data, use_rotations)
    rs = model.rotations if use_rotations else None
    z, _ = forward_shared(model.backbone, data.x)
    out = []
    for k, head in enumerate(model.heads):
        if head.loss == "bce":
            r = apply(rs, z, k) if rs is not None else z
            pred = head_predict(head, r).reshape(-1) > 0
            out.append(float(np.mean(pred == np.asarray(data.labels[k]).astype(bool))))
        elif head.loss == "nll":
            r = apply(rs, z, k) if rs is not None else z
            pred = np.argmax(head_predict(head, r), axis=1)
            out.append(float(np.mean(pred == np.asarray(data.labels[k]))))
        else:
            out.append(losses[k])
    return out


def illustrative_config(kind: str, rotograd: bool, seed: int = 0) -> ExperimentConfig:
    """Two-task test-function problem with the standard training settings.

    ``rotograd`` selects magnitude scaling plus rotations; otherwise plain
    gradient summation without rotations.
    """
    if kind == "avocado":
        epochs, lr, rot_lr = 100, 0.01, 0.5
    elif kind == "nonconvex":
        epochs, lr, rot_lr = 400, 0.015, 0.1
    else:
        raise ValueError(f"{kind!r} is not a test-function problem")
    spec = TaskSpec(kind=kind, n_tasks=2, shifts=(0.0, 1.0), seed=seed)
    train = TrainConfig(
        epochs=epochs,
        batch_size=1,
        net=OptimizerConfig("sgd", lr),
        rot=OptimizerConfig("adaptive", rot_lr, decay=0.99999, rectify=True),
        combiner=CombinerKind("scale_only" if rotograd else "vanilla"),
        rotations=rotograd,
        shuffle=False,
        seed=seed,
    )
    return ExperimentConfig(TaskSection(spec, 0.0), ModelSection(hidden=[10], features=2, head="identity"), train)


def opposite_logistic_config(seed: int = 0, rotograd: bool = True) -> ExperimentConfig:
    """Two opposite binary tasks sharing every parameter, full-batch training."""
    spec = TaskSpec(kind="opposite_logistic", n_samples=1000, flip=0.05, seed=seed)
    train = TrainConfig(
        epochs=300,
        batch_size=1000,
        net=OptimizerConfig("adaptive", 0.01),
        rot=OptimizerConfig("adaptive", 0.05, decay=0.99),
        combiner=CombinerKind("scale_only" if rotograd else "vanilla"),
        rotations=rotograd,
        seed=seed,
    )
    model = ModelSection(hidden=[], features=2, head="linear", head_input_activation="relu", shared_head=True)
    return ExperimentConfig(TaskSection(spec, 0.2), model, train)


@dataclass
class QuadraticInstance:
    """Tasks ``L_k(z) = 0.5 (z - c_k)^T H_k (z - c_k)`` evaluated at ``z``."""

    z: np.ndarray  # (d,)
    centers: np.ndarray  # (K, d)
    hessians: np.ndarray  # (K, d, d), symmetric positive definite

    def losses(self, z: np.ndarray) -> np.ndarray:
        diff = z[None, :] - self.centers
        return 0.5 * np.einsum("ki,kij,kj->k", diff, self.hessians, diff)

    def grads(self) -> list[np.ndarray]:
        diff = self.z[None, :] - self.centers
        return [(self.hessians[k] @ diff[k]).reshape(1, -1) for k in range(len(self.centers))]


def random_quadratic_instance(rng: np.random.Generator, n_tasks: int, dim: int) -> QuadraticInstance:
    centers = rng.standard_normal((n_tasks, dim))
    hessians = np.empty((n_tasks, dim, dim))
    for k in range(n_tasks):
        q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        eig = rng.uniform(0.1, 2.0, size=dim)
        hessians[k] = (q * eig) @ q.T
    return QuadraticInstance(rng.standard_normal(dim), centers, hessians)


def prop1_sweep(
    n_instances: int,
    seed: int,
    max_tasks: int = 5,
    max_dim: int = 6,
    step: float = 1e-4,
    max_attempts: int = 1_000_000,
) -> list[dict]:
    """Draw instances until ``n_instances`` pass the pairwise-cosine certificate.

    For each passing instance, take one step of size ``step`` along the
    magnitude-scaled sum of unit gradients and report whether every task
    loss strictly decreased.
    """
    from .combiners import prop1_certificate, scale_only

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9809]))
    rows: list[dict] = []
    attempts = 0
    while len(rows) < n_instances:
        attempts += 1
        if attempts > max_attempts:
            raise RuntimeError("too few instances pass the certificate")
        k = int(rng.integers(2, max_tasks + 1))
        d = int(rng.integers(2, max_dim + 1))
        inst = random_quadratic_instance(rng, k, d)
        grads = inst.grads()
        cert = prop1_certificate(grads)
        if not cert["threshold_ok"]:
            continue
        initial = rng.uniform(0.5, 2.0, size=k) * np.array([np.linalg.norm(g) for g in grads])
        res = scale_only(grads, initial)
        before = inst.losses(inst.z)
        after = inst.losses(inst.z - step * res.combined.reshape(-1))
        rows.append(
            {
                "instance": len(rows),
                "n_tasks": k,
                "dim": d,
                "min_pairwise_cos": cert["min_pairwise_cos"],
                "threshold": cert["threshold"],
                "scale": res.scale,
                "max_loss_change": float(np.max(after - before)),
                "all_decrease": bool(np.all(after < before)),
            }
        )
    return rows
