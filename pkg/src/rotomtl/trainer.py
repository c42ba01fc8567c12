"""Training loop: magnitude scaling, rotation updates and checkpointing.

:func:`train_step` runs one step of the RotoGrad procedure (or a baseline
combiner in its place) and records every stage in ``StepReport.events`` so
the order of operations can be checked.  :func:`fit` adds epochs, per-epoch
validation and best-snapshot tracking.
"""
from __future__ import annotations

import copy
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import combiners as comb
from .linalg import ZERO_NORM, frob_norm
from .netcore import (
    Backbone,
    Head,
    backprop_head,
    backprop_shared,
    forward_shared,
    task_loss_and_feature_grad,
)
from .rotation import RotationSet, apply, make_target, pull_back, rotation_loss, rotation_loss_grad
from .tasks import Batch, iter_batches

__all__ = [
    "OptimizerConfig",
    "TrainConfig",
    "MTLModel",
    "TrainState",
    "StepReport",
    "DivergenceError",
    "LeaderFollowerWarning",
    "schedule",
    "check_leader_follower",
    "apply_optimizer",
    "LossNormalizer",
    "normalize_losses",
    "init_state",
    "train_step",
    "evaluate",
    "fit",
    "FitResult",
]

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6


class DivergenceError(RuntimeError):
    def __init__(self, task: int, value: float):
        super().__init__(f"task {task} diverged: normalized loss {value!r}")
        self.task = task
        self.value = value


class LeaderFollowerWarning(UserWarning):
    """The rotation (leader) learning rate is not slower than the network's."""


@dataclass
class OptimizerConfig:
    kind: str = "sgd"  # "sgd" or "adaptive"
    lr: float = 0.01
    decay: float = 1.0  # per-step exponential factor
    momentum: float = 0.0
    nesterov: bool = False
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    rectify: bool = False  # RAdam variance rectification for the adaptive kind

    def __post_init__(self):
        if self.kind not in ("sgd", "adaptive"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.lr <= 0:
            raise ValueError("learning rate must be > 0")
        if not 0.0 < self.decay <= 1.0:
            raise ValueError("decay must lie in (0, 1]")
        if self.nesterov and self.momentum <= 0:
            raise ValueError("nesterov needs momentum > 0")


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 1
    net: OptimizerConfig = field(default_factory=OptimizerConfig)
    rot: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(kind="adaptive", lr=0.005))
    combiner: comb.CombinerKind = field(default_factory=comb.CombinerKind)
    rotations: bool = True
    subspace: int | None = None  # None rotates all of z
    normalize_losses: bool = False
    renormalize_at: int = 20
    shuffle: bool = True
    seed: int = 0
    record_wall_clock: bool = False

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.rot.kind != "adaptive":
            raise ValueError("rotation parameters use the adaptive optimizer")

    @property
    def net_lr(self) -> float:
        return self.net.lr

    @property
    def rot_lr(self) -> float:
        return self.rot.lr


def schedule(lr0: float, decay: float, t: int) -> float:
    if not 0.0 < decay <= 1.0:
        raise ValueError("decay must lie in (0, 1]")
    if decay == 1.0:
        return lr0
    return lr0 * decay**t


def check_leader_follower(net_lr: float, rot_lr: float, net_decay: float = 1.0, rot_decay: float = 1.0) -> list[str]:
    """Warn unless the rotations learn no faster than the network.

    Convergence of the leader/follower game needs the leader's rate to
    vanish faster than the follower's, so we ask for ``rot_lr <= net_lr`` at
    ``t = 0`` and a rotation decay at least as fast as the network's.
    """
    problems = []
    if rot_lr > net_lr:
        problems.append(f"rotation lr {rot_lr:g} exceeds network lr {net_lr:g}")
    if rot_decay > net_decay:
        problems.append(f"rotation decay {rot_decay:g} is slower than network decay {net_decay:g}")
    for msg in problems:
        warnings.warn(msg, LeaderFollowerWarning, stacklevel=2)
    return problems


def apply_optimizer(cfg: OptimizerConfig, params: Sequence[np.ndarray], grads: Sequence[np.ndarray], moments: dict, lr: float) -> list[np.ndarray]:
    """Return updated parameters; ``moments`` is updated in place.

    ``moments`` starts as an empty dict and carries ``step`` plus the
    momentum buffers (sgd) or first/second moments (adaptive).
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    step = moments.get("step", 0) + 1
    moments["step"] = step
    out = []
    if cfg.kind == "sgd":
        bufs = moments.setdefault("buf", [None] * len(params))
        for i, (p, g) in enumerate(zip(params, grads)):
            if cfg.weight_decay:
                g = g + cfg.weight_decay * p
            if cfg.momentum:
                bufs[i] = g.copy() if bufs[i] is None else cfg.momentum * bufs[i] + g
                g = g + cfg.momentum * bufs[i] if cfg.nesterov else bufs[i]
            out.append(p - lr * g)
        return out

    m_list = moments.setdefault("m", [np.zeros_like(p) for p in params])
    v_list = moments.setdefault("v", [np.zeros_like(p) for p in params])
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1**step
    bc2 = 1.0 - b2**step
    rect = None
    if cfg.rectify:
        rho_inf = 2.0 / (1.0 - b2) - 1.0
        rho_t = rho_inf - 2.0 * step * b2**step / bc2
        if rho_t > 5.0:
            rect = math.sqrt((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
        else:
            rect = 0.0  # un-adapted momentum step while the variance estimate is unreliable
    for i, (p, g) in enumerate(zip(params, grads)):
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p
        m_list[i] = b1 * m_list[i] + (1.0 - b1) * g
        v_list[i] = b2 * v_list[i] + (1.0 - b2) * g * g
        m_hat = m_list[i] / bc1
        v_hat = v_list[i] / bc2
        if rect is None:
            out.append(p - lr * m_hat / (np.sqrt(v_hat) + cfg.eps))
        elif rect == 0.0:
            out.append(p - lr * m_hat)
        else:
            out.append(p - lr * rect * m_hat / (np.sqrt(v_hat) + cfg.eps))
    return out


class LossNormalizer:
    """Divide each task loss by its value at step 0, re-based at ``renormalize_at``."""

    def __init__(self, n_tasks: int, enabled: bool = True, renormalize_at: int = 20):
        self.enabled = enabled
        self.renormalize_at = renormalize_at
        self.constants = np.ones(n_tasks)

    def factor(self, k: int, raw: float, t: int) -> float:
        """Constant to divide task ``k``'s loss (and gradients) by at step ``t``."""
        if not self.enabled:
            return 1.0
        if t == 0 or t == self.renormalize_at:
            c = raw
            if abs(c) < ZERO_NORM:
                log.warning("loss normalization constant for task %d clamped to %g", k, ZERO_NORM)
                c = ZERO_NORM if c >= 0 else -ZERO_NORM
            self.constants[k] = c
        return float(self.constants[k])


def normalize_losses(raw: Sequence[float], normalizer: LossNormalizer, t: int) -> list[float]:
    return [r / normalizer.factor(k, r, t) for k, r in enumerate(raw)]


@dataclass
class MTLModel:
    backbone: Backbone
    heads: list[Head]  # one per task; the same object may repeat for a shared head
    rotations: RotationSet | None = None

    @property
    def n_tasks(self) -> int:
        return len(self.heads)

    @property
    def shared_head(self) -> bool:
        return len({id(h) for h in self.heads}) < len(self.heads)

    def unique_heads(self) -> list[Head]:
        seen, out = set(), []
        for h in self.heads:
            if id(h) not in seen:
                seen.add(id(h))
                out.append(h)
        return out

    def snapshot(self) -> dict:
        snap = {
            "backbone": [p.copy() for p in self.backbone.params()],
            "heads": [[p.copy() for p in h.params()] for h in self.unique_heads()],
        }
        if self.rotations is not None:
            snap["rotations"] = [p.upper.copy() for p in self.rotations.params]
        return snap

    def restore(self, snap: dict) -> None:
        self.backbone.set_params(snap["backbone"])
        for h, vals in zip(self.unique_heads(), snap["heads"]):
            h.set_params(vals)
        if self.rotations is not None and "rotations" in snap:
            for k, upper in enumerate(snap["rotations"]):
                self.rotations.set_param(k, upper)


@dataclass
class TrainState:
    model: MTLModel
    config: TrainConfig
    t: int = 0
    backbone_moments: dict = field(default_factory=dict)
    head_moments: list[dict] = field(default_factory=list)
    rot_moments: list[dict] = field(default_factory=list)
    initial_norms: np.ndarray | None = None
    initial_losses: np.ndarray | None = None
    normalizer: LossNormalizer | None = None
    gradnorm_weights: np.ndarray | None = None
    rng: np.random.Generator | None = None
    best: dict | None = None
    best_val: float = math.inf
    best_epoch: int = -1


def init_state(model: MTLModel, config: TrainConfig) -> TrainState:
    if model.rotations is None and config.rotations:
        raise ValueError("config enables rotations but the model has none")
    k = model.n_tasks
    return TrainState(
        model=model,
        config=config,
        head_moments=[{} for _ in model.unique_heads()],
        rot_moments=[{} for _ in range(k)],
        normalizer=LossNormalizer(k, config.normalize_losses, config.renormalize_at),
        gradnorm_weights=np.ones(k),
        rng=np.random.default_rng(np.random.SeedSequence([config.seed, 0xC0FFEE])),
    )


@dataclass
class StepReport:
    t: int
    losses: list[float]  # raw summed task losses
    normalized: list[float]
    grad_norms: list[float]
    scale: float | None
    alphas: list[float] | None
    weights: list[float]
    pairwise_cos: dict
    update_cos: list[float]
    rotation_losses: list[float] | None
    lr_net: float
    lr_rot: float
    events: list[tuple] = field(default_factory=list)
    combine_diagnostics: dict = field(default_factory=dict, repr=False)


def _rotate_grad(rs: RotationSet | None, k: int, g: np.ndarray) -> np.ndarray:
    """``R_k G_k`` on the rotated block; trailing coordinates untouched."""
    if rs is None:
        return g
    return apply(rs, g, k)


def train_step(state: TrainState, x, labels: Sequence) -> StepReport:
    cfg = state.config
    model = state.model
    rs = model.rotations if cfg.rotations else None
    k_tasks = model.n_tasks
    t = state.t
    lr_net = schedule(cfg.net.lr, cfg.net.decay, t)
    lr_rot = schedule(cfg.rot.lr, cfg.rot.decay, t)
    events: list[tuple] = []
    use_alpha = cfg.combiner.name == "scale_only"

    z, tape = forward_shared(model.backbone, x)
    events.append(("forward",))

    raw, normed, feat, rotated, units, norms, head_tapes, factors = [], [], [], [], [], [], [], []
    for k in range(k_tasks):
        r = apply(rs, z, k) if rs is not None else z
        loss, g_r, htape = task_loss_and_feature_grad(model.heads[k], r, labels[k])
        c = state.normalizer.factor(k, loss, t)
        nl = loss / c
        if not math.isfinite(nl) or nl > DIVERGENCE_LIMIT:
            raise DivergenceError(k, nl)
        raw.append(loss)
        normed.append(nl)
        factors.append(c)
        head_tapes.append(htape)
        events.append(("task_loss", k))

        g = pull_back(rs, k, g_r) if rs is not None else g_r
        if c != 1.0:
            g = g / c
        feat.append(g)
        events.append(("feature_grad", k))

        rotated.append(_rotate_grad(rs, k, g))
        events.append(("rotated_grad", k))

        n = frob_norm(g)
        norms.append(n)
        units.append(g / n if n >= ZERO_NORM else np.zeros_like(g))
        events.append(("unit_grad", k))

        if use_alpha:
            events.append(("alpha", k))

    if state.initial_norms is None:
        # captured on the very first step, after loss normalization
        state.initial_norms = np.array(norms, dtype=np.float64)
    if state.initial_losses is None:
        state.initial_losses = np.array(normed, dtype=np.float64)

    name = cfg.combiner.name
    if name == "scale_only":
        res = comb.scale_only(feat, state.initial_norms)
        events.append(("normalize_alpha",))
        events.append(("scale",))
    else:
        if name == "vanilla":
            res = comb.vanilla(feat)
        elif name == "pcgrad":
            res = comb.pcgrad(feat, state.rng)
        elif name == "graddrop":
            res = comb.graddrop(feat, state.rng, cfg.combiner.graddrop_leak)
        elif name == "gradnorm":
            res = comb.gradnorm(feat, state.gradnorm_weights, normed, state.initial_losses, cfg.combiner.gradnorm_alpha, lr_rot)
        elif name == "mgda_ub":
            res = comb.mgda_ub(feat, cfg.combiner.mgda_max_iter, cfg.combiner.mgda_tol)
        else:
            res = comb.imtl_g(feat)
        events.append(("combine", name))

    bgrads = backprop_shared(model.backbone, tape, res.combined)
    model.backbone.set_params(apply_optimizer(cfg.net, model.backbone.params(), bgrads, state.backbone_moments, lr_net))
    events.append(("backbone_update",))

    rot_losses = None
    if rs is not None:
        target = make_target(units)
        events.append(("target",))
        rot_losses = []

    head_index = {id(h): i for i, h in enumerate(model.unique_heads())}
    shared_grads: dict[int, list[np.ndarray]] = {}
    for k in range(k_tasks):
        if rs is not None:
            rot_losses.append(rotation_loss(rs, k, rotated[k], target))
            events.append(("rotation_loss", k))
            grad_a = rotation_loss_grad(rs, k, rotated[k], target)
            (new_a,) = apply_optimizer(cfg.rot, [rs.param_vector(k)], [grad_a], state.rot_moments[k], lr_rot)
            rs.set_param(k, new_a)
            events.append(("rotation_update", k))

        head = model.heads[k]
        hgrads = backprop_head(head, head_tapes[k], 1.0 / factors[k])
        if model.shared_head:
            acc = shared_grads.get(id(head))
            shared_grads[id(head)] = hgrads if acc is None else [a + b for a, b in zip(acc, hgrads)]
        else:
            _update_head(state, head_index[id(head)], hgrads, lr_net)
            events.append(("head_update", k))
    for hid, hgrads in shared_grads.items():
        _update_head(state, head_index[hid], hgrads, lr_net)
        events.append(("head_update", "shared"))

    state.t += 1
    combined = res.combined
    return StepReport(
        t=t,
        losses=raw,
        normalized=normed,
        grad_norms=norms,
        scale=res.scale,
        alphas=None if res.alphas is None else list(res.alphas),
        weights=list(np.asarray(res.weights, dtype=np.float64)),
        pairwise_cos={f"{i}-{j}": v for (i, j), v in comb.pairwise_cosines(feat).items()},
        update_cos=[comb.batch_cosine(g, combined) for g in feat],
        rotation_losses=rot_losses,
        lr_net=lr_net,
        lr_rot=lr_rot,
        events=events,
        combine_diagnostics=res.diagnostics,
    )


def _update_head(state: TrainState, idx: int, grads: list[np.ndarray], lr: float) -> None:
    head = state.model.unique_heads()[idx]
    if not head.layers:
        return
    head.set_params(apply_optimizer(state.config.net, head.params(), grads, state.head_moments[idx], lr))


def evaluate(model: MTLModel, data: Batch, use_rotations: bool = True) -> list[float]:
    """Summed per-task losses on ``data`` with the current parameters."""
    rs = model.rotations if use_rotations else None
    z, _ = forward_shared(model.backbone, data.x)
    out = []
    for k, head in enumerate(model.heads):
        r = apply(rs, z, k) if rs is not None else z
        loss, _, _ = task_loss_and_feature_grad(head, r, data.labels[k])
        out.append(loss)
    return out


@dataclass
class FitResult:
    state: TrainState
    best: dict
    best_epoch: int
    best_val: float
    log: list[dict]


def _step_record(rep: StepReport, epoch: int) -> dict:
    rec = {
        "kind": "step",
        "t": rep.t,
        "epoch": epoch,
        "losses": rep.losses,
        "normalized_losses": rep.normalized,
        "grad_norms": rep.grad_norms,
        "scale": rep.scale,
        "alphas": rep.alphas,
        "weights": rep.weights,
        "pairwise_cos": rep.pairwise_cos,
        "update_cos": rep.update_cos,
        "rotation_losses": rep.rotation_losses,
        "lr_net": rep.lr_net,
        "lr_rot": rep.lr_rot,
    }
    return rec


def fit(
    state: TrainState,
    train: Batch,
    val: Batch,
    evaluate_fn: Callable[[TrainState, Batch, int], float] | None = None,
    sink: Callable[[dict], None] | None = None,
) -> FitResult:
    """Train for ``config.epochs`` epochs keeping the best validation snapshot.

    The validation score after each epoch is ``sum_k L_k`` on ``val``
    unless ``evaluate_fn(state, val, epoch)`` is supplied.  The parameters
    before any training count as epoch 0, so ``epochs == 0`` returns them.
    Each metrics record is appended to the returned log and passed to
    ``sink`` if given.
    """
    if train.size == 0 or val.size == 0:
        raise ValueError("train and validation data must be non-empty")
    cfg = state.config

    def score(epoch: int) -> float:
        if evaluate_fn is not None:
            return float(evaluate_fn(state, val, epoch))
        return float(sum(evaluate(state.model, val, cfg.rotations)))

    records: list[dict] = []

    def emit(rec: dict) -> None:
        records.append(rec)
        if sink is not None:
            sink(rec)

    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xBA7C4]))
    start = time.perf_counter()
    val0 = score(0)
    state.best, state.best_val, state.best_epoch = state.model.snapshot(), val0, 0
    emit({"kind": "epoch", "epoch": 0, "t": state.t, "val_loss": val0, "best_epoch": 0})
    for epoch in range(1, cfg.epochs + 1):
        for batch in iter_batches(train, cfg.batch_size, shuffle_rng if cfg.shuffle else None):
            rep = train_step(state, batch.x, batch.labels)
            rec = _step_record(rep, epoch)
            if cfg.record_wall_clock:
                rec["wall_clock"] = time.perf_counter() - start
            emit(rec)
        val_loss = score(epoch)
        if val_loss < state.best_val:
            state.best, state.best_val, state.best_epoch = state.model.snapshot(), val_loss, epoch
        emit({"kind": "epoch", "epoch": epoch, "t": state.t, "val_loss": val_loss, "best_epoch": state.best_epoch})
    return FitResult(state, copy.deepcopy(state.best), state.best_epoch, state.best_val, records)
