"""Hard-parameter-sharing network with hand-written reverse mode.

A :class:`Backbone` maps inputs ``x`` (B x D) to shared features ``z``
(B x d).  Each task owns a :class:`Head` (possibly with no layers) and a
loss.  All losses reduce by SUM over the batch unless a head is built with
``reduction="mean"``.  Because the loss is a sum over samples, row ``n`` of
the gradient w.r.t. the head input is exactly the per-sample gradient
``g_n``, which is what the gradient combiners consume.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Dense",
    "Backbone",
    "Head",
    "AnalyticLoss",
    "ForwardTape",
    "HeadTape",
    "TaskGradientBatch",
    "StaleTapeError",
    "init_dense",
    "mlp_forward",
    "mlp_backward",
    "forward_shared",
    "task_loss_and_feature_grad",
    "backprop_shared",
    "backprop_head",
    "head_predict",
    "LOSS_KINDS",
]

LOSS_KINDS = ("mse", "bce", "nll", "custom")
ACTIVATIONS = ("relu", "none")


class StaleTapeError(RuntimeError):
    """Raised when a tape is used after the parameters that produced it changed."""


@dataclass
class Dense:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "none"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError("weight must be (out, in) and bias (out,)")

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]


def init_dense(n_in: int, n_out: int, rng: np.random.Generator, activation: str = "none") -> Dense:
    """Uniform init in ``[-1/sqrt(n_in), 1/sqrt(n_in)]``."""
    bound = 1.0 / np.sqrt(n_in)
    w = rng.uniform(-bound, bound, size=(n_out, n_in))
    b = rng.uniform(-bound, bound, size=n_out)
    return Dense(w, b, activation)


def _check_chain(layers: Sequence[Dense]) -> None:
    for prev, nxt in zip(layers, layers[1:]):
        if prev.n_out != nxt.n_in:
            raise ValueError(f"layer dims do not chain: {prev.n_out} -> {nxt.n_in}")


@dataclass
class _Module:
    layers: list[Dense]
    # bumped on every parameter update; tapes remember the value they saw
    version: int = field(default=0, init=False)

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend([layer.weight, layer.bias])
        return out

    def set_params(self, values: Sequence[np.ndarray]) -> None:
        values = list(values)
        if len(values) != 2 * len(self.layers):
            raise ValueError("parameter count mismatch")
        for i, layer in enumerate(self.layers):
            layer.weight = np.array(values[2 * i], dtype=np.float64)
            layer.bias = np.array(values[2 * i + 1], dtype=np.float64)
        self.touch()

    def touch(self) -> None:
        self.version += 1


@dataclass
class Backbone(_Module):
    def __post_init__(self):
        if not self.layers:
            raise ValueError("backbone needs at least one layer")
        _check_chain(self.layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].n_in

    @property
    def out_dim(self) -> int:
        return self.layers[-1].n_out

    @classmethod
    def mlp(cls, sizes: Sequence[int], rng: np.random.Generator, final_activation: str = "none") -> "Backbone":
        """ReLU MLP through ``sizes``; the last layer uses ``final_activation``."""
        layers = []
        for i, (a, b) in enumerate(zip(sizes, sizes[1:])):
            act = final_activation if i == len(sizes) - 2 else "relu"
            layers.append(init_dense(a, b, rng, act))
        return cls(layers)


@dataclass
class AnalyticLoss:
    """Caller-supplied per-sample loss with its analytic gradient.

    ``value(out, y)`` returns a length-B vector, ``grad(out, y)`` a B x d'
    matrix.  ``y`` is passed through untouched.
    """

    value: Callable[[np.ndarray, object], np.ndarray]
    grad: Callable[[np.ndarray, object], np.ndarray]


@dataclass
class Head(_Module):
    loss: str = "mse"
    in_dim: int | None = None
    analytic: AnalyticLoss | None = None
    reduction: str = "sum"
    input_activation: str = "none"  # applied to the head input before the first layer

    def __post_init__(self):
        if self.input_activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.input_activation!r}")
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss!r}")
        if self.reduction not in ("sum", "mean"):
            raise ValueError("reduction must be 'sum' or 'mean'")
        if self.loss == "custom" and self.analytic is None:
            raise ValueError("custom loss needs an AnalyticLoss")
        _check_chain(self.layers)
        if self.layers:
            if self.in_dim is not None and self.in_dim != self.layers[0].n_in:
                raise ValueError("in_dim disagrees with first layer")
            self.in_dim = self.layers[0].n_in
        elif self.in_dim is None:
            raise ValueError("a head without layers needs an explicit in_dim")
        if self.loss == "bce" and self.out_dim != 1:
            raise ValueError("bce head must emit a single logit")

    @property
    def out_dim(self) -> int:
        return self.layers[-1].n_out if self.layers else self.in_dim


@dataclass
class ForwardTape:
    inputs: list[np.ndarray]  # input to each layer
    pre: list[np.ndarray]  # pre-activations per layer
    version: int
    owner: int  # id() of the module that recorded it


@dataclass
class HeadTape:
    forward: ForwardTape
    dout: np.ndarray  # dL/d(head output)
    dinput: np.ndarray  # dL/d(head input), per-sample rows
    param_grads: list[np.ndarray]


@dataclass
class TaskGradientBatch:
    task: int
    grads: np.ndarray  # B x d

    def __post_init__(self):
        self.grads = np.asarray(self.grads, dtype=np.float64)
        if self.grads.ndim != 2 or self.grads.shape[0] < 1:
            raise ValueError("grads must be a non-empty B x d matrix")
        if not np.all(np.isfinite(self.grads)):
            raise ValueError("non-finite feature gradient")

    def rows(self):
        return iter(self.grads)


def mlp_forward(module: _Module, x: np.ndarray) -> tuple[np.ndarray, ForwardTape]:
    h = np.asarray(x, dtype=np.float64)
    if h.ndim != 2:
        raise ValueError("inputs must be B x D")
    inputs, pre = [], []
    for layer in module.layers:
        if h.shape[1] != layer.n_in:
            raise ValueError(f"input dim {h.shape[1]} does not match layer dim {layer.n_in}")
        inputs.append(h)
        a = h @ layer.weight.T + layer.bias
        pre.append(a)
        h = np.maximum(a, 0.0) if layer.activation == "relu" else a
    return h, ForwardTape(inputs, pre, module.version, id(module))


def mlp_backward(module: _Module, tape: ForwardTape, dout: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    """Reverse pass: returns (parameter gradients, gradient w.r.t. module input)."""
    if tape.owner != id(module) or tape.version != module.version:
        raise StaleTapeError("tape does not match current parameters")
    grads: list[np.ndarray] = [None] * (2 * len(module.layers))  # type: ignore[list-item]
    d = np.asarray(dout, dtype=np.float64)
    for i in range(len(module.layers) - 1, -1, -1):
        layer = module.layers[i]
        if layer.activation == "relu":
            d = d * (tape.pre[i] > 0)
        grads[2 * i] = d.T @ tape.inputs[i]
        grads[2 * i + 1] = d.sum(axis=0)
        d = d @ layer.weight
    return grads, d


def forward_shared(b: Backbone, x) -> tuple[np.ndarray, ForwardTape]:
    return mlp_forward(b, x)


def backprop_shared(b: Backbone, tape: ForwardTape, dz) -> list[np.ndarray]:
    """Gradient of ``<z, dz>`` w.r.t. every backbone parameter."""
    dz = np.asarray(dz, dtype=np.float64)
    if dz.shape != tape.pre[-1].shape:
        raise ValueError(f"dz shape {dz.shape} does not match features {tape.pre[-1].shape}")
    grads, _ = mlp_backward(b, tape, dz)
    return grads


def _log_softmax(o: np.ndarray) -> np.ndarray:
    m = o.max(axis=1, keepdims=True)
    return o - m - np.log(np.exp(o - m).sum(axis=1, keepdims=True))


def _loss_and_dout(h: Head, out: np.ndarray, y) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample losses and dL/d(out) for a summed loss."""
    if h.loss == "custom":
        vals = np.asarray(h.analytic.value(out, y), dtype=np.float64).reshape(-1)
        dout = np.asarray(h.analytic.grad(out, y), dtype=np.float64)
        if vals.shape != (out.shape[0],) or dout.shape != out.shape:
            raise ValueError("analytic loss returned wrong shapes")
        return vals, dout
    y = np.asarray(y)
    if h.loss == "mse":
        if y.size != out.size:
            raise ValueError("mse labels must match head output shape")
        y = y.astype(np.float64).reshape(out.shape)
        diff = out - y
        return np.sum(diff * diff, axis=1), 2.0 * diff
    if h.loss == "bce":
        if y.size != out.shape[0]:
            raise ValueError("bce needs one {0,1} label per sample")
        y = y.astype(np.float64).reshape(-1, 1)
        if np.any((y != 0) & (y != 1)):
            raise ValueError("bce labels must be 0 or 1")
        # softplus(o) - y*o, written to avoid overflow
        vals = np.logaddexp(0.0, out) - y * out
        p = 0.5 * (1.0 + np.tanh(0.5 * out))
        return vals.reshape(-1), p - y
    # nll on log-softmax of the logits
    if y.ndim != 1 or y.size != out.shape[0] or not np.issubdtype(y.dtype, np.integer):
        raise ValueError("nll needs one integer class label per sample")
    if np.any((y < 0) | (y >= out.shape[1])):
        raise ValueError("class label out of range")
    logp = _log_softmax(out)
    idx = np.arange(out.shape[0])
    vals = -logp[idx, y]
    dout = np.exp(logp)
    dout[idx, y] -= 1.0
    return vals, dout


def task_loss_and_feature_grad(h: Head, r, y) -> tuple[float, np.ndarray, HeadTape]:
    """Loss summed over the batch and its per-sample gradient w.r.t. ``r``.

    Also returns the head tape; :func:`backprop_head` reads the head
    parameter gradients from it.
    """
    r = np.asarray(r, dtype=np.float64)
    if r.ndim != 2 or r.shape[1] != h.in_dim:
        raise ValueError(f"head expects B x {h.in_dim} input, got {r.shape}")
    a = np.maximum(r, 0.0) if h.input_activation == "relu" else r
    out, ftape = mlp_forward(h, a)
    vals, dout = _loss_and_dout(h, out, y)
    if h.reduction == "mean":
        vals = vals / r.shape[0]
        dout = dout / r.shape[0]
    if h.layers:
        pgrads, dinput = mlp_backward(h, ftape, dout)
    else:
        pgrads, dinput = [], dout
    if h.input_activation == "relu":
        dinput = dinput * (r > 0)
    return float(np.sum(vals)), dinput, HeadTape(ftape, dout, dinput, pgrads)


def backprop_head(h: Head, tape: HeadTape, scale: float = 1.0) -> list[np.ndarray]:
    if tape.forward.owner != id(h) or tape.forward.version != h.version:
        raise StaleTapeError("head tape does not match current parameters")
    return [g * scale for g in tape.param_grads]


def head_predict(h: Head, r) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    out, _ = mlp_forward(h, np.maximum(r, 0.0) if h.input_activation == "relu" else r)
    return out
