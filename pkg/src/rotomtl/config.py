"""Experiment configuration files (TOML) with line-anchored validation errors."""
from __future__ import annotations

import copy
import re
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .combiners import COMBINERS, CombinerKind
from .tasks import TaskSpec
from .trainer import OptimizerConfig, TrainConfig

__all__ = [
    "ConfigError",
    "TaskSection",
    "ModelSection",
    "BaselineSection",
    "ExperimentConfig",
    "load_text",
    "load_config",
    "parse_config",
    "set_dotted",
    "to_document",
]


class ConfigError(ValueError):
    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        self.detail = message
        where = f"{path or '<config>'}:{line}" if line else (path or "<config>")
        super().__init__(f"{where}: {message}")


_HEADER = re.compile(r"^\s*\[\s*([^\[\]]+?)\s*\]\s*(#.*)?$")
_KEY = re.compile(r"""^\s*("[^"]*"|'[^']*'|[A-Za-z0-9_\-.]+)\s*=""")


def _norm_key(raw: str) -> str:
    raw = raw.strip()
    if raw[:1] in "\"'":
        return raw[1:-1]
    return raw


def locate(text: str, table: str, key: str | None = None) -> int | None:
    """1-based line of ``key`` inside ``[table]`` (or of the header if ``key`` is None)."""
    current = ""
    header_line = 1 if table == "" else None
    for i, line in enumerate(text.splitlines(), start=1):
        m = _HEADER.match(line)
        if m:
            current = ".".join(_norm_key(p) for p in m.group(1).split("."))
            if current == table and header_line is None:
                header_line = i
            continue
        if key is None:
            continue
        km = _KEY.match(line)
        if not km:
            continue
        full = _norm_key(km.group(1))
        # dotted keys written inline, e.g. ``net.lr = 0.1`` under [train]
        if current == table and full == key:
            return i
        if current == "" and table and full == f"{table}.{key}":
            return i
    return header_line


@dataclass
class TaskSection:
    spec: TaskSpec
    val_fraction: float = 0.2


@dataclass
class ModelSection:
    hidden: list[int] = field(default_factory=list)
    features: int = 2
    backbone_activation: str = "none"
    head: str = "linear"  # "identity" | "linear" | "mlp"
    head_hidden: list[int] = field(default_factory=list)
    head_input_activation: str = "none"
    shared_head: bool = False
    subspace: int | None = None


@dataclass
class BaselineSection:
    values: list[float]
    lower_is_better: list[bool]


@dataclass
class ExperimentConfig:
    task: TaskSection
    model: ModelSection
    train: TrainConfig
    baseline: BaselineSection | None = None
    seeds: list[int] = field(default_factory=list)
    grid: dict[str, list] = field(default_factory=dict)
    rot_lr_multiplier: float | None = None
    path: str | None = None
    document: dict = field(default_factory=dict, repr=False)


_TOP_KEYS = {"seed", "task", "model", "train", "baseline", "sweep"}
_TASK_KEYS = {f.name for f in fields(TaskSpec)} - {"seed"} | {"val_fraction"}
_MODEL_KEYS = {f.name for f in fields(ModelSection)}
_OPT_KEYS = {f.name for f in fields(OptimizerConfig)}
_TRAIN_KEYS = {
    "epochs", "batch_size", "combiner", "rotations", "normalize_losses", "renormalize_at", "shuffle",
    "record_wall_clock", "gradnorm_alpha", "graddrop_leak", "mgda_max_iter", "mgda_tol", "rot_lr_multiplier",
    "net", "rot",
}
_SWEEP_KEYS = {"seeds", "grid"}
_BASELINE_KEYS = {"values", "lower_is_better"}

_FLOAT_KEYS = {
    "flip", "separation", "noise", "target_noise", "val_fraction", "lr", "decay", "momentum", "weight_decay",
    "beta1", "beta2", "eps", "gradnorm_alpha", "graddrop_leak", "mgda_tol", "rot_lr_multiplier",
}
_INT_KEYS = {"n_tasks", "n_samples", "input_dim", "features", "epochs", "batch_size", "renormalize_at", "mgda_max_iter", "subspace"}
_BOOL_KEYS = {"nesterov", "rectify", "rotations", "normalize_losses", "shuffle", "record_wall_clock", "shared_head"}
_STR_KEYS = {"kind", "target", "backbone_activation", "head", "head_input_activation", "combiner"}
_INT_LIST_KEYS = {"hidden", "head_hidden"}


class _Ctx:
    def __init__(self, text: str, path: str | None):
        self.text = text
        self.path = path

    def fail(self, table: str, key: str | None, message: str):
        raise ConfigError(message, self.path, locate(self.text, table, key))


def _check_keys(ctx: _Ctx, table: str, section: dict, allowed: set) -> None:
    for key in section:
        if key not in allowed:
            ctx.fail(table, key, f"unknown key {key!r} in [{table or 'top level'}]")


def _check_type(ctx: _Ctx, table: str, key: str, value: Any) -> Any:
    if key in _BOOL_KEYS:
        if not isinstance(value, bool):
            ctx.fail(table, key, f"{key} must be true or false")
    elif key in _INT_KEYS:
        if isinstance(value, bool) or not isinstance(value, int):
            ctx.fail(table, key, f"{key} must be an integer")
    elif key in _FLOAT_KEYS:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            ctx.fail(table, key, f"{key} must be a number")
        value = float(value)
    elif key in _STR_KEYS:
        if not isinstance(value, str):
            ctx.fail(table, key, f"{key} must be a string")
    elif key in _INT_LIST_KEYS:
        if not isinstance(value, list) or any(isinstance(v, bool) or not isinstance(v, int) for v in value):
            ctx.fail(table, key, f"{key} must be a list of integers")
    return value


def _section(ctx: _Ctx, doc: dict, name: str) -> dict:
    sec = doc.get(name, {})
    if not isinstance(sec, dict):
        ctx.fail("", name, f"{name} must be a table")
    return sec


def _typed(ctx: _Ctx, table: str, section: dict, skip: set = frozenset()) -> dict:
    return {k: _check_type(ctx, table, k, v) for k, v in section.items() if k not in skip}


def _build(ctx: _Ctx, table: str, factory, kwargs: dict):
    try:
        return factory(**kwargs)
    except (ValueError, TypeError) as exc:
        ctx.fail(table, None, str(exc))


def parse_config(doc: dict, text: str = "", path: str | None = None) -> ExperimentConfig:
    """Validate a parsed TOML document and assemble an :class:`ExperimentConfig`."""
    ctx = _Ctx(text, path)
    _check_keys(ctx, "", doc, _TOP_KEYS)
    seed = doc.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        ctx.fail("", "seed", "seed must be a non-negative integer")

    task = _section(ctx, doc, "task")
    _check_keys(ctx, "task", task, _TASK_KEYS | {"shifts"})
    tkw = _typed(ctx, "task", task, {"shifts", "val_fraction"})
    if "shifts" in task:
        if not isinstance(task["shifts"], list) or any(isinstance(s, bool) or not isinstance(s, (int, float)) for s in task["shifts"]):
            ctx.fail("task", "shifts", "shifts must be a list of numbers")
        tkw["shifts"] = tuple(float(s) for s in task["shifts"])
    val_fraction = _check_type(ctx, "task", "val_fraction", task.get("val_fraction", 0.2))
    if not 0.0 <= val_fraction < 1.0:
        ctx.fail("task", "val_fraction", "val_fraction must lie in [0, 1)")
    spec = _build(ctx, "task", TaskSpec, {**tkw, "seed": seed})

    model = _section(ctx, doc, "model")
    _check_keys(ctx, "model", model, _MODEL_KEYS)
    msec = ModelSection(**_typed(ctx, "model", model))
    if msec.head not in ("identity", "linear", "mlp"):
        ctx.fail("model", "head", "head must be 'identity', 'linear' or 'mlp'")
    for key in ("backbone_activation", "head_input_activation"):
        if getattr(msec, key) not in ("none", "relu"):
            ctx.fail("model", key, f"{key} must be 'none' or 'relu'")
    if msec.features < 1 or any(h < 1 for h in msec.hidden + msec.head_hidden):
        ctx.fail("model", "features", "layer sizes must be positive")
    if spec.kind in ("avocado", "nonconvex"):
        if msec.head != "identity":
            ctx.fail("model", "head", f"{spec.kind} tasks evaluate the features directly; use head = 'identity'")
        if msec.features != 2:
            ctx.fail("model", "features", f"{spec.kind} tasks need features = 2")
    if msec.subspace is not None and not 2 <= msec.subspace <= msec.features:
        ctx.fail("model", "subspace", "subspace must satisfy 2 <= subspace <= features")

    train = _section(ctx, doc, "train")
    _check_keys(ctx, "train", train, _TRAIN_KEYS)
    opts = {}
    for name in ("net", "rot"):
        sub = train.get(name, {})
        if not isinstance(sub, dict):
            ctx.fail("train", name, f"train.{name} must be a table")
        _check_keys(ctx, f"train.{name}", sub, _OPT_KEYS)
        defaults = {"kind": "adaptive", "lr": 0.005} if name == "rot" else {}
        opts[name] = _build(ctx, f"train.{name}", OptimizerConfig, {**defaults, **_typed(ctx, f"train.{name}", sub)})
    flat = _typed(ctx, "train", train, {"net", "rot"})
    combiner_name = flat.pop("combiner", "scale_only")
    if combiner_name not in COMBINERS:
        ctx.fail("train", "combiner", f"unknown combiner {combiner_name!r}; choose one of {', '.join(COMBINERS)}")
    ckw = {k: flat.pop(k) for k in ("gradnorm_alpha", "graddrop_leak", "mgda_max_iter", "mgda_tol") if k in flat}
    combiner = _build(ctx, "train", CombinerKind, {"name": combiner_name, **ckw})
    multiplier = flat.pop("rot_lr_multiplier", None)
    if multiplier is not None:
        if multiplier <= 0:
            ctx.fail("train", "rot_lr_multiplier", "rot_lr_multiplier must be > 0")
        opts["rot"] = _with_lr(opts["rot"], multiplier * opts["net"].lr)
    tcfg = _build(
        ctx, "train", TrainConfig,
        {**flat, "net": opts["net"], "rot": opts["rot"], "combiner": combiner, "seed": seed, "subspace": msec.subspace},
    )

    baseline = None
    if "baseline" in doc:
        b = _section(ctx, doc, "baseline")
        _check_keys(ctx, "baseline", b, _BASELINE_KEYS)
        values, lib = b.get("values"), b.get("lower_is_better")
        if not isinstance(values, list) or any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in values):
            ctx.fail("baseline", "values", "values must be a list of numbers")
        if not isinstance(lib, list) or any(not isinstance(v, bool) for v in lib):
            ctx.fail("baseline", "lower_is_better", "lower_is_better must be a list of booleans")
        if len(values) != spec.n_tasks or len(lib) != spec.n_tasks:
            ctx.fail("baseline", "values", f"need one baseline per task ({spec.n_tasks})")
        if any(v == 0 for v in values):
            ctx.fail("baseline", "values", "single-task baselines must be non-zero")
        baseline = BaselineSection([float(v) for v in values], list(lib))

    seeds, grid = [], {}
    if "sweep" in doc:
        sw = _section(ctx, doc, "sweep")
        _check_keys(ctx, "sweep", sw, _SWEEP_KEYS)
        seeds = sw.get("seeds", [])
        if not isinstance(seeds, list) or any(isinstance(s, bool) or not isinstance(s, int) or s < 0 for s in seeds):
            ctx.fail("sweep", "seeds", "seeds must be a list of non-negative integers")
        grid = sw.get("grid", {})
        if not isinstance(grid, dict):
            ctx.fail("sweep", "grid", "grid must be a table of dotted keys to value lists")
        for axis, values in grid.items():
            if not isinstance(values, list) or not values:
                ctx.fail("sweep.grid", axis, f"grid axis {axis!r} needs a non-empty list of values")
            for v in values:
                try:
                    trial = copy.deepcopy(doc)
                    set_dotted(trial, axis, v)
                    trial.pop("sweep", None)
                    parse_config(trial, text, path)
                except (ConfigError, KeyError) as exc:
                    detail = exc.detail if isinstance(exc, ConfigError) else str(exc)
                    ctx.fail("sweep.grid", axis, f"grid value {v!r} for {axis!r} is invalid: {detail}")

    return ExperimentConfig(
        task=TaskSection(spec, val_fraction),
        model=msec,
        train=tcfg,
        baseline=baseline,
        seeds=list(seeds),
        grid=dict(grid),
        rot_lr_multiplier=multiplier,
        path=path,
        document=doc,
    )


def _with_lr(opt: OptimizerConfig, lr: float) -> OptimizerConfig:
    kw = {f.name: getattr(opt, f.name) for f in fields(OptimizerConfig)}
    kw["lr"] = lr
    return OptimizerConfig(**kw)


def set_dotted(doc: dict, dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    if parts[0] not in _TOP_KEYS - {"sweep"}:
        raise KeyError(f"grid axis {dotted!r} does not name a config key")
    node = doc
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise KeyError(f"grid axis {dotted!r} does not name a config key")
    node[parts[-1]] = value


def load_text(path: str | Path) -> str:
    p = Path(path)
    if not p.is_file():
        raise ConfigError("config file not found", str(path), None)
    try:
        return p.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read config: {exc}", str(path), None) from exc


_TOML_LINE = re.compile(r"\(at line (\d+), column \d+\)")


def to_document(text: str, path: str | None = None) -> dict:
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        msg = str(exc)
        m = _TOML_LINE.search(msg)
        line = int(m.group(1)) if m else None
        raise ConfigError(_TOML_LINE.sub("", msg).strip(), path, line) from exc


def load_config(path: str | Path) -> ExperimentConfig:
    text = load_text(path)
    return parse_config(to_document(text, str(path)), text, str(path))
