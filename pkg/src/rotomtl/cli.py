"""Command-line experiment runner.

Subcommands::

    run      train one configuration for one seed
    sweep    Cartesian grid x seeds, ranked by validation loss
    compare  paired one-sided t-test between two result sets
    prop1    certificate sweep over random quadratic tasks
    demo     trajectories and loss surfaces for the two test-function problems

Exit codes: 0 success, 2 invalid or missing configuration, 3 divergence,
4 bad input data for ``compare``.
"""
from __future__ import annotations

import argparse
import copy
import itertools
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from . import export
from .config import ConfigError, ExperimentConfig, locate, load_text, parse_config, set_dotted, to_document
from .experiments import build, illustrative_config, metric_directions, prop1_sweep, task_metrics
from .netcore import forward_shared
from .rotation import apply
from .stats import improvement_report, paired_ttest_one_sided
from .tasks import avocado, nonconvex
from .trainer import DivergenceError, check_leader_follower, evaluate, fit

__all__ = ["main", "run_one", "EXIT_OK", "EXIT_CONFIG", "EXIT_DIVERGED", "EXIT_DATA"]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_DATA = 4

log = logging.getLogger("rotomtl")


def _summary_header(n_tasks: int) -> list[str]:
    head = ["run", "seed", "status", "epochs", "best_epoch", "best_val_loss", "final_val_loss"]
    head += [f"best_metric_{k}" for k in range(n_tasks)]
    head += [f"final_metric_{k}" for k in range(n_tasks)]
    return head


def run_one(cfg: ExperimentConfig, seed: int, out_dir: Path, run_id: str) -> dict:
    """Train once, writing metrics, snapshots and (optionally) an improvement report.

    Returns a summary row.  Divergence is reported in the row's ``status``
    rather than raised.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    check_leader_follower(cfg.train.net.lr, cfg.train.rot.lr, cfg.train.net.decay, cfg.train.rot.decay)
    exp = build(cfg, seed)
    model, rot_on = exp.state.model, cfg.train.rotations
    n_tasks = model.n_tasks
    row = {"run": run_id, "seed": seed, "status": "ok", "epochs": cfg.train.epochs}

    with open(out_dir / "metrics.jsonl", "w", encoding="ascii", newline="\n") as fh:

        def sink(rec: dict) -> None:
            if rec["kind"] == "epoch":
                rec["val_losses"] = evaluate(model, exp.val, rot_on)
                rec["val_metrics"] = task_metrics(model, exp.val, rot_on)
            fh.write(export.dumps({"run": run_id, **rec}))
            fh.write("\n")

        try:
            result = fit(exp.state, exp.train, exp.val, sink=sink)
        except DivergenceError as exc:
            fh.write(export.dumps({"run": run_id, "kind": "diverged", "t": exp.state.t, "task": exc.task, "value": exc.value}))
            fh.write("\n")
            row.update(status=f"diverged:task{exc.task}", diverged_task=exc.task)
            export.write_csv(out_dir / "summary.csv", _summary_header(n_tasks), [[row.get(h) for h in _summary_header(n_tasks)]])
            return row

    final_val = float(sum(evaluate(model, exp.val, rot_on)))
    final_metrics = task_metrics(model, exp.val, rot_on)
    export.write_json(out_dir / "final.json", export.snapshot_to_jsonable(model.snapshot()))
    export.write_json(out_dir / "best.json", {"epoch": result.best_epoch, **export.snapshot_to_jsonable(result.best)})
    model.restore(result.best)
    best_metrics = task_metrics(model, exp.val, rot_on)
    row.update(best_epoch=result.best_epoch, best_val_loss=result.best_val, final_val_loss=final_val)
    for k in range(n_tasks):
        row[f"best_metric_{k}"] = best_metrics[k]
        row[f"final_metric_{k}"] = final_metrics[k]

    if cfg.baseline is not None:
        expected = metric_directions(model)
        report = improvement_report(best_metrics, cfg.baseline.values, cfg.baseline.lower_is_better)
        payload = report.as_dict()
        payload["metrics"] = best_metrics
        payload["baselines"] = cfg.baseline.values
        if expected != cfg.baseline.lower_is_better:
            payload["note"] = "declared metric directions differ from the task heads' metrics"
        export.write_json(out_dir / "improvement.json", payload)

    export.write_csv(out_dir / "summary.csv", _summary_header(n_tasks), [[row.get(h) for h in _summary_header(n_tasks)]])
    return row


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


def _load(path: str | None) -> tuple[dict, str, ExperimentConfig]:
    if path is None:
        raise ConfigError("--config is required")
    text = load_text(path)
    doc = to_document(text, path)
    return doc, text, parse_config(doc, text, path)


def cmd_run(args) -> int:
    _, _, cfg = _load(args.config)
    seed = cfg.train.seed if args.seed is None else args.seed
    out = Path(args.out)
    row = run_one(cfg, seed, out, f"{Path(args.config).stem}-s{seed}")
    if row["status"] != "ok":
        _err(f"error: task {row['diverged_task']} diverged (normalized loss exceeded limit); see {out / 'metrics.jsonl'}")
        return EXIT_DIVERGED
    print(f"run {row['run']}: best epoch {row['best_epoch']}, best validation loss {row['best_val_loss']:.6g}")
    return EXIT_OK


def _cell_worker(job: tuple) -> dict:
    doc, text, path, seed, out_dir, run_id, cell, axes = job
    cfg = parse_config(doc, text, path)
    row = run_one(cfg, seed, Path(out_dir), run_id)
    row["cell"] = cell
    row.update(axes)
    return row


def cmd_sweep(args) -> int:
    doc, text, cfg = _load(args.config)
    if not cfg.grid:
        raise ConfigError("sweep needs a non-empty [sweep.grid]", args.config, locate(text, "sweep") or None)
    seeds = cfg.seeds or [cfg.train.seed if args.seed is None else args.seed]
    axes = list(cfg.grid)
    out = Path(args.out)
    jobs = []
    cells = list(itertools.product(*(cfg.grid[a] for a in axes)))
    for ci, values in enumerate(cells):
        cell_doc = copy.deepcopy({k: v for k, v in doc.items() if k != "sweep"})
        for axis, v in zip(axes, values):
            set_dotted(cell_doc, axis, v)
        for seed in seeds:
            cell_doc_seeded = {**cell_doc, "seed": seed}
            jobs.append(
                (cell_doc_seeded, text, args.config, seed, str(out / f"cell{ci:03d}" / f"seed{seed}"), f"cell{ci:03d}-s{seed}", ci, dict(zip(axes, values)))
            )
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_cell_worker, jobs))
    else:
        rows = [_cell_worker(j) for j in jobs]

    n_tasks = cfg.task.spec.n_tasks
    header = ["cell", *axes, *_summary_header(n_tasks)]
    out.mkdir(parents=True, exist_ok=True)
    export.write_csv(out / "summary.csv", header, [[r.get(h) for h in header] for r in rows])

    ranked = rank_cells(rows, axes)
    export.write_csv(
        out / "cells.csv",
        ["rank", "cell", *axes, "mean_best_val_loss", "n_seeds", "n_diverged"],
        [[c["rank"], c["cell"], *[c[a] for a in axes], c["mean_best_val_loss"], c["n_seeds"], c["n_diverged"]] for c in ranked],
    )
    best = ranked[0]
    export.write_json(out / "best_cell.json", best)
    print(f"sweep: {len(cells)} cells x {len(seeds)} seeds; best cell {best['cell']} ({', '.join(f'{a}={best[a]}' for a in axes)})")
    return EXIT_OK


def rank_cells(rows: Sequence[dict], axes: Sequence[str]) -> list[dict]:
    """Mean best validation loss per cell; diverged runs push a cell to the bottom."""
    by_cell: dict[int, list[dict]] = {}
    for r in rows:
        by_cell.setdefault(int(r["cell"]), []).append(r)
    cells = []
    for ci, rs in sorted(by_cell.items()):
        ok = [float(r["best_val_loss"]) for r in rs if r["status"] == "ok"]
        n_div = len(rs) - len(ok)
        mean = float(np.mean(ok)) if ok and not n_div else float("inf")
        cells.append({"cell": ci, **{a: rs[0][a] for a in axes}, "mean_best_val_loss": mean, "n_seeds": len(rs), "n_diverged": n_div})
    order = sorted(range(len(cells)), key=lambda i: (cells[i]["mean_best_val_loss"], cells[i]["cell"]))
    ranked = []
    for rank, i in enumerate(order, start=1):
        ranked.append({"rank": rank, **cells[i]})
    return ranked


_COMPARE_KEYS = {"a", "b", "metric", "lower_is_better", "alpha"}


def cmd_compare(args) -> int:
    if args.config is None:
        raise ConfigError("--config is required")
    text = load_text(args.config)
    doc = to_document(text, args.config)
    sec = doc.get("compare")
    if not isinstance(sec, dict):
        raise ConfigError("missing [compare] table", args.config, 1)
    for key in sec:
        if key not in _COMPARE_KEYS:
            raise ConfigError(f"unknown key {key!r} in [compare]", args.config, locate(text, "compare", key))
    for key in ("a", "b"):
        if not isinstance(sec.get(key), str):
            raise ConfigError(f"{key} must be the path of a summary.csv", args.config, locate(text, "compare", key))
    metric = sec.get("metric", "best_val_loss")
    lower = sec.get("lower_is_better", True)
    alpha = sec.get("alpha", 0.05)
    if not isinstance(lower, bool):
        raise ConfigError("lower_is_better must be true or false", args.config, locate(text, "compare", "lower_is_better"))
    if isinstance(alpha, bool) or not isinstance(alpha, (int, float)) or not 0 < alpha < 1:
        raise ConfigError("alpha must lie in (0, 1)", args.config, locate(text, "compare", "alpha"))
    base = Path(args.config).parent
    try:
        a = _by_seed(base / sec["a"], metric)
        b = _by_seed(base / sec["b"], metric)
    except (OSError, KeyError, ValueError) as exc:
        _err(f"error: {exc}")
        return EXIT_DATA
    seeds = sorted(set(a) & set(b))
    if len(seeds) < 2:
        _err("error: need at least two seeds present in both result sets")
        return EXIT_DATA
    xa, xb = [a[s] for s in seeds], [b[s] for s in seeds]
    # one-sided: is result set ``a`` better than ``b``?
    res = paired_ttest_one_sided(xb, xa, alpha) if lower else paired_ttest_one_sided(xa, xb, alpha)
    payload = {"metric": metric, "lower_is_better": lower, "alpha": alpha, "seeds": seeds, "a": xa, "b": xb, **res}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    export.write_json(out / "compare.json", payload)
    verdict = "degenerate (zero variance)" if res["degenerate"] else ("significant" if res["significant"] else "not significant")
    print(f"compare {metric}: t={res['t']:.6g} p={res['p']:.6g} n={len(seeds)} -> {verdict}")
    return EXIT_OK


def _by_seed(path: Path, metric: str) -> dict[int, float]:
    rows = export.read_csv(path)
    out: dict[int, float] = {}
    for r in rows:
        if r.get("status", "ok") != "ok":
            continue
        if metric not in r:
            raise KeyError(f"{path} has no column {metric!r}")
        seed = int(r["seed"])
        if seed in out:
            raise ValueError(f"{path} has several rows for seed {seed}; compare one cell at a time")
        out[seed] = float(r[metric])
    return out


_PROP1_KEYS = {"instances", "max_tasks", "max_dim", "step"}


def cmd_prop1(args) -> int:
    opts = {"instances": 500, "max_tasks": 5, "max_dim": 6, "step": 1e-4}
    if args.config is not None:
        text = load_text(args.config)
        doc = to_document(text, args.config)
        sec = doc.get("prop1", {})
        for key, val in sec.items():
            if key not in _PROP1_KEYS:
                raise ConfigError(f"unknown key {key!r} in [prop1]", args.config, locate(text, "prop1", key))
            if isinstance(val, bool) or not isinstance(val, (int, float)) or val <= 0:
                raise ConfigError(f"{key} must be a positive number", args.config, locate(text, "prop1", key))
            opts[key] = val
    seed = 0 if args.seed is None else args.seed
    rows = prop1_sweep(int(opts["instances"]), seed, int(opts["max_tasks"]), int(opts["max_dim"]), float(opts["step"]))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    header = list(rows[0])
    export.write_csv(out / "prop1.csv", header, [[r[h] for h in header] for r in rows])
    bad = sum(not r["all_decrease"] for r in rows)
    export.write_json(out / "prop1_summary.json", {"instances": len(rows), "counterexamples": bad, "seed": seed})
    print(f"prop1: {len(rows)} certified instances, {bad} counterexamples")
    return EXIT_OK


_SURFACE = {"avocado": ((-1.0, 2.0), (-1.0, 1.0), avocado), "nonconvex": ((-3.0, 1.5), (-3.0, 1.5), nonconvex)}
_DEMO_KEYS = {"seeds", "grid_points"}


def cmd_demo(args) -> int:
    seeds, points = [0 if args.seed is None else args.seed], 61
    if args.config is not None:
        text = load_text(args.config)
        doc = to_document(text, args.config)
        sec = doc.get("demo", {})
        for key in sec:
            if key not in _DEMO_KEYS:
                raise ConfigError(f"unknown key {key!r} in [demo]", args.config, locate(text, "demo", key))
        seeds = sec.get("seeds", seeds)
        points = sec.get("grid_points", points)
        if not isinstance(seeds, list) or not seeds or any(isinstance(s, bool) or not isinstance(s, int) or s < 0 for s in seeds):
            raise ConfigError("seeds must be a non-empty list of non-negative integers", args.config, locate(text, "demo", "seeds"))
        if isinstance(points, bool) or not isinstance(points, int) or points < 2:
            raise ConfigError("grid_points must be an integer >= 2", args.config, locate(text, "demo", "grid_points"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    traj_rows = []
    for kind in ("avocado", "nonconvex"):
        for method in ("vanilla", "rotograd"):
            for seed in seeds:
                traj_rows.extend(_trajectory(kind, method, seed))
    export.write_csv(
        out / "trajectories.csv",
        ["problem", "method", "seed", "step", "z_0", "z_1", "r1_0", "r1_1", "r2_0", "r2_1", "loss_1", "loss_2"],
        traj_rows,
    )

    surf_rows = []
    for kind, ((x0, x1), (y0, y1), fn) in _SURFACE.items():
        xs, ys = np.linspace(x0, x1, points), np.linspace(y0, y1, points)
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        grid = np.stack([gx.ravel(), gy.ravel()], axis=1)
        l1, l2 = fn(grid, 0.0), fn(grid, 1.0)
        for (x, y), a, b in zip(grid, l1, l2):
            surf_rows.append([kind, x, y, a, b, a + b])
    export.write_csv(out / "surface.csv", ["problem", "x", "y", "loss_1", "loss_2", "loss_sum"], surf_rows)
    print(f"demo: wrote {len(traj_rows)} trajectory rows and {len(surf_rows)} surface rows to {out}")
    return EXIT_OK


def _trajectory(kind: str, method: str, seed: int) -> list[list]:
    cfg = illustrative_config(kind, method == "rotograd", seed)
    exp = build(cfg, seed)
    model, rot_on = exp.state.model, cfg.train.rotations
    rows = []

    def snap(step: int) -> None:
        z, _ = forward_shared(model.backbone, exp.train.x)
        r = [apply(model.rotations, z, k) if rot_on else z for k in range(2)]
        losses = evaluate(model, exp.train, rot_on)
        rows.append([kind, method, seed, step, *z[0], *r[0][0], *r[1][0], *losses])

    snap(0)

    def sink(rec: dict) -> None:
        if rec["kind"] == "step":
            snap(rec["t"] + 1)

    fit(exp.state, exp.train, exp.val, sink=sink)
    return rows


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rotomtl", description="Multitask gradient-combination experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in [
        ("run", "train one configuration"),
        ("sweep", "grid x seeds sweep"),
        ("compare", "paired one-sided t-test between result sets"),
        ("prop1", "certificate sweep on random quadratic tasks"),
        ("demo", "trajectory and surface data for the test-function problems"),
    ]:
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", default=None, help="TOML configuration file")
        p.add_argument("--seed", type=int, default=None, help="override the configured seed")
        p.add_argument("--out", default=f"rotomtl-{name}", help="output directory")
        p.add_argument("--jobs", type=int, default=1, help="worker processes (sweep only)")
    return parser


_COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "compare": cmd_compare, "prop1": cmd_prop1, "demo": cmd_demo}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.seed is not None and args.seed < 0:
        _err("error: --seed must be non-negative")
        return EXIT_CONFIG
    if args.jobs < 1:
        _err("error: --jobs must be >= 1")
        return EXIT_CONFIG
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        _err(f"config error: {exc}")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
