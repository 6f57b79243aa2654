"""Command-line entry point.

Subcommands: gen-synth, train, eval, export-gates, export-embeddings,
ablation, sweep, gradcheck.  Exit codes are a stable contract: 0 success,
2 config/argument error, 3 I/O or file-format error, 4 numeric failure,
5 verification failure.  Every csv output starts with a ``# config=...``
comment carrying the resolved configuration.  ``SPARSE_SME_THREADS`` caps
worker threads for ablation/sweep rows (default 1, fully deterministic).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import (
    Dataset,
    gen_synthetic,
    read_dataset,
    split_dataset,
    write_dataset,
)
from .errors import (
    ConfigError,
    DataError,
    FormatError,
    NumericError,
    UnknownRegionError,
    UnknownTaskError,
)
from .metrics import TaskMetrics
from .model import (
    ModelConfig,
    backward,
    build_model,
    eligible_count,
    expert_pool_kinds,
    forward_batch,
    single_task_config,
)
from .numcore import Rng, grad_check_report
from .train import (
    EPSILON_SWEEP_DEFAULT,
    REFERENCE_ALLOCATIONS,
    REGION_DIM_SWEEP_DEFAULT,
    AblationRow,
    TrainConfig,
    check_allocation_budget,
    evaluate,
    mean_active_counts,
    region_capacity,
    run_multi_seed,
    train,
)

_DATA_DEFAULTS = {
    "split_seed": 0,
    "split_ratios": [0.6, 0.2, 0.2],
    "transform": None,  # per-task list overriding the dataset manifest
    "metrics_space": "transformed",  # or "raw"
}

BUILTIN_ABLATION_SPECS = {"paper-appendix-b": REFERENCE_ALLOCATIONS}
BUILTIN_SWEEP_SPECS = {
    "paper-appendix-c-epsilon": ("epsilon", EPSILON_SWEEP_DEFAULT),
    "paper-appendix-c-dr": ("d_r", REGION_DIM_SWEEP_DEFAULT),
}


def _worker_count() -> int:
    raw = os.environ.get("SPARSE_SME_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"SPARSE_SME_THREADS={raw!r} is not an integer") from None


def _load_run_config(path: str | None) -> dict:
    """Parse the JSON run config; unknown sections/keys are rejected and
    every defaulted key is logged once to stderr."""
    payload = {}
    if path:
        try:
            payload = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(payload, dict):
        raise ConfigError("run config must be a JSON object")
    unknown = set(payload) - {"model", "train", "data"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    model = dict(payload.get("model", {}))
    train_ = dict(payload.get("train", {}))
    data = dict(payload.get("data", {}))
    bad = set(data) - set(_DATA_DEFAULTS)
    if bad:
        raise ConfigError(f"unknown data config keys: {sorted(bad)}")

    defaulted = []
    for key, value in _DATA_DEFAULTS.items():
        if key not in data:
            data[key] = value
            defaulted.append(f"data.{key}={value}")
    for key, f in TrainConfig.__dataclass_fields__.items():
        if key not in train_:
            defaulted.append(f"train.{key}")
    if defaulted:
        print(f"config defaults applied for: {', '.join(defaulted)}", file=sys.stderr)
    return {"model": model, "train": train_, "data": data}


def _resolve_model_config(model_payload: dict, dataset: Dataset) -> ModelConfig:
    """Fill d_e / poi_categories / tasks from the dataset, then parse."""
    payload = dict(model_payload)
    for key, value in (
        ("d_e", dataset.d_e),
        ("poi_categories", dataset.poi_categories),
        ("tasks", list(dataset.task_names)),
    ):
        if key in payload and payload[key] != value:
            raise ConfigError(
                f"config {key}={payload[key]!r} conflicts with dataset {key}={value!r}"
            )
        payload[key] = value
    return ModelConfig.from_dict(payload)


def _parse_mode(mode: str, config: ModelConfig) -> ModelConfig:
    if mode == "mt":
        return config
    if mode.startswith("st:"):
        task = mode.split(":", 1)[1]
        if task not in config.tasks:
            raise ConfigError(f"--mode names unknown task {task!r}")
        return single_task_config(config, task)
    raise ConfigError(f"--mode must be 'mt' or 'st:<task>', got {mode!r}")


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


def _write_csv(path, header, rows, config: dict) -> None:
    lines = ["# config=" + json.dumps(config, sort_keys=True, separators=(",", ":"))]
    lines.append(",".join(header))
    lines.extend(",".join(_fmt(v) for v in row) for row in rows)
    Path(path).write_text("\n".join(lines) + "\n")


def _metric_columns(tasks) -> list[str]:
    cols = []
    for t in tasks:
        cols += [f"{t}_r2", f"{t}_rmse", f"{t}_mae"]
    return cols + ["avg_r2", "avg_rmse", "avg_mae"]


def _metric_values(m: TaskMetrics) -> list[float]:
    vals = []
    for i in range(len(m.task_names)):
        vals += [m.r2[i], m.rmse[i], m.mae[i]]
    return vals + [m.avg_r2, m.avg_rmse, m.avg_mae]


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_synth(args) -> int:
    dataset = gen_synthetic(
        n_regions=args.regions,
        d_e=args.d_e,
        poi_categories=args.categories,
        latent_dim=args.latent,
        noise_std=args.noise,
        seed=args.seed,
    )
    write_dataset(dataset, args.out, format="urf1")
    print(f"wrote {args.regions} regions to {args.out}")
    return 0


def cmd_train(args) -> int:
    dataset = read_dataset(args.data)
    run_cfg = _load_run_config(args.config)
    data_cfg = run_cfg["data"]
    if data_cfg["transform"] is not None:
        dataset.transform_spec = list(data_cfg["transform"])
        dataset.validate()
    model_cfg = _parse_mode(args.mode, _resolve_model_config(run_cfg["model"], dataset))
    train_cfg = TrainConfig.from_dict(run_cfg["train"])
    split = split_dataset(dataset, tuple(data_cfg["split_ratios"]), data_cfg["split_seed"])

    seed = train_cfg.seeds[0]
    model = build_model(model_cfg, region_capacity(dataset), Rng(seed))
    result = train(model, dataset, split, train_cfg, shuffle_seed=seed)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = {
        "mode": args.mode,
        "model": model_cfg.to_dict(),
        "train": train_cfg.to_dict(),
        "data": data_cfg,
    }

    tasks = model_cfg.active_tasks
    has_val = bool(split.val)
    header = ["epoch", "train_loss"] + (_metric_columns(tasks) if has_val else [])
    rows = []
    for epoch, loss in enumerate(result.history.train_loss):
        row = [epoch, loss]
        if has_val:
            row += _metric_values(result.history.val_metrics[epoch])
        rows.append(row)
    _write_csv(out_dir / "history.csv", header, rows, resolved)

    save_checkpoint(out_dir / "model.ckpt", result.model, result.transform, split, resolved)

    summary = {
        "config": resolved,
        "best_epoch": result.history.best_epoch,
        "epochs_run": len(result.history.train_loss),
        "final_train_loss": result.history.train_loss[-1],
        "wall_seconds": result.history.wall_seconds,
        "parameters": len(result.model.tape),
    }
    if has_val:
        best = result.history.val_metrics[result.history.best_epoch]
        summary["best_val"] = dict(zip(_metric_columns(tasks), _metric_values(best)))
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"trained {len(result.history.train_loss)} epochs; "
          f"best epoch {result.history.best_epoch}; artifacts in {out_dir}")
    return 0


def _load_eval_inputs(args) -> tuple[Checkpoint, Dataset, list[int]]:
    ckpt = load_checkpoint(args.checkpoint)
    dataset = read_dataset(args.data)
    cfg = ckpt.model.config
    if dataset.d_e != cfg.d_e or dataset.poi_categories != cfg.poi_categories:
        raise ConfigError(
            f"checkpoint expects d_e={cfg.d_e}, C={cfg.poi_categories}; "
            f"dataset has d_e={dataset.d_e}, C={dataset.poi_categories}"
        )
    if args.split == "all":
        indices = list(range(dataset.n_regions))
    else:
        indices = ckpt.split.indices(args.split)
    if not indices:
        raise ConfigError(f"split {args.split!r} is empty in this checkpoint")
    return ckpt, dataset, indices


def cmd_eval(args) -> int:
    ckpt, dataset, indices = _load_eval_inputs(args)
    metrics = evaluate(ckpt.model, dataset, indices, ckpt.transform, raw_space=args.raw_space)
    header = ["task", "r2", "rmse", "mae"]
    rows = [
        [task, metrics.r2[i], metrics.rmse[i], metrics.mae[i]]
        for i, task in enumerate(metrics.task_names)
    ]
    rows.append(["AVG", metrics.avg_r2, metrics.avg_rmse, metrics.avg_mae])
    _write_csv(args.out, header, rows, ckpt.run_config)
    print(f"{'task':>12}  {'r2':>9}  {'rmse':>9}  {'mae':>9}")
    for row in rows:
        print(f"{row[0]:>12}  {row[1]:>9.4f}  {row[2]:>9.4f}  {row[3]:>9.4f}")
    return 0


def cmd_export_gates(args) -> int:
    ckpt, dataset, indices = _load_eval_inputs(args)
    model = ckpt.model
    records = [dataset.records[i] for i in indices]
    state = forward_batch(model, records)
    kinds = expert_pool_kinds(model.config)
    rows = []
    for b, rec in enumerate(records):
        for branch_label, bs in state.branches.items():
            branch = model.branch(branch_label)
            for task in model.config.active_tasks:
                for j, pool_idx in enumerate(branch.eligible[task]):
                    rows.append(
                        [
                            rec.region_index,
                            task,
                            branch_label,
                            pool_idx,
                            kinds[pool_idx].label(),
                            bs.raw[task][b, j],
                            bs.masked[task][b, j],
                        ]
                    )
    header = ["region_id", "task", "branch", "expert_index", "expert_kind", "raw_gate", "masked_gate"]
    _write_csv(args.out, header, rows, ckpt.run_config)

    # aggregate: mean gates and activation rates per (task, branch, expert)
    agg_rows = []
    for branch_label, bs in state.branches.items():
        branch = model.branch(branch_label)
        for task in model.config.active_tasks:
            raw, masked = bs.raw[task], bs.masked[task]
            for j, pool_idx in enumerate(branch.eligible[task]):
                agg_rows.append(
                    [
                        task,
                        branch_label,
                        pool_idx,
                        kinds[pool_idx].label(),
                        float(raw[:, j].mean()),
                        float(masked[:, j].mean()),
                        float((masked[:, j] > 0).mean()),
                    ]
                )
    agg_path = Path(str(args.out) + ".agg.csv")
    _write_csv(
        agg_path,
        ["task", "branch", "expert_index", "expert_kind", "mean_raw_gate", "mean_masked_gate", "activation_rate"],
        agg_rows,
        ckpt.run_config,
    )
    print(f"wrote {len(rows)} gate rows to {args.out} (aggregate: {agg_path})")
    return 0


def cmd_export_embeddings(args) -> int:
    ckpt, dataset, indices = _load_eval_inputs(args)
    model = ckpt.model
    records = [dataset.records[i] for i in indices]
    state = forward_batch(model, records)
    d_u = model.config.expert_out
    rows = []
    for b, rec in enumerate(records):
        for branch_label, bs in state.branches.items():
            branch = model.branch(branch_label)
            for task in model.config.active_tasks:
                masked = bs.masked[task]
                for j, pool_idx in enumerate(branch.eligible[task]):
                    if masked[b, j] <= 0:
                        continue
                    cache = bs.experts[pool_idx]
                    local = int(np.searchsorted(cache.rows, b))
                    rows.append(
                        [rec.region_index, task, branch_label, f"expert_{pool_idx}"]
                        + cache.y[local].tolist()
                    )
                rows.append(
                    [rec.region_index, task, branch_label, "fused"]
                    + bs.fused[task][b].tolist()
                )
    header = ["region_id", "task", "branch", "source"] + [f"u_{i}" for i in range(d_u)]
    _write_csv(args.out, header, rows, ckpt.run_config)
    print(f"wrote {len(rows)} embedding rows to {args.out}")
    return 0


def _prepare_harness(args):
    dataset = read_dataset(args.data)
    run_cfg = _load_run_config(args.config)
    data_cfg = run_cfg["data"]
    if data_cfg["transform"] is not None:
        dataset.transform_spec = list(data_cfg["transform"])
        dataset.validate()
    model_cfg = _resolve_model_config(run_cfg["model"], dataset)
    train_cfg = TrainConfig.from_dict(run_cfg["train"])
    split = split_dataset(dataset, tuple(data_cfg["split_ratios"]), data_cfg["split_seed"])
    resolved = {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(), "data": data_cfg}
    return dataset, model_cfg, train_cfg, split, resolved


def _parse_ablation_spec(spec: str) -> list[AblationRow]:
    if spec in BUILTIN_ABLATION_SPECS:
        return list(BUILTIN_ABLATION_SPECS[spec])
    path = Path(spec)
    if not path.exists():
        raise ConfigError(
            f"--spec {spec!r} is neither a builtin "
            f"({sorted(BUILTIN_ABLATION_SPECS)}) nor a file"
        )
    try:
        rows = json.loads(path.read_text())
        return [AblationRow(int(a), int(b), int(c)) for a, b, c in rows]
    except (json.JSONDecodeError, TypeError, ValueError) as exc:
        raise ConfigError(f"{spec}: expected JSON rows of [n_specific, n_shared, n_dual] ({exc})") from None


def cmd_ablation(args) -> int:
    dataset, model_cfg, train_cfg, split, resolved = _prepare_harness(args)
    rows = _parse_ablation_spec(args.spec)
    check_allocation_budget(rows, len(model_cfg.tasks), eligible_count(model_cfg))
    eval_split = args.eval_split

    def run_row(row: AblationRow):
        cfg = replace(model_cfg, n_specific=row.n_specific, n_shared=row.n_shared, n_dual=row.n_dual)
        return run_multi_seed(dataset, cfg, train_cfg, split, eval_split).mean

    workers = _worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            metrics = list(pool.map(run_row, rows))
    else:
        metrics = [run_row(row) for row in rows]

    header = ["n_specific", "n_shared", "n_dual"] + _metric_columns(model_cfg.tasks)
    out_rows = [
        [row.n_specific, row.n_shared, row.n_dual] + _metric_values(m)
        for row, m in zip(rows, metrics)
    ]
    _write_csv(args.out, header, out_rows, {**resolved, "spec": args.spec})
    print(f"wrote {len(out_rows)} ablation rows to {args.out}")
    return 0


def cmd_sweep(args) -> int:
    dataset, model_cfg, train_cfg, split, resolved = _prepare_harness(args)
    if args.spec:
        if args.spec not in BUILTIN_SWEEP_SPECS:
            raise ConfigError(
                f"--spec {args.spec!r} unknown; builtins: {sorted(BUILTIN_SWEEP_SPECS)}"
            )
        axis, values = BUILTIN_SWEEP_SPECS[args.spec]
    else:
        if not args.axis or args.values is None:
            raise ConfigError("sweep needs --spec or both --axis and --values")
        axis = args.axis
        try:
            values = [float(v) if axis == "epsilon" else int(v) for v in args.values.split(",")]
        except ValueError:
            raise ConfigError(f"--values {args.values!r} is not a comma-separated number list") from None
    eval_split = args.eval_split

    def run_value(value):
        cfg = replace(model_cfg, **{axis: value}).validate()
        result = run_multi_seed(dataset, cfg, train_cfg, split, eval_split)
        counts_per_seed = [
            mean_active_counts(r.model, dataset, split.indices(eval_split))
            for r in result.results
        ]
        counts = {
            t: float(np.mean([c[t] for c in counts_per_seed])) for t in cfg.active_tasks
        }
        return result.mean, counts

    workers = _worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run_value, values))
    else:
        outcomes = [run_value(v) for v in values]

    header = (
        ["value"]
        + _metric_columns(model_cfg.tasks)
        + [f"{t}_active_count" for t in model_cfg.tasks]
    )
    out_rows = [
        [value] + _metric_values(m) + [counts[t] for t in model_cfg.tasks]
        for value, (m, counts) in zip(values, outcomes)
    ]
    _write_csv(args.out, header, out_rows, {**resolved, "axis": axis})
    print(f"wrote {len(out_rows)} sweep rows to {args.out}")
    return 0


def gradcheck_model_config() -> ModelConfig:
    """Smooth micro-model used by the gradient verification command."""
    return ModelConfig(
        d_e=4,
        d_r=2,
        d_p=2,
        poi_categories=3,
        n_specific=1,
        n_dual=1,
        n_shared=1,
        expert_hidden=8,
        expert_out=4,
        head_hidden=8,
        activation="tanh",
        sigma="identity",
    )


def cmd_gradcheck(args) -> int:
    config = gradcheck_model_config()
    dataset = gen_synthetic(
        4, d_e=config.d_e, poi_categories=config.poi_categories, latent_dim=3, seed=args.seed
    )
    model = build_model(config, 4, Rng(args.seed))
    records = dataset.records
    targets = dataset.labels_matrix()
    lam = {t: 1.0 for t in config.tasks}

    def f():
        loss = backward(model, records, targets, lam)
        if args.corrupt:
            model.tape.grads[0] += 0.5
        return loss

    report = grad_check_report(f, model.tape, h=1e-5)
    worst_slice = max(report, key=report.get)
    worst = report[worst_slice]
    for name in sorted(report):
        print(f"{report[name]:.3e}  {name}")
    print(f"max relative error: {worst:.3e} ({worst_slice})")
    if worst < 1e-4:
        print("gradient check passed")
        return 0
    print(f"gradient check FAILED: worst slice {worst_slice!r}", file=sys.stderr)
    return 5


# ---------------------------------------------------------------------------
# parser / entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparse-sme",
        description="Multi-task sparse mixture-of-experts training and evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate a synthetic dataset (urf1 + manifest)")
    p.add_argument("--out", required=True)
    p.add_argument("--regions", type=int, default=2000)
    p.add_argument("--d-e", dest="d_e", type=int, default=16)
    p.add_argument("--categories", type=int, default=15)
    p.add_argument("--latent", type=int, default=8)
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train", help="train a model and write checkpoint + history")
    p.add_argument("--config", default=None, help="JSON run config")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--mode", default="mt", help="mt or st:<task>")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a stored split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    p.add_argument("--out", default="metrics.csv")
    p.add_argument("--raw-space", action="store_true", help="invert the target transform first")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-gates", help="per-record router weights + aggregate rates")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="all", choices=["train", "val", "test", "all"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_gates)

    p = sub.add_parser("export-embeddings", help="active expert outputs and fused vectors")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="all", choices=["train", "val", "test", "all"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_embeddings)

    p = sub.add_parser("ablation", help="expert-allocation study at a fixed budget")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--spec", required=True, help="builtin name or JSON file of [n_sp,n_sh,n_dt] rows")
    p.add_argument("--out", required=True)
    p.add_argument("--eval-split", default="test", choices=["train", "val", "test"])
    p.set_defaults(func=cmd_ablation)

    p = sub.add_parser("sweep", help="hyperparameter sweep (epsilon or d_r)")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--spec", default=None, help="builtin sweep name")
    p.add_argument("--axis", default=None, choices=["epsilon", "d_r"])
    p.add_argument("--values", default=None, help="comma-separated axis values")
    p.add_argument("--out", required=True)
    p.add_argument("--eval-split", default="test", choices=["train", "val", "test"])
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full gradient")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (FormatError, DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4
    except (ConfigError, UnknownTaskError, UnknownRegionError, ValueError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
