"""Command-line entry point.

Machine-readable progress goes to stdout as one JSON object per line;
human-readable logging goes to stderr. Every command echoes its fully
resolved configuration to <out-dir>/resolved_config.json before doing
any work. Flag values beat config-file values, which beat defaults; the
MNIST directory can also come from the PRUNEKIT_DATA_DIR environment
variable. Failures print a single JSON error record and exit nonzero.
"""

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint, pruning, reports
from . import graph as G
from . import schedule as S
from .data import load_mnist
from .kernels import ACTIVE_BACKEND

log = logging.getLogger("prunekit")

DATA_ENV_VAR = "PRUNEKIT_DATA_DIR"

CONFIG_FIELDS = [f.name for f in dataclasses.fields(S.ScheduleConfig)]


def _emit(obj):
    print(json.dumps(obj, sort_keys=True), flush=True)


def _add_common(parser):
    parser.add_argument("--data-dir", help=f"MNIST directory (or ${DATA_ENV_VAR})")
    parser.add_argument("--out-dir", default="runs/out", help="artifact directory")
    parser.add_argument("--seed", type=int, help="master seed (default 0)")
    parser.add_argument("--config", help="JSON config file; flags override it")
    parser.add_argument("--variant", choices=pruning.VARIANTS)
    parser.add_argument("--p-start", type=float)
    parser.add_argument("--p-step", type=float)
    parser.add_argument("--p-max", type=float)
    parser.add_argument("--epsilon", type=float,
                        help="tolerated accuracy drop, percentage points")
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--retrain-epochs", type=int)
    parser.add_argument("--batch-size", type=int)
    parser.add_argument("--lr", type=float, help="baseline learning rate")
    parser.add_argument("--retrain-lr", type=float)
    parser.add_argument("--momentum", type=float)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="prunekit",
        description="Train a small MNIST CNN and compress it by structured "
        "global pruning with iterative retraining.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train the baseline model")
    _add_common(p_train)

    p_prune = sub.add_parser("prune", help="prune a trained model")
    p_prune.add_argument("mode", choices=["iterative", "oneshot"])
    p_prune.add_argument("--baseline", help="baseline checkpoint; trained if absent")
    p_prune.add_argument("--p", type=float, help="target fraction for oneshot mode")
    _add_common(p_prune)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    _add_common(p_eval)

    p_ablate = sub.add_parser(
        "ablate", help="run the pruning-variant matrix against one baseline"
    )
    p_ablate.add_argument("--baseline", required=True)
    p_ablate.add_argument("--p", type=float, required=True,
                          help="matched prune fraction for all variants")
    _add_common(p_ablate)

    p_compact = sub.add_parser(
        "compact", help="physically remove masked units from a checkpoint"
    )
    p_compact.add_argument("--checkpoint", required=True)
    _add_common(p_compact)
    return parser


def resolve_config(args):
    """Defaults < config file < explicit flags; returns (cfg, extras)."""
    values = {}
    extras = {"data_dir": None}
    if args.config:
        loaded = json.loads(Path(args.config).read_text())
        unknown = set(loaded) - set(CONFIG_FIELDS) - {"data_dir"}
        if unknown:
            raise ValueError(f"unknown config keys in {args.config}: {sorted(unknown)}")
        extras["data_dir"] = loaded.pop("data_dir", None)
        values.update(loaded)
    flag_map = {
        "variant": "variant", "p_start": "p_start", "p_step": "p_step",
        "p_max": "p_max", "epsilon": "epsilon", "epochs": "epochs",
        "retrain_epochs": "retrain_epochs", "batch_size": "batch_size",
        "lr": "base_lr", "retrain_lr": "retrain_lr", "momentum": "momentum",
        "seed": "master_seed",
    }
    for flag, field in flag_map.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[field] = v
    if args.data_dir is not None:
        extras["data_dir"] = args.data_dir
    if extras["data_dir"] is None:
        extras["data_dir"] = os.environ.get(DATA_ENV_VAR)
    cfg = S.ScheduleConfig(**values)
    cfg.validate()
    return cfg, extras


def _write_resolved(cfg, extras, args, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = dataclasses.asdict(cfg)
    resolved["data_dir"] = extras["data_dir"]
    resolved["out_dir"] = str(out_dir)
    resolved["command"] = args.command
    resolved["backend"] = ACTIVE_BACKEND
    (out_dir / "resolved_config.json").write_text(
        json.dumps(resolved, sort_keys=True, indent=1) + "\n"
    )
    return resolved


def _require_data(extras):
    if not extras["data_dir"]:
        raise ValueError(
            f"no data directory: pass --data-dir, set it in --config, "
            f"or export {DATA_ENV_VAR}"
        )
    return extras["data_dir"]


def _load_data(extras):
    data_dir = _require_data(extras)
    return load_mnist(data_dir, "train"), load_mnist(data_dir, "test")


def _train_baseline(cfg, extras, out_dir, progress):
    train_ds, test_ds = _load_data(extras)
    model = G.build_lenet5(S.derive_seed(cfg.master_seed, S.PHASE_INIT))
    t0 = time.time()
    best_acc, accs = S.train_baseline(model, train_ds, test_ds, cfg, progress)
    path = checkpoint.save_checkpoint(
        model,
        {
            "baseline_accuracy": best_acc,
            "master_seed": cfg.master_seed,
            "epochs": cfg.epochs,
            "variant": cfg.variant,
        },
        Path(out_dir) / "baseline.ckpt",
    )
    _emit(
        {
            "event": "trained",
            "baseline_accuracy": best_acc,
            "error_pct": 100.0 * (1.0 - best_acc),
            "epochs": cfg.epochs,
            "seconds": round(time.time() - t0, 3),
            "checkpoint": str(path),
        }
    )
    return model, best_acc, (train_ds, test_ds)


def cmd_train(args):
    cfg, extras = resolve_config(args)
    _write_resolved(cfg, extras, args, args.out_dir)
    _train_baseline(cfg, extras, args.out_dir, _emit)
    return 0


def _load_baseline(args, cfg, extras, out_dir):
    if args.baseline:
        model, state = checkpoint.load_checkpoint(args.baseline)
        data = _load_data(extras)
        acc = state.get("baseline_accuracy")
        if acc is None:
            acc = S.evaluate(model, data[1])
        return model, float(acc), data
    log.info("no --baseline given, training one first")
    return _train_baseline(cfg, extras, out_dir, _emit)


def _emit_run_reports(model, history, cfg, test_ds, out_dir):
    stats = reports.param_stats(model, cfg.variant)
    pattern = reports.pruning_pattern(model)
    evolution = reports.weight_evolution(history)
    hist = reports.neuron_histogram(model, test_ds)
    paths = reports.emit_report(
        Path(out_dir) / "reports", stats,
        pattern=pattern, evolution=evolution,
        histograms={cfg.variant: hist},
    )
    return stats, [str(p) for p in paths]


def cmd_prune(args):
    cfg, extras = resolve_config(args)
    _write_resolved(cfg, extras, args, args.out_dir)
    model, baseline_acc, (train_ds, test_ds) = _load_baseline(
        args, cfg, extras, args.out_dir
    )
    if args.mode == "iterative":
        model, history = S.iterative_prune(
            model, train_ds, test_ds, cfg, baseline_acc,
            progress=_emit, checkpoint_dir=Path(args.out_dir) / "iterations",
        )
    else:
        p = args.p if args.p is not None else cfg.p_start
        model, history = S.oneshot_prune(
            model, train_ds, test_ds, p, cfg, baseline_acc, progress=_emit
        )
    final_acc = S.evaluate(model, test_ds)
    history.save(Path(args.out_dir) / "history.json")
    ckpt = checkpoint.save_checkpoint(
        model,
        {
            "baseline_accuracy": baseline_acc,
            "final_accuracy": final_acc,
            "variant": cfg.variant,
            "mode": args.mode,
            "master_seed": cfg.master_seed,
        },
        Path(args.out_dir) / "final.ckpt",
    )
    stats, report_paths = _emit_run_reports(model, history, cfg, test_ds, args.out_dir)
    _emit(
        {
            "event": "pruned",
            "mode": args.mode,
            "variant": cfg.variant,
            "baseline_accuracy": baseline_acc,
            "final_accuracy": final_acc,
            "param_pruned_pct": stats.param_pruned_pct,
            "effective_pruned_pct": stats.effective_pruned_pct,
            "flagged": history.flagged,
            "checkpoint": str(ckpt),
            "history": str(Path(args.out_dir) / "history.json"),
            "reports": report_paths,
        }
    )
    return 0


def cmd_eval(args):
    cfg, extras = resolve_config(args)
    _write_resolved(cfg, extras, args, args.out_dir)
    model, state = checkpoint.load_checkpoint(args.checkpoint)
    _, test_ds = _load_data(extras)
    acc = S.evaluate(model, test_ds)
    variant = state.get("variant", cfg.variant)
    stats = reports.param_stats(model, variant)
    _emit(
        {
            "event": "eval",
            "checkpoint": args.checkpoint,
            "accuracy": acc,
            "error_pct": 100.0 * (1.0 - acc),
            "total_params": stats.total_params,
            "unmasked_params": stats.unmasked_params,
            "param_pruned_pct": stats.param_pruned_pct,
            "effective_pruned_pct": stats.effective_pruned_pct,
        }
    )
    return 0


ABLATION_MATRIX = (
    # label, variant, schedule
    ("non-structured", "global-weight", "oneshot"),
    ("non-global", "layerwise-structured", "oneshot"),
    ("oneshot", "global-structured", "oneshot"),
    ("iterative", "global-structured", "iterative"),
)


def cmd_ablate(args):
    cfg, extras = resolve_config(args)
    _write_resolved(cfg, extras, args, args.out_dir)
    train_ds, test_ds = _load_data(extras)
    p = args.p
    rows = []
    histograms = {}
    for label, variant, mode in ABLATION_MATRIX:
        model, state = checkpoint.load_checkpoint(args.baseline)
        baseline_acc = float(state.get("baseline_accuracy") or S.evaluate(model, test_ds))
        run_cfg = dataclasses.replace(cfg, variant=variant)
        log.info("ablation %s: %s %s at p=%.4f", label, variant, mode, p)
        if mode == "iterative":
            # Tolerance is disabled so the run reaches the matched
            # fraction p; the matrix compares equal-p variants.
            run_cfg = dataclasses.replace(run_cfg, p_max=p, epsilon=float("inf"))
            if run_cfg.p_start > p:
                run_cfg = dataclasses.replace(run_cfg, p_start=p)
            model, history = S.iterative_prune(
                model, train_ds, test_ds, run_cfg, baseline_acc
            )
        else:
            model, history = S.oneshot_prune(
                model, train_ds, test_ds, p, run_cfg, baseline_acc
            )
        acc = history.records[history.final_iteration].post_retrain_accuracy
        stats = reports.param_stats(model, variant)
        histograms[label] = reports.neuron_histogram(model, test_ds)
        checkpoint.save_checkpoint(
            model,
            {
                "baseline_accuracy": baseline_acc,
                "final_accuracy": acc,
                "variant": variant,
                "mode": mode,
                "master_seed": cfg.master_seed,
            },
            Path(args.out_dir) / label / "final.ckpt",
        )
        history.save(Path(args.out_dir) / label / "history.json")
        row = {
            "label": label,
            "variant": variant,
            "schedule": mode,
            "baseline_accuracy": baseline_acc,
            "accuracy": acc,
            "error_pct": 100.0 * (1.0 - acc),
            "param_pruned_pct": stats.param_pruned_pct,
            "effective_pruned_pct": stats.effective_pruned_pct,
        }
        rows.append(row)
        _emit({"event": "ablation", **row})
    out = Path(args.out_dir) / "ablate.json"
    out.write_text(json.dumps(rows, sort_keys=True, indent=1) + "\n")
    last_stats = reports.param_stats(checkpoint.load_checkpoint(args.baseline)[0], cfg.variant)
    reports.emit_report(Path(args.out_dir) / "reports", last_stats, histograms=histograms)
    _emit({"event": "ablated", "table": str(out), "rows": len(rows)})
    return 0


def cmd_compact(args):
    cfg, extras = resolve_config(args)
    _write_resolved(cfg, extras, args, args.out_dir)
    model, state = checkpoint.load_checkpoint(args.checkpoint)
    dense_model = pruning.compact(model)
    if extras["data_dir"]:
        test_ds = load_mnist(extras["data_dir"], "test")
        sample = test_ds.images[:1024]
        source = "test split"
    else:
        rng = np.random.Generator(np.random.PCG64(cfg.master_seed))
        sample = rng.normal(size=(256, *model.input_shape))
        source = "synthetic probe"
    before = model.forward(sample).data
    after = dense_model.forward(sample).data
    max_diff = float(np.max(np.abs(before - after))) if before.size else 0.0
    if max_diff > 1e-9:
        raise ArithmeticError(
            f"compaction changed outputs by {max_diff:.3e} (> 1e-9) on {source}"
        )
    path = checkpoint.save_checkpoint(
        dense_model,
        {**state, "compacted": True},
        Path(args.out_dir) / "compact.ckpt",
    )
    _emit(
        {
            "event": "compacted",
            "checkpoint": str(path),
            "max_abs_diff": max_diff,
            "probe": source,
            "params_before_total": model.param_count("total"),
            "params_before_unmasked": model.param_count("unmasked"),
            "params_after": dense_model.param_count("total"),
        }
    )
    return 0


COMMANDS = {
    "train": cmd_train,
    "prune": cmd_prune,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "compact": cmd_compact,
}


def main(argv=None):
    logging.basicConfig(
        stream=sys.stderr, level=logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    args = build_parser().parse_args(argv)
    log.info("backend: %s", ACTIVE_BACKEND)
    try:
        return COMMANDS[args.command](args)
    except Exception as exc:
        log.exception("command failed")
        _emit({"event": "error", "error": str(exc), "type": type(exc).__name__})
        return 1


if __name__ == "__main__":
    sys.exit(main())
