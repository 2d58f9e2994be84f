"""Compression accounting and analysis reports.

Percentages here are parameter-mask percentages. For weight-granularity
runs an "effective" figure is also reported: masking a whole unit
removes its successor-side weights as well, so to compare a
weight-granularity percentage x against structured numbers it is
deflated to max(0, 100 - 2*(100 - x)), i.e. the unremoved share is
counted twice. Structured runs report their percentage unchanged.
"""

import csv
import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

REPORT_SCHEMA_VERSION = 1

DEFAULT_BIN_EDGES = tuple(np.geomspace(1e-6, 10.0, 15))


def effective_pruned_pct(pct, variant):
    """Deflate a weight-granularity percentage for structured comparisons."""
    if variant in ("global-weight", "layerwise-weight"):
        return max(0.0, 100.0 - 2.0 * (100.0 - pct))
    return pct


@dataclass
class CompressionStats:
    variant: str
    total_params: int
    unmasked_params: int
    param_pruned_pct: float
    effective_pruned_pct: float


def param_stats(model, variant):
    """Mask-based parameter accounting for one model."""
    total = model.param_count("total")
    unmasked = model.param_count("unmasked")
    pct = 100.0 * (1.0 - unmasked / total)
    return CompressionStats(
        variant=variant,
        total_params=total,
        unmasked_params=unmasked,
        param_pruned_pct=pct,
        effective_pruned_pct=effective_pruned_pct(pct, variant),
    )


def pruning_pattern(model):
    """Per trainable layer: fraction of units masked and of weights masked.

    The weight fraction covers weight entries only; biases are excluded
    from it (they follow the unit fraction one-for-one anyway). The
    classifier row always has unit fraction 0, but its weight fraction
    moves when the preceding layer's units are pruned.
    """
    rows = []
    for spec in model.trainable_specs():
        unit_mask = model.masks.unit(spec.id)
        wmask = model.masks.for_param(spec.id, "weight")
        rows.append(
            {
                "layer_id": spec.id,
                "layer_name": spec.name,
                "unit_fraction": 1.0 - float(unit_mask.sum()) / unit_mask.size,
                "weight_fraction": 1.0 - float(wmask.sum()) / wmask.size,
            }
        )
    return rows


def weight_evolution(history):
    """Mean |unmasked weight| per layer per iteration; iteration 0 is baseline."""
    rows = []
    for snap in history.baseline_layers:
        rows.append(
            {
                "iteration": 0,
                "layer_id": snap.layer_id,
                "layer_name": snap.name,
                "mean_abs_weight": snap.mean_abs_weight,
            }
        )
    for rec in history.records:
        for snap in rec.layers:
            rows.append(
                {
                    "iteration": rec.iteration + 1,
                    "layer_id": snap.layer_id,
                    "layer_name": snap.name,
                    "mean_abs_weight": snap.mean_abs_weight,
                }
            )
    return rows


def neuron_histogram(model, dataset, bin_edges=None, batch_size=512):
    """Histogram of mean |post-relu activation| across all hidden units.

    Each prunable unit contributes one value: its activation magnitude
    averaged over every evaluation element (batch and spatial positions).
    Bins are [0, e0), [e0, e1), ..., [eN, inf), so units silenced by
    pruning land in the lowest bin. Default edges are geometric between
    1e-6 and 10.
    """
    edges = list(DEFAULT_BIN_EDGES if bin_edges is None else bin_edges)
    if sorted(edges) != edges or len(edges) < 1:
        raise ValueError(f"bin edges must be ascending and non-empty: {edges}")
    collect = {}
    n = len(dataset)
    if n == 0:
        raise ValueError("neuron_histogram needs a non-empty dataset")
    for start in range(0, n, batch_size):
        model.forward(dataset.images[start:start + batch_size], collect=collect)
    means = []
    for spec in model.prunable_specs():
        sums, count = collect[spec.id]
        means.append(sums / count)
    values = np.concatenate(means)
    # searchsorted maps v < e0 to bin 0 and v >= eN to the overflow bin.
    which = np.searchsorted(edges, values, side="right")
    counts = np.bincount(which, minlength=len(edges) + 1)
    bounds = [0.0] + edges + [float("inf")]
    return [
        {"bin_lo": bounds[i], "bin_hi": bounds[i + 1], "count": int(counts[i])}
        for i in range(len(bounds) - 1)
    ]


def _write_csv(path, fieldnames, rows):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row[k]) for k in fieldnames})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def emit_report(out_dir, stats, pattern=None, evolution=None, histograms=None):
    """Write report.json plus CSV views; returns the list of paths written.

    histograms maps a run label to the bin list from neuron_histogram.
    Output depends only on the inputs, so re-emitting identical data
    yields byte-identical files.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "stats": asdict(stats),
        "pattern": pattern or [],
        "evolution": evolution or [],
        "histograms": {k: v for k, v in (histograms or {}).items()},
    }
    paths = []
    report_path = out_dir / "report.json"
    report_path.write_text(json.dumps(report, sort_keys=True, indent=1) + "\n")
    paths.append(report_path)
    if pattern is not None:
        p = out_dir / "pattern.csv"
        _write_csv(p, ["layer_id", "layer_name", "unit_fraction", "weight_fraction"], pattern)
        paths.append(p)
    if evolution is not None:
        p = out_dir / "evolution.csv"
        _write_csv(p, ["iteration", "layer_id", "layer_name", "mean_abs_weight"], evolution)
        paths.append(p)
    if histograms is not None:
        p = out_dir / "histogram.csv"
        rows = []
        for label in histograms:
            for b in histograms[label]:
                rows.append({**b, "run_label": label})
        _write_csv(p, ["bin_lo", "bin_hi", "count", "run_label"], rows)
        paths.append(p)
    return paths
