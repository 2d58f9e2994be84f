"""Accounting math, report tables, and byte-stable emission."""

import json

import numpy as np
import pytest

from prunekit import graph as G
from prunekit import pruning as P
from prunekit import reports as R
from prunekit import schedule as S
from prunekit.tensor import Tensor, conv2d, dense, flatten, maxpool2x2, relu


# ---- effective percentage ----------------------------------------------

ANCHORS = [(92.00, 84.00), (95.84, 91.68), (93.04, 86.08)]


def test_effective_pct_anchors_bit_exact_from_formula():
    for pct, target in ANCHORS:
        got = R.effective_pruned_pct(pct, "global-weight")
        assert got == max(0.0, 100.0 - 2.0 * (100.0 - pct))
        assert got == pytest.approx(target, abs=1e-9)
        assert R.effective_pruned_pct(pct, "layerwise-weight") == got


def test_effective_pct_structured_passthrough():
    for pct, _ in ANCHORS:
        assert R.effective_pruned_pct(pct, "global-structured") == pct
        assert R.effective_pruned_pct(pct, "layerwise-structured") == pct


def test_effective_pct_clamps_at_zero():
    assert R.effective_pruned_pct(30.0, "global-weight") == 0.0
    assert R.effective_pruned_pct(50.0, "global-weight") == 0.0
    assert R.effective_pruned_pct(50.0 + 1e-9, "global-weight") > 0.0


# ---- param stats ----------------------------------------------------------

def mask_count_oracle(model):
    total = live = 0
    for spec in model.layers:
        for key, t in model.params[spec.id].items():
            total += t.data.size
            live += int(model.masks.for_param(spec.id, key).sum())
    return total, live


def test_param_stats_counts_against_mask_oracle():
    m = G.build_lenet5(seed=1)
    P.apply_plan(m, P.make_plan(m, "global-structured", 0.5))
    stats = R.param_stats(m, "global-structured")
    total, live = mask_count_oracle(m)
    assert stats.total_params == total == 431080
    assert stats.unmasked_params == live
    assert stats.param_pruned_pct == 100.0 * (1.0 - live / total)
    assert stats.effective_pruned_pct == stats.param_pruned_pct


def test_param_stats_weight_variant_uses_formula():
    m = G.build_lenet5(seed=1)
    P.apply_plan(m, P.make_plan(m, "global-weight", 0.9))
    stats = R.param_stats(m, "global-weight")
    assert stats.effective_pruned_pct == max(
        0.0, 100.0 - 2.0 * (100.0 - stats.param_pruned_pct)
    )
    assert stats.effective_pruned_pct < stats.param_pruned_pct


# ---- pattern and evolution --------------------------------------------------

def test_pruning_pattern_fractions():
    m = G.build_lenet5(seed=1)
    P.apply_plan(m, P.make_plan(m, "global-structured", 0.4))
    rows = R.pruning_pattern(m)
    assert [r["layer_name"] for r in rows] == ["conv1", "conv2", "fc1", "fc2"]
    for row in rows:
        unit_mask = m.masks.unit(row["layer_id"])
        wmask = m.masks.for_param(row["layer_id"], "weight")
        assert row["unit_fraction"] == 1.0 - unit_mask.sum() / unit_mask.size
        assert row["weight_fraction"] == 1.0 - wmask.sum() / wmask.size
    # the classifier is never unit-pruned, yet pruning fc1 masks its
    # input columns, so its weight fraction moves anyway
    fc2 = rows[-1]
    assert fc2["unit_fraction"] == 0.0
    assert fc2["weight_fraction"] > 0.0


def test_pattern_weight_fraction_counts_successor_side():
    m = G.build_lenet5(seed=1)
    # mask conv1 units only; conv2's weight fraction must move too
    plan = P.PrunePlan(
        variant="global-structured", requested_fraction=0.0,
        threshold_value=0.0,
        layer_ids=np.array([0] * 10, dtype=np.int64),
        unit_indices=np.arange(10, dtype=np.int64),
    )
    P.apply_plan(m, plan)
    rows = {r["layer_name"]: r for r in R.pruning_pattern(m)}
    assert rows["conv1"]["unit_fraction"] == 0.5
    assert rows["conv2"]["unit_fraction"] == 0.0
    assert rows["conv2"]["weight_fraction"] == pytest.approx(0.5)


def _history_two_iterations():
    def snap(lid, name, frac, mean):
        return S.LayerSnapshot(layer_id=lid, name=name, unit_fraction=frac,
                               mean_abs_weight=mean)

    return S.RunHistory(
        variant="global-structured",
        baseline_accuracy=0.99,
        baseline_layers=[snap(0, "conv1", 0.0, 0.10), snap(2, "fc1", 0.0, 0.02)],
        records=[
            S.IterationRecord(
                iteration=0, cumulative_p=0.5, pre_retrain_accuracy=0.97,
                post_retrain_accuracy=0.99, unmasked_params=200000,
                accepted=True,
                layers=[snap(0, "conv1", 0.4, 0.11), snap(2, "fc1", 0.52, 0.03)],
            ),
            S.IterationRecord(
                iteration=1, cumulative_p=0.55, pre_retrain_accuracy=0.96,
                post_retrain_accuracy=0.988, unmasked_params=180000,
                accepted=True,
                layers=[snap(0, "conv1", 0.45, 0.12), snap(2, "fc1", 0.57, 0.04)],
            ),
        ],
        final_iteration=1,
    )


def test_weight_evolution_numbers_baseline_as_iteration_zero():
    rows = R.weight_evolution(_history_two_iterations())
    assert [r["iteration"] for r in rows] == [0, 0, 1, 1, 2, 2]
    assert rows[0]["mean_abs_weight"] == 0.10
    assert rows[2]["layer_name"] == "conv1"
    assert rows[5]["mean_abs_weight"] == 0.04


# ---- neuron histogram ---------------------------------------------------------

def oracle_unit_means(model, images, batch_size):
    """Mean |post-relu| per unit via explicit layer-by-layer forward."""
    p = model.params
    sums = {lid: None for lid in (0, 1, 2)}
    count = {lid: 0 for lid in (0, 1, 2)}

    def tally(lid, act):
        per_unit = np.abs(act).sum(axis=tuple(i for i in range(act.ndim) if i != 1))
        sums[lid] = per_unit if sums[lid] is None else sums[lid] + per_unit
        count[lid] += act.size // act.shape[1]

    for start in range(0, images.shape[0], batch_size):
        x = images[start:start + batch_size]
        a1 = relu(conv2d(Tensor(x), p[0]["weight"], p[0]["bias"])).data
        tally(0, a1)
        h = maxpool2x2(Tensor(a1))
        a2 = relu(conv2d(h, p[1]["weight"], p[1]["bias"])).data
        tally(1, a2)
        h = flatten(maxpool2x2(Tensor(a2)))
        a3 = relu(dense(h, p[2]["weight"], p[2]["bias"])).data
        tally(2, a3)
    return {lid: sums[lid] / count[lid] for lid in (0, 1, 2)}


def oracle_bins(values, edges):
    bounds = [0.0] + list(edges) + [float("inf")]
    counts = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        counts.append(int(sum(1 for v in values if lo <= v < hi)))
    return counts


def test_neuron_histogram_matches_manual_forward(tiny_dataset):
    m = G.build_lenet5(seed=4)
    got = R.neuron_histogram(m, tiny_dataset, batch_size=16)
    means = oracle_unit_means(m, tiny_dataset.images, batch_size=16)
    values = np.concatenate([means[0], means[1], means[2]])
    edges = list(R.DEFAULT_BIN_EDGES)
    want = oracle_bins(values, edges)
    assert [b["count"] for b in got] == want
    assert sum(b["count"] for b in got) == 20 + 50 + 500
    assert got[0]["bin_lo"] == 0.0
    assert got[-1]["bin_hi"] == float("inf")


def test_neuron_histogram_exact_edge_goes_to_upper_bin(tiny_dataset):
    m = G.build_lenet5(seed=4)
    means = oracle_unit_means(m, tiny_dataset.images, batch_size=16)
    values = np.sort(np.concatenate([means[0], means[1], means[2]]))
    pivot = float(values[len(values) // 2])
    edges = [pivot / 4.0, pivot, pivot * 4.0]
    got = R.neuron_histogram(m, tiny_dataset, bin_edges=edges, batch_size=16)
    want = oracle_bins(values, edges)
    assert [b["count"] for b in got] == want


def test_pruned_units_land_in_lowest_bin(tiny_dataset):
    m = G.build_lenet5(seed=4)
    P.apply_plan(m, P.make_plan(m, "global-structured", 0.5))
    after = R.neuron_histogram(m, tiny_dataset)
    masked = sum(int((~m.masks.unit(s.id)).sum()) for s in m.prunable_specs())
    assert masked > 0
    assert after[0]["count"] >= masked


def test_histogram_rejects_bad_edges(tiny_dataset):
    m = G.build_lenet5(seed=4)
    with pytest.raises(ValueError, match="ascending"):
        R.neuron_histogram(m, tiny_dataset, bin_edges=[0.5, 0.1])
    with pytest.raises(ValueError, match="ascending"):
        R.neuron_histogram(m, tiny_dataset, bin_edges=[])


# ---- emission ------------------------------------------------------------------

def _emit_everything(out_dir):
    m = G.build_lenet5(seed=1)
    P.apply_plan(m, P.make_plan(m, "global-structured", 0.4))
    stats = R.param_stats(m, "global-structured")
    hist = _history_two_iterations()
    bins = [{"bin_lo": 0.0, "bin_hi": 1.0, "count": 3},
            {"bin_lo": 1.0, "bin_hi": float("inf"), "count": 7}]
    return R.emit_report(
        out_dir, stats,
        pattern=R.pruning_pattern(m),
        evolution=R.weight_evolution(hist),
        histograms={"final": bins},
    )


def test_emit_report_writes_all_files(tmp_path):
    paths = _emit_everything(tmp_path)
    assert [p.name for p in paths] == [
        "report.json", "pattern.csv", "evolution.csv", "histogram.csv"
    ]
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["schema_version"] == 1
    assert report["stats"]["total_params"] == 431080
    assert len(report["pattern"]) == 4


def test_emit_report_is_byte_identical_on_reemission(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    paths_a = _emit_everything(a)
    paths_b = _emit_everything(b)
    for pa, pb in zip(paths_a, paths_b):
        assert pa.read_bytes() == pb.read_bytes(), pa.name


def test_csv_headers_exact(tmp_path):
    _emit_everything(tmp_path)
    heads = {
        "pattern.csv": "layer_id,layer_name,unit_fraction,weight_fraction",
        "evolution.csv": "iteration,layer_id,layer_name,mean_abs_weight",
        "histogram.csv": "bin_lo,bin_hi,count,run_label",
    }
    for name, head in heads.items():
        first = (tmp_path / name).read_text().splitlines()[0]
        assert first == head


def test_csv_floats_use_repr(tmp_path):
    _emit_everything(tmp_path)
    lines = (tmp_path / "evolution.csv").read_text().splitlines()
    assert lines[1] == "0,0,conv1,0.1"
    assert any(line.endswith(",inf") or ",inf," in line
               for line in (tmp_path / "histogram.csv").read_text().splitlines())


def test_emit_report_stats_only(tmp_path):
    m = G.build_lenet5(seed=1)
    stats = R.param_stats(m, "global-structured")
    paths = R.emit_report(tmp_path, stats)
    assert [p.name for p in paths] == ["report.json"]
    report = json.loads(paths[0].read_text())
    assert report["pattern"] == [] and report["evolution"] == []


def test_unpruned_pattern_is_all_zero():
    rows = R.pruning_pattern(G.build_lenet5(seed=2))
    assert all(r["unit_fraction"] == 0.0 for r in rows)
    assert all(r["weight_fraction"] == 0.0 for r in rows)


def test_histogram_rejects_empty_dataset():
    from prunekit.data import Dataset

    m = G.build_lenet5(seed=4)
    empty = Dataset(images=np.zeros((0, 1, 28, 28)), labels=np.zeros(0, np.int64))
    with pytest.raises(ValueError, match="non-empty"):
        R.neuron_histogram(m, empty)


def test_emit_report_with_empty_sections(tmp_path):
    m = G.build_lenet5(seed=1)
    stats = R.param_stats(m, "global-structured")
    paths = R.emit_report(tmp_path, stats, pattern=[], evolution=[], histograms={})
    assert [p.name for p in paths] == [
        "report.json", "pattern.csv", "evolution.csv", "histogram.csv"
    ]
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["pattern"] == [] and report["histograms"] == {}
    # header-only CSVs
    assert len((tmp_path / "pattern.csv").read_text().splitlines()) == 1


def test_report_json_round_trips_without_loss(tmp_path):
    m = G.build_lenet5(seed=1)
    P.apply_plan(m, P.make_plan(m, "global-structured", 0.37))
    stats = R.param_stats(m, "global-structured")
    pattern = R.pruning_pattern(m)
    evolution = R.weight_evolution(_history_two_iterations())
    R.emit_report(tmp_path, stats, pattern=pattern, evolution=evolution)
    report = json.loads((tmp_path / "report.json").read_text())
    # json round-trip of float64 via repr is exact, so == holds bitwise
    assert report["pattern"] == pattern
    assert report["evolution"] == evolution
    assert report["stats"]["param_pruned_pct"] == stats.param_pruned_pct
