"""Ranking, selection, mask application, and compaction.

The structured pipeline: score every prunable unit by its L1 weight norm
divided by its weight count (biases excluded), pool the scores across
layers, and select the lowest floor(p*K) of K entries. Masked units
score exactly 0 and sit at the bottom of the ranking, which makes a
fresh selection at a larger p a superset of the earlier one: p is
cumulative over the whole model, not relative to the survivors.

Selection is count-exact, not threshold-exact: ties are broken by
(norm, layer id, unit index) ascending, and the reported threshold is
the largest selected norm, for diagnostics only.

Weight-granularity variants rank individual |w| entries instead and
mask single weights with no unit bookkeeping and no propagation.
"""

import json
import math
from dataclasses import dataclass

import numpy as np

from . import graph as G
from . import tensor as T

STRUCTURED_VARIANTS = ("global-structured", "layerwise-structured")
WEIGHT_VARIANTS = ("global-weight", "layerwise-weight")
VARIANTS = STRUCTURED_VARIANTS + WEIGHT_VARIANTS


@dataclass
class NormTable:
    """Flat score table: parallel arrays over all candidates of one model."""

    layer_ids: np.ndarray
    unit_indices: np.ndarray
    norms: np.ndarray
    granularity: str  # 'unit' or 'weight'

    def __len__(self):
        return self.norms.shape[0]


@dataclass
class PrunePlan:
    """A selection of units (or single weights) to mask, replayable from JSON."""

    variant: str
    requested_fraction: float
    threshold_value: float
    layer_ids: np.ndarray
    unit_indices: np.ndarray

    @property
    def granularity(self):
        return "weight" if self.variant in WEIGHT_VARIANTS else "unit"

    def __len__(self):
        return self.layer_ids.shape[0]

    def to_json(self):
        return json.dumps(
            {
                "variant": self.variant,
                "requested_fraction": self.requested_fraction,
                "threshold_value": self.threshold_value,
                "selected": [
                    [int(l), int(u)]
                    for l, u in zip(self.layer_ids, self.unit_indices)
                ],
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        sel = d.get("selected", [])
        return cls(
            variant=d["variant"],
            requested_fraction=float(d["requested_fraction"]),
            threshold_value=float(d["threshold_value"]),
            layer_ids=np.array([s[0] for s in sel], dtype=np.int64),
            unit_indices=np.array([s[1] for s in sel], dtype=np.int64),
        )


def normalized_norms(model, granularity="unit"):
    """Score table over all prunable layers, computed from current data.

    Unit granularity: L1 norm of the unit's weight row divided by its
    weight count (biases excluded). Weight granularity: |w| per entry
    with unit_indices holding flat positions into the layer's weight
    array. Masked entries contribute their stored zeros.
    """
    if granularity not in ("unit", "weight"):
        raise ValueError(f"unknown granularity {granularity!r}")
    layer_ids, indices, norms = [], [], []
    for spec in model.prunable_specs():
        w = model.params[spec.id]["weight"].data
        if granularity == "unit":
            flat = np.abs(w).reshape(spec.unit_count, -1).sum(axis=1)
            flat = flat / spec.weights_per_unit
            idx = np.arange(spec.unit_count, dtype=np.int64)
        else:
            flat = np.abs(w).ravel()
            idx = np.arange(flat.size, dtype=np.int64)
        layer_ids.append(np.full(idx.size, spec.id, dtype=np.int64))
        indices.append(idx)
        norms.append(flat)
    if not norms:
        raise ValueError(f"model {model.name} has no prunable layers")
    return NormTable(
        layer_ids=np.concatenate(layer_ids),
        unit_indices=np.concatenate(indices),
        norms=np.concatenate(norms),
        granularity=granularity,
    )


def _ranked_order(table):
    # Stable ascending sort by (norm, layer id, index); lexsort keys are
    # listed least significant first.
    return np.lexsort((table.unit_indices, table.layer_ids, table.norms))


def _take(table, order, count):
    sel = order[:count]
    threshold = float(table.norms[sel[-1]]) if count > 0 else 0.0
    return sel, threshold


def global_threshold(table, p, variant=None):
    """Select the floor(p*K) lowest-scored entries across the whole table."""
    _check_fraction(p)
    count = math.floor(p * len(table))
    order = _ranked_order(table)
    sel, threshold = _take(table, order, count)
    return PrunePlan(
        variant=variant or _default_variant("global", table.granularity),
        requested_fraction=float(p),
        threshold_value=threshold,
        layer_ids=table.layer_ids[sel].copy(),
        unit_indices=table.unit_indices[sel].copy(),
    )


def layerwise_threshold(table, p, variant=None):
    """Select floor(p*K_layer) lowest entries independently in each layer.

    threshold_value reports the largest selected norm over all layers.
    """
    _check_fraction(p)
    sel_parts = []
    threshold = 0.0
    for lid in np.unique(table.layer_ids):
        where = np.nonzero(table.layer_ids == lid)[0]
        sub = NormTable(
            layer_ids=table.layer_ids[where],
            unit_indices=table.unit_indices[where],
            norms=table.norms[where],
            granularity=table.granularity,
        )
        count = math.floor(p * len(sub))
        order = _ranked_order(sub)
        sel, local_thr = _take(sub, order, count)
        if count > 0:
            threshold = max(threshold, local_thr)
            sel_parts.append(where[sel])
    sel_all = (
        np.concatenate(sel_parts) if sel_parts else np.empty(0, dtype=np.int64)
    )
    return PrunePlan(
        variant=variant or _default_variant("layerwise", table.granularity),
        requested_fraction=float(p),
        threshold_value=threshold,
        layer_ids=table.layer_ids[sel_all].copy(),
        unit_indices=table.unit_indices[sel_all].copy(),
    )


def _default_variant(scope, granularity):
    return f"{scope}-structured" if granularity == "unit" else f"{scope}-weight"


def _check_fraction(p):
    if not (0.0 <= p <= 1.0):
        raise ValueError(f"prune fraction must be in [0, 1], got {p}")


def make_plan(model, variant, p):
    """Build the score table for `variant` and select at fraction p."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    granularity = "weight" if variant in WEIGHT_VARIANTS else "unit"
    table = normalized_norms(model, granularity)
    if variant.startswith("global"):
        return global_threshold(table, p, variant)
    return layerwise_threshold(table, p, variant)


def importance_scores(table):
    """Each entry's share of the total normalized norm, aligned with the table."""
    total = float(table.norms.sum())
    if total <= 0.0:
        raise ValueError("importance undefined: all norms are zero")
    return table.norms / total


def apply_plan(model, plan):
    """Mask the plan's selections on the model, mutating it in place.

    Structured plans clear unit bits and propagate: the unit's weight
    rows and bias, its batchnorm marker's scale/shift, the matching
    input slices of every successor, and (through coupling groups) the
    same unit in every coupled layer. Weight plans clear single weight
    mask bits only. Parameter data is re-multiplied by the masks at the
    end, so masked entries read exactly 0.0.
    """
    selected = _validate_plan(model, plan)
    if plan.granularity == "weight":
        for lid, idx in selected.items():
            wmask = model.masks.for_param(lid, "weight")
            wmask.ravel()[idx] = False
    else:
        selected = _expand_couplings(model, selected)
        for lid, units in selected.items():
            _mask_units(model, model.layer_by_id[lid], units)
    model.apply_masks()
    return model


def _validate_plan(model, plan):
    selected = {}
    for lid, idx in zip(plan.layer_ids, plan.unit_indices):
        lid, idx = int(lid), int(idx)
        spec = model.layer_by_id.get(lid)
        if spec is None:
            raise ValueError(f"plan refers to unknown layer id {lid}")
        if spec.kind not in G.PRUNABLE_KINDS:
            raise ValueError(
                f"plan selects layer {spec.name} of kind {spec.kind}, "
                "which is not prunable"
            )
        limit = (
            model.params[lid]["weight"].data.size
            if plan.granularity == "weight"
            else spec.unit_count
        )
        if not (0 <= idx < limit):
            raise ValueError(
                f"plan index {idx} out of range for layer {spec.name} (< {limit})"
            )
        selected.setdefault(lid, []).append(idx)
    return {lid: np.array(sorted(set(v)), dtype=np.int64) for lid, v in selected.items()}


def _expand_couplings(model, selected):
    for group in model.couplings:
        hit = [lid for lid in group if lid in selected]
        if not hit:
            continue
        union = np.unique(np.concatenate([selected[lid] for lid in hit]))
        for lid in group:
            selected[lid] = union
    return selected


def _mask_units(model, spec, units):
    masks = model.masks
    masks.unit(spec.id)[units] = False
    wmask = masks.for_param(spec.id, "weight")
    wmask[units] = False  # own rows: conv (u,ci,kh,kw) or dense (u,din)
    masks.for_param(spec.id, "bias")[units] = False
    if spec.bn_id >= 0:
        bn = model.layer_by_id[spec.bn_id]
        masks.unit(bn.id)[units] = False
        masks.for_param(bn.id, "scale")[units] = False
        masks.for_param(bn.id, "shift")[units] = False
    for sid in spec.successors:
        succ = model.layer_by_id[sid]
        smask = masks.for_param(sid, "weight")
        if succ.kind == "conv":
            smask[:, units, :, :] = False
        else:
            m = spec.spatial_multiplicity
            cols = (units[:, None] * m + np.arange(m)[None, :]).ravel()
            smask[:, cols] = False


def compact(model):
    """Physically remove masked units, returning a dense equivalent model.

    Surviving units keep their relative order but are renumbered; input
    slices of successor weights are gathered to match. Forward outputs
    are preserved because every removed row/column holds exact zeros.
    Weight-granularity zeros inside surviving units are carried along as
    values. The result's masks are all ones.
    """
    keep = {}
    for spec in model.layers:
        if spec.kind in G.PRUNABLE_KINDS:
            k = np.nonzero(model.masks.unit(spec.id))[0]
            if k.size == 0:
                raise ValueError(
                    f"cannot compact: layer {spec.name} has no surviving units"
                )
            keep[spec.id] = k

    new_specs, new_params = [], {}
    for spec in model.layers:
        s = G.spec_from_dict(G.spec_to_dict(spec))  # fresh copy
        per = model.params[spec.id]
        if spec.kind == "batchnorm":
            k = keep[spec.owner_id]
            s.unit_count = k.size
            new_params[s.id] = {
                "scale": T.Tensor(per["scale"].data[k]),
                "shift": T.Tensor(per["shift"].data[k]),
            }
            new_specs.append(s)
            continue

        w = per["weight"].data
        b = per["bias"].data
        if spec.id in keep:
            k = keep[spec.id]
            w, b = w[k], b[k]
            s.unit_count = k.size
        w = _gather_inputs(model, spec, w, keep)
        if spec.kind == "conv":
            s.in_channels = w.shape[1]
            s.weights_per_unit = w.shape[1] * s.kernel_h * s.kernel_w
        else:
            s.in_features = w.shape[1]
            s.weights_per_unit = w.shape[1]
        new_params[s.id] = {
            "weight": T.Tensor(w.copy(), requires_grad=True),
            "bias": T.Tensor(b.copy(), requires_grad=True),
        }
        new_specs.append(s)

    masks = G.MaskStore.all_ones(new_specs, new_params)
    return G.ModelGraph(
        name=model.name, topology=model.topology, layers=new_specs,
        params=new_params, masks=masks, couplings=model.couplings,
        input_shape=model.input_shape, stem_id=model.stem_id,
        residual_blocks=model.residual_blocks,
    )


def _gather_inputs(model, spec, w, keep):
    """Restrict a layer's input axis to its predecessor's surviving units."""
    pred = _predecessor(model, spec)
    if pred is None or pred.id not in keep:
        return w
    k = keep[pred.id]
    if spec.kind == "conv":
        return w[:, k, :, :]
    m = pred.spatial_multiplicity
    cols = (k[:, None] * m + np.arange(m)[None, :]).ravel()
    return w[:, cols]


def _predecessor(model, spec):
    preds = [s for s in model.layers if spec.id in s.successors]
    if not preds:
        return None
    if len(preds) == 1:
        return preds[0]
    # Residual stream: all producers are coupled, so any of them gives
    # the same surviving-unit set. Sanity-check that before trusting it.
    for group in model.couplings:
        if all(p.id in group for p in preds):
            return preds[0]
    raise ValueError(
        f"layer {spec.name} has {len(preds)} uncoupled producers; "
        "cannot compact its input axis"
    )
