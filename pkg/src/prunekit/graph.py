"""Model graphs: layer metadata, parameters, masks, and forward wiring.

A ModelGraph owns three aligned stores: per-layer specs (immutable
metadata), parameters (float64 tensors), and boolean masks. Masks are
the single source of truth for what is pruned; parameter data under a
zero mask bit is kept at exactly 0.0.

Two builders are provided: the LeNet-5 style MNIST classifier (chain
topology) and a small synthetic residual network used to exercise
coupled pruning of skip-connected layers.
"""

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T

PRUNABLE_KINDS = ("conv", "dense")


@dataclass
class LayerSpec:
    """Static description of one layer.

    kind is one of 'conv', 'dense', 'classifier', 'batchnorm'. The
    classifier is an output layer whose units are never pruned (only its
    input columns shrink). Batchnorm entries are bookkeeping markers
    attached to a conv; they carry scale/shift parameters and masks but
    take no part in the forward pass.
    """

    id: int
    name: str
    kind: str
    unit_count: int
    weights_per_unit: int
    successors: list = field(default_factory=list)
    spatial_multiplicity: int = 1
    # conv geometry
    in_channels: int = 0
    kernel_h: int = 0
    kernel_w: int = 0
    stride: int = 1
    padding: int = 0
    # dense geometry
    in_features: int = 0
    # forward decorations
    relu_after: bool = False
    pool_after: bool = False
    flatten_after: bool = False
    # batchnorm linkage
    bn_id: int = -1  # on a conv: id of its marker, -1 if none
    owner_id: int = -1  # on a marker: id of the owning conv


class MaskStore:
    """Boolean masks per layer: a 'unit' vector plus one mask per parameter.

    Invariant kept by the pruner: unit bit u == 0 implies the unit's own
    weight rows and bias bit are 0 (and its batchnorm scale/shift bits,
    and the matching input slices of successor masks).
    """

    def __init__(self, masks):
        self._masks = masks

    @classmethod
    def all_ones(cls, specs, params):
        masks = {}
        for spec in specs:
            per = {"unit": np.ones(spec.unit_count, dtype=bool)}
            for key, t in params[spec.id].items():
                per[key] = np.ones(t.data.shape, dtype=bool)
            masks[spec.id] = per
        return cls(masks)

    def unit(self, layer_id):
        return self._masks[layer_id]["unit"]

    def for_param(self, layer_id, key):
        return self._masks[layer_id][key]

    def layer_keys(self, layer_id):
        return [k for k in self._masks[layer_id] if k != "unit"]

    def clone(self):
        return MaskStore(
            {
                lid: {k: m.copy() for k, m in per.items()}
                for lid, per in self._masks.items()
            }
        )

    def as_dict(self):
        return self._masks


class ModelGraph:
    """Layers, parameters, masks, and the forward recipe tying them together."""

    def __init__(
        self,
        name,
        topology,
        layers,
        params,
        masks,
        couplings=None,
        input_shape=None,
        stem_id=-1,
        residual_blocks=None,
    ):
        self.name = name
        self.topology = topology
        self.layers = list(layers)
        self.params = params
        self.masks = masks
        self.couplings = [list(g) for g in (couplings or [])]
        self.input_shape = tuple(input_shape or ())
        self.stem_id = stem_id
        self.residual_blocks = [tuple(b) for b in (residual_blocks or [])]
        self.layer_by_id = {spec.id: spec for spec in self.layers}

    # ---- parameter access -------------------------------------------------

    def trainable_specs(self):
        return [s for s in self.layers if s.kind in ("conv", "dense", "classifier")]

    def parameters(self):
        """(name, tensor) pairs for the optimizer, in layer order."""
        out = []
        for spec in self.trainable_specs():
            out.append((f"{spec.name}.weight", self.params[spec.id]["weight"]))
            out.append((f"{spec.name}.bias", self.params[spec.id]["bias"]))
        return out

    def parameter_masks(self):
        """Mask arrays aligned with parameters(), for masked SGD steps."""
        out = []
        for spec in self.trainable_specs():
            out.append(self.masks.for_param(spec.id, "weight"))
            out.append(self.masks.for_param(spec.id, "bias"))
        return out

    def prunable_specs(self):
        return [s for s in self.layers if s.kind in PRUNABLE_KINDS]

    def param_count(self, which="total"):
        """Parameter element count; which is 'total' or 'unmasked'."""
        if which not in ("total", "unmasked"):
            raise ValueError(f"param_count: unknown selector {which!r}")
        n = 0
        for spec in self.layers:
            for key, t in self.params[spec.id].items():
                if which == "total":
                    n += t.data.size
                else:
                    n += int(self.masks.for_param(spec.id, key).sum())
        return n

    def apply_masks(self):
        """Multiply every parameter by its mask, forcing masked entries to 0.0."""
        for spec in self.layers:
            for key, t in self.params[spec.id].items():
                t.data *= self.masks.for_param(spec.id, key)

    def zero_grads(self):
        for _, t in self.parameters():
            t.grad = None

    def clone(self):
        """Deep copy of parameters and masks; specs are shared (immutable)."""
        params = {
            lid: {k: T.Tensor(t.data.copy(), requires_grad=t.requires_grad)
                  for k, t in per.items()}
            for lid, per in self.params.items()
        }
        return ModelGraph(
            name=self.name,
            topology=self.topology,
            layers=self.layers,
            params=params,
            masks=self.masks.clone(),
            couplings=self.couplings,
            input_shape=self.input_shape,
            stem_id=self.stem_id,
            residual_blocks=self.residual_blocks,
        )

    # ---- forward ----------------------------------------------------------

    def _apply_layer(self, spec, h, collect=None, with_relu=True):
        p = self.params[spec.id]
        if spec.kind == "conv":
            h = T.conv2d(h, p["weight"], p["bias"], spec.stride, spec.padding)
        elif spec.kind in ("dense", "classifier"):
            h = T.dense(h, p["weight"], p["bias"])
        else:
            raise ValueError(f"layer {spec.name} of kind {spec.kind} has no forward op")
        if spec.relu_after and with_relu:
            h = T.relu(h)
            if collect is not None and spec.kind in PRUNABLE_KINDS:
                _collect_activations(collect, spec, h.data)
        if spec.pool_after:
            h = T.maxpool2x2(h)
        if spec.flatten_after:
            h = T.flatten(h)
        return h

    def forward(self, images, collect=None):
        """Run the network; images is an array or Tensor of shape (N,1,H,W).

        collect, if given, is a dict filled with per-unit absolute
        activation sums and element counts for every prunable layer
        (taken right after that layer's relu).
        """
        h = images if isinstance(images, T.Tensor) else T.Tensor(images)
        if self.topology == "chain":
            for spec in self.layers:
                if spec.kind == "batchnorm":
                    continue
                h = self._apply_layer(spec, h, collect)
            return h
        return self._forward_residual(h, collect)

    def _forward_residual(self, h, collect=None):
        stem = self.layer_by_id[self.stem_id]
        h = self._apply_layer(stem, h, collect)
        for a_id, b_id in self.residual_blocks:
            a_spec = self.layer_by_id[a_id]
            b_spec = self.layer_by_id[b_id]
            a = self._apply_layer(a_spec, h, collect)
            z = self._apply_layer(b_spec, a, collect, with_relu=False)
            h = T.relu(T.add(h, z))
            if collect is not None:
                _collect_activations(collect, b_spec, h.data)
        h = T.flatten(h)
        classifier = next(s for s in self.layers if s.kind == "classifier")
        return self._apply_layer(classifier, h)


def _collect_activations(collect, spec, data):
    # data: (N, U, H, W) for conv, (N, U) for dense; accumulate sum(|act|)
    # and element count per unit so shards merge exactly.
    if data.ndim == 4:
        sums = np.abs(data).sum(axis=(0, 2, 3))
        count = data.shape[0] * data.shape[2] * data.shape[3]
    else:
        sums = np.abs(data).sum(axis=0)
        count = data.shape[0]
    if spec.id in collect:
        prev_sums, prev_count = collect[spec.id]
        collect[spec.id] = (prev_sums + sums, prev_count + count)
    else:
        collect[spec.id] = (sums, count)


def _he_normal(rng, shape, fan_in):
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


def build_lenet5(seed=0):
    """MNIST classifier: conv 20@5x5 + pool, conv 50@5x5 + pool, fc 500, fc 10.

    ReLU after both convs and fc1; 431,080 parameters total. Weights are
    He-normal from a PCG64 stream seeded by `seed`; biases start at zero.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    specs = [
        LayerSpec(
            id=0, name="conv1", kind="conv", unit_count=20, weights_per_unit=25,
            successors=[1], in_channels=1, kernel_h=5, kernel_w=5,
            relu_after=True, pool_after=True,
        ),
        LayerSpec(
            id=1, name="conv2", kind="conv", unit_count=50, weights_per_unit=500,
            successors=[2], spatial_multiplicity=16, in_channels=20,
            kernel_h=5, kernel_w=5, relu_after=True, pool_after=True,
            flatten_after=True,
        ),
        LayerSpec(
            id=2, name="fc1", kind="dense", unit_count=500, weights_per_unit=800,
            successors=[3], in_features=800, relu_after=True,
        ),
        LayerSpec(
            id=3, name="fc2", kind="classifier", unit_count=10,
            weights_per_unit=500, in_features=500,
        ),
    ]
    params = {}
    for s in specs:
        if s.kind == "conv":
            shape = (s.unit_count, s.in_channels, s.kernel_h, s.kernel_w)
            fan_in = s.in_channels * s.kernel_h * s.kernel_w
        else:
            shape = (s.unit_count, s.in_features)
            fan_in = s.in_features
        params[s.id] = {
            "weight": T.Tensor(_he_normal(rng, shape, fan_in), requires_grad=True),
            "bias": T.Tensor(np.zeros(s.unit_count), requires_grad=True),
        }
    masks = MaskStore.all_ones(specs, params)
    return ModelGraph(
        name="lenet5", topology="chain", layers=specs, params=params,
        masks=masks, input_shape=(1, 28, 28),
    )


def build_synthetic_residual(stages=2, channels=8, image_hw=8, classes=10, seed=0):
    """Small skip-connected conv net for exercising coupled pruning.

    Topology: stem conv, then `stages` blocks of
    x_{i+1} = relu(x_i + conv_b(relu(conv_a(x_i)))), then a classifier on
    the flattened stream. All convs are 3x3, padding 1, so the stream
    keeps its channel count; the stem and every conv_b write to the same
    stream and form one coupling group. Each conv carries a batchnorm
    marker (mask bookkeeping only).
    """
    if stages < 1:
        raise ValueError(f"need at least one stage, got {stages}")
    rng = np.random.Generator(np.random.PCG64(seed))
    hw = image_hw * image_hw
    specs = []
    next_id = 0

    def conv_spec(name, in_ch):
        nonlocal next_id
        s = LayerSpec(
            id=next_id, name=name, kind="conv", unit_count=channels,
            weights_per_unit=in_ch * 9, in_channels=in_ch,
            kernel_h=3, kernel_w=3, padding=1, spatial_multiplicity=hw,
        )
        next_id += 1
        return s

    def bn_spec(owner):
        nonlocal next_id
        s = LayerSpec(
            id=next_id, name=owner.name + ".bn", kind="batchnorm",
            unit_count=owner.unit_count, weights_per_unit=1,
            owner_id=owner.id,
        )
        owner.bn_id = s.id
        next_id += 1
        return s

    stem = conv_spec("stem", 1)
    stem.relu_after = True
    specs += [stem, bn_spec(stem)]
    blocks = []
    a_ids, b_ids = [], []
    for i in range(1, stages + 1):
        a = conv_spec(f"block{i}.a", channels)
        a.relu_after = True
        b = conv_spec(f"block{i}.b", channels)
        specs += [a, bn_spec(a), b, bn_spec(b)]
        blocks.append((a.id, b.id))
        a_ids.append(a.id)
        b_ids.append(b.id)
    classifier = LayerSpec(
        id=next_id, name="classifier", kind="classifier", unit_count=classes,
        weights_per_unit=channels * hw, in_features=channels * hw,
    )
    specs.append(classifier)

    # Stream producers feed every later block entry and the classifier.
    producers = [stem.id] + b_ids
    for k, pid in enumerate(producers):
        downstream_a = a_ids[k:]
        spec = next(s for s in specs if s.id == pid)
        spec.successors = downstream_a + [classifier.id]
    for a_id, b_id in blocks:
        next(s for s in specs if s.id == a_id).successors = [b_id]

    params = {}
    for s in specs:
        if s.kind == "conv":
            shape = (s.unit_count, s.in_channels, 3, 3)
            fan_in = s.in_channels * 9
            params[s.id] = {
                "weight": T.Tensor(_he_normal(rng, shape, fan_in), requires_grad=True),
                "bias": T.Tensor(np.zeros(s.unit_count), requires_grad=True),
            }
        elif s.kind == "batchnorm":
            params[s.id] = {
                "scale": T.Tensor(np.ones(s.unit_count)),
                "shift": T.Tensor(np.zeros(s.unit_count)),
            }
        else:
            params[s.id] = {
                "weight": T.Tensor(
                    _he_normal(rng, (classes, s.in_features), s.in_features),
                    requires_grad=True,
                ),
                "bias": T.Tensor(np.zeros(classes), requires_grad=True),
            }
    masks = MaskStore.all_ones(specs, params)
    return ModelGraph(
        name="synthetic-residual", topology="residual", layers=specs,
        params=params, masks=masks, couplings=[producers],
        input_shape=(1, image_hw, image_hw), stem_id=stem.id,
        residual_blocks=blocks,
    )


def spec_to_dict(spec):
    return asdict(spec)


def spec_from_dict(d):
    return LayerSpec(**d)
