"""Checkpoint archive: one self-contained binary file per model snapshot.

Layout: an 8-byte magic ``PKCKPT01``, a little-endian u64 giving the
length of a JSON manifest, the manifest itself (sorted keys, compact
separators), then raw little-endian float64 tensor payloads at the
offsets the manifest declares. Masks are stored run-length encoded.
Nothing in the file depends on wall time, so saving the same model and
state twice produces identical bytes.
"""

import json
import struct
from pathlib import Path

import numpy as np

from . import graph as G
from . import tensor as T

MAGIC = b"PKCKPT01"
FORMAT_VERSION = 1


def rle_encode(mask):
    """Flatten a bool array to [first_value, run_length, run_length, ...]."""
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        return [0]
    changes = np.nonzero(np.diff(flat))[0] + 1
    bounds = np.concatenate(([0], changes, [flat.size]))
    runs = np.diff(bounds)
    return [int(flat[0])] + [int(r) for r in runs]


def rle_decode(code, size):
    """Inverse of rle_encode; size is the expected element count."""
    first, runs = code[0], code[1:]
    if sum(runs) != size:
        raise ValueError(f"mask runs sum to {sum(runs)}, expected {size}")
    out = np.empty(size, dtype=bool)
    val = bool(first)
    pos = 0
    for r in runs:
        out[pos:pos + r] = val
        pos += r
        val = not val
    return out


def _tensor_order(model):
    """Deterministic payload order: layers in graph order, keys sorted."""
    for spec in model.layers:
        for key in sorted(model.params[spec.id]):
            yield spec, key, model.params[spec.id][key]


def save_checkpoint(model, state, path):
    """Write model parameters, masks, layer metadata, and a state dict."""
    tensors = {}
    payload = bytearray()
    for spec, key, t in _tensor_order(model):
        arr = np.ascontiguousarray(t.data, dtype="<f8")
        tensors[f"{spec.id}.{key}"] = {
            "offset": len(payload),
            "shape": list(arr.shape),
        }
        payload += arr.tobytes()
    masks = {
        str(spec.id): {
            key: rle_encode(model.masks.for_param(spec.id, key))
            for key in sorted(model.masks.layer_keys(spec.id))
        }
        | {"unit": rle_encode(model.masks.unit(spec.id))}
        for spec in model.layers
    }
    manifest = {
        "format_version": FORMAT_VERSION,
        "model": {
            "name": model.name,
            "topology": model.topology,
            "input_shape": list(model.input_shape),
            "stem_id": model.stem_id,
            "residual_blocks": [list(b) for b in model.residual_blocks],
            "couplings": [list(g) for g in model.couplings],
            "layers": [G.spec_to_dict(s) for s in model.layers],
        },
        "masks": masks,
        "tensors": tensors,
        "state": state,
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        f.write(payload)
    return path


def load_checkpoint(path):
    """Read a checkpoint; returns (model, state)."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:8]!r}, expected {MAGIC!r}")
    (blob_len,) = struct.unpack("<Q", raw[8:16])
    if 16 + blob_len > len(raw):
        raise ValueError(f"{path}: manifest length {blob_len} exceeds file size")
    manifest = json.loads(raw[16:16 + blob_len])
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(
            f"{path}: format_version {manifest.get('format_version')} "
            f"!= {FORMAT_VERSION}"
        )
    payload = raw[16 + blob_len:]

    m = manifest["model"]
    specs = [G.spec_from_dict(d) for d in m["layers"]]
    params = {}
    for spec in specs:
        per = {}
        keys = [
            k.split(".", 1)[1]
            for k in manifest["tensors"]
            if int(k.split(".", 1)[0]) == spec.id
        ]
        for key in keys:
            meta = manifest["tensors"][f"{spec.id}.{key}"]
            shape = tuple(meta["shape"])
            count = int(np.prod(shape)) if shape else 1
            start = meta["offset"]
            end = start + 8 * count
            if end > len(payload):
                raise ValueError(
                    f"{path}: tensor {spec.id}.{key} extends past end of payload"
                )
            arr = np.frombuffer(payload[start:end], dtype="<f8").reshape(shape)
            trainable = spec.kind != "batchnorm"
            per[key] = T.Tensor(arr.copy(), requires_grad=trainable)
        params[spec.id] = per

    mask_store = {}
    for spec in specs:
        entry = manifest["masks"][str(spec.id)]
        per = {"unit": rle_decode(entry["unit"], spec.unit_count)}
        for key, t in params[spec.id].items():
            per[key] = rle_decode(entry[key], t.data.size).reshape(t.data.shape)
        mask_store[spec.id] = per

    model = G.ModelGraph(
        name=m["name"],
        topology=m["topology"],
        layers=specs,
        params=params,
        masks=G.MaskStore(mask_store),
        couplings=m["couplings"],
        input_shape=m["input_shape"],
        stem_id=m["stem_id"],
        residual_blocks=m["residual_blocks"],
    )
    return model, manifest["state"]
