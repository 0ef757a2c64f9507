"""Bit-exact binary serialization of models and datasets.

File layout:
    magic   "SPRN" (4 bytes)
    version u32 little-endian
    mlen    u32 little-endian, byte length of the JSON metadata
    meta    UTF-8 JSON: kind, form, architecture, merge weights, and a
            tensor manifest of (name, dtype, shape, offset) entries
    payload concatenated little-endian float32 arrays in manifest order

Offsets are strictly increasing and non-overlapping; each corruption mode
maps to its own error class so misuse is diagnosable at load time.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from . import nn, precision
from .data import LabeledSet
from .multipath import FusedConv, MultiPathUnit
from .tensor import Tensor

MAGIC = b"SPRN"
VERSION = 1


class CheckpointError(Exception):
    """Base class for checkpoint load failures."""


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedPayloadError(CheckpointError):
    pass


class ManifestError(CheckpointError):
    """Manifest and payload/shape disagreement."""


def _named_arrays(model: nn.ModelBundle):
    """Flat (name, array) view of every parameter and BN statistic."""
    out = []
    for i, unit in enumerate(model.units):
        if isinstance(unit, MultiPathUnit):
            for k, path in enumerate(unit.pathways):
                out.extend(_pathway_arrays(f"unit{i}.path{k}", path))
        elif isinstance(unit, FusedConv):
            out.append((f"unit{i}.kernels", unit.kernels.data))
            out.append((f"unit{i}.bias", unit.bias.data))
        else:
            out.extend(_pathway_arrays(f"unit{i}", unit))
    for k, (w, b) in enumerate(model.heads):
        out.append((f"head{k}.weight", w.data))
        out.append((f"head{k}.bias", b.data))
    return out


def _pathway_arrays(prefix: str, path: nn.ConvBNPathway):
    return [
        (f"{prefix}.kernels", path.kernels.data),
        (f"{prefix}.gamma", path.gamma.data),
        (f"{prefix}.beta", path.beta.data),
        (f"{prefix}.run_mu", path.run_mu),
        (f"{prefix}.run_sigma", path.run_sigma),
    ]


def _write(path: str, meta: dict, arrays) -> None:
    manifest, payload, offset = [], [], 0
    for name, arr in arrays:
        arr32 = np.ascontiguousarray(arr, dtype="<f4")
        manifest.append({"name": name, "dtype": "f4",
                         "shape": list(arr.shape), "offset": offset})
        payload.append(arr32.tobytes())
        offset += arr32.nbytes
    meta = dict(meta, manifest=manifest)
    mbytes = json.dumps(meta).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(mbytes)))
        f.write(mbytes)
        f.write(b"".join(payload))


def _read(path: str):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {VERSION}")
    (mlen,) = struct.unpack("<I", raw[8:12])
    try:
        meta = json.loads(raw[12:12 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ManifestError(f"{path}: unreadable metadata: {e}") from e
    payload = raw[12 + mlen:]
    arrays = {}
    prev_end = 0
    for entry in meta.get("manifest", []):
        size = int(np.prod(entry["shape"])) * 4 if entry["shape"] else 4
        if entry["offset"] != prev_end:
            raise ManifestError(f"{path}: manifest offsets not contiguous at {entry['name']}")
        prev_end = entry["offset"] + size
        if prev_end > len(payload):
            raise TruncatedPayloadError(f"{path}: payload truncated at {entry['name']}")
        arr = np.frombuffer(payload, dtype="<f4", count=size // 4,
                            offset=entry["offset"]).reshape(entry["shape"])
        arrays[entry["name"]] = arr.copy()
    if prev_end != len(payload):
        raise ManifestError(f"{path}: payload length {len(payload)} != manifest total {prev_end}")
    return meta, arrays


def save(model: nn.ModelBundle, path: str) -> None:
    meta = {
        "kind": "model",
        "form": model.form,
        "num_pathways": model.num_pathways,
        "num_heads": len(model.heads),
        "arch": model.arch.to_dict(),
        "merge_weights": [
            list(u.merge_weights) if isinstance(u, MultiPathUnit) else None
            for u in model.units
        ],
    }
    _write(path, meta, _named_arrays(model))


def _load_pathway(arrays, prefix, stride, padding) -> nn.ConvBNPathway:
    try:
        return nn.ConvBNPathway(
            kernels=Tensor(arrays[f"{prefix}.kernels"], requires_grad=True),
            gamma=Tensor(arrays[f"{prefix}.gamma"], requires_grad=True),
            beta=Tensor(arrays[f"{prefix}.beta"], requires_grad=True),
            run_mu=arrays[f"{prefix}.run_mu"].astype(precision.active_dtype()),
            run_sigma=arrays[f"{prefix}.run_sigma"].astype(precision.active_dtype()),
            stride=stride,
            padding=padding,
        )
    except KeyError as e:
        raise ManifestError(f"missing tensor {e.args[0]}") from e


def load(path: str) -> nn.ModelBundle:
    meta, arrays = _read(path)
    if meta.get("kind") != "model":
        raise ManifestError(f"{path}: not a model checkpoint (kind={meta.get('kind')!r})")
    arch = nn.ArchSpec.from_dict(meta["arch"])
    form = meta["form"]
    k = meta["num_pathways"]
    units = []
    try:
        for i in range(len(arch.channels)):
            if form == "multipath":
                paths = [_load_pathway(arrays, f"unit{i}.path{j}", arch.stride, arch.padding)
                         for j in range(k)]
                units.append(MultiPathUnit(paths, np.asarray(meta["merge_weights"][i])))
            elif form == "fused":
                units.append(FusedConv(
                    Tensor(arrays[f"unit{i}.kernels"], requires_grad=True),
                    Tensor(arrays[f"unit{i}.bias"], requires_grad=True),
                    arch.stride, arch.padding))
            else:
                units.append(_load_pathway(arrays, f"unit{i}", arch.stride, arch.padding))
        heads = [(Tensor(arrays[f"head{j}.weight"], requires_grad=True),
                  Tensor(arrays[f"head{j}.bias"], requires_grad=True))
                 for j in range(meta["num_heads"])]
    except KeyError as e:
        raise ManifestError(f"{path}: missing tensor {e.args[0]}") from e
    return nn.ModelBundle(units=units, heads=heads, arch=arch, form=form, num_pathways=k)


def save_dataset(dataset: LabeledSet, path: str) -> None:
    meta = {"kind": "dataset", "num_samples": len(dataset)}
    arrays = [("images", dataset.images),
              ("labels", dataset.labels.astype(np.float32))]
    _write(path, meta, arrays)


def load_dataset(path: str) -> LabeledSet:
    meta, arrays = _read(path)
    if meta.get("kind") != "dataset":
        raise ManifestError(f"{path}: not a dataset file (kind={meta.get('kind')!r})")
    return LabeledSet(images=arrays["images"].astype(np.float32),
                      labels=arrays["labels"].astype(np.int64))
