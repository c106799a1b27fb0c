"""On-disk formats: dataset archives and model checkpoints.

Both are directories holding a ``manifest.json`` plus raw little-endian blobs,
so every array round-trips bit-exactly and the metadata stays human readable.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np

from .edge import EdgeLayer, EdgeLearnConfig
from .eeg import LabeledDataset
from .quantization import QuantizedCnn, QuantizedTensor, ThresholdSet

__all__ = [
    "write_dataset_archive",
    "read_dataset_archive",
    "save_checkpoint",
    "load_checkpoint",
]

FORMAT_VERSION = 1


def _write_json(path: Path, payload: dict):
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _read_manifest(root: Path) -> dict:
    path = root / "manifest.json"
    if not path.is_file():
        raise FileNotFoundError(f"no manifest at {path}")
    return json.loads(path.read_text())


def write_dataset_archive(root, splits: dict, extra: Optional[dict] = None) -> Path:
    """Write ``{split_name: LabeledDataset}`` as one int8 blob per split."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {"format": "dataset", "version": FORMAT_VERSION, "splits": {}}
    manifest.update(extra or {})
    for name, ds in splits.items():
        blob = f"{name}.int8"
        np.ascontiguousarray(ds.data, dtype=np.int8).tofile(root / blob)
        manifest["splits"][name] = {
            "blob": blob,
            "shape": list(ds.data.shape),
            "channels": list(ds.channels),
            "labels": ds.labels.tolist(),
            "participants": ds.participants.tolist(),
            "trial_ids": list(ds.trial_ids),
        }
    _write_json(root / "manifest.json", manifest)
    return root


def read_dataset_archive(root) -> tuple[dict, dict]:
    """Return ``({split_name: LabeledDataset}, manifest)``."""
    root = Path(root)
    manifest = _read_manifest(root)
    if manifest.get("format") != "dataset":
        raise ValueError(f"{root} is not a dataset archive")
    out = {}
    for name, meta in manifest["splits"].items():
        data = np.fromfile(root / meta["blob"], dtype=np.int8)
        expected = int(np.prod(meta["shape"]))
        if data.size != expected:
            raise ValueError(f"{root / meta['blob']}: {data.size} bytes, manifest says {expected}")
        out[name] = LabeledDataset(data.reshape(meta["shape"]), meta["labels"], meta["participants"],
                                   meta["trial_ids"], tuple(meta["channels"]))
    return out, manifest


def _put(root: Path, name: str, arr: np.ndarray, table: dict):
    arr = np.ascontiguousarray(arr)
    dtype = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    arr.astype(dtype).tofile(root / f"{name}.bin")
    table[name] = {"dtype": dtype.str, "shape": list(arr.shape)}


def _get(root: Path, name: str, table: dict) -> np.ndarray:
    meta = table[name]
    return np.fromfile(root / f"{name}.bin", dtype=np.dtype(meta["dtype"])).reshape(meta["shape"])


def save_checkpoint(root, q: QuantizedCnn, edge: Optional[EdgeLayer] = None) -> Path:
    """Persist integer parameters, thresholds and an optional edge layer."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for name in ("conv1", "conv2", "dense"):
        _put(root, name, getattr(q, name).values, arrays)
        _put(root, f"{name}_bias", getattr(q, f"{name}_bias"), arrays)
    manifest = {
        "format": "checkpoint", "version": FORMAT_VERSION, "arrays": arrays,
        "scales": {n: getattr(q, n).scale for n in ("conv1", "conv2", "dense")},
        "thresholds": list(q.thresholds.as_tuple()),
        "input_shape": list(q.input_shape), "padding": q.padding, "pool": q.pool,
    }
    if edge is not None:
        _put(root, "edge_bits", edge.bits, arrays)
        _put(root, "edge_plasticity", edge.plasticity, arrays)
        _put(root, "edge_classes", edge.class_of_neuron.astype(np.int64), arrays)
        manifest["edge"] = {"num_weights": edge.num_weights, "input_dim": edge.input_dim,
                            "config": edge.config.__dict__.copy()}
    _write_json(root / "manifest.json", manifest)
    return root


def load_checkpoint(root) -> tuple[QuantizedCnn, Optional[EdgeLayer]]:
    root = Path(root)
    manifest = _read_manifest(root)
    if manifest.get("format") != "checkpoint":
        raise ValueError(f"{root} is not a checkpoint")
    arrays = manifest["arrays"]
    parts = {}
    for name in ("conv1", "conv2", "dense"):
        parts[name] = QuantizedTensor(_get(root, name, arrays), manifest["scales"][name])
        parts[f"{name}_bias"] = _get(root, f"{name}_bias", arrays)
    q = QuantizedCnn(thresholds=ThresholdSet(*manifest["thresholds"]),
                     input_shape=tuple(manifest["input_shape"]), padding=manifest["padding"],
                     pool=manifest["pool"], **parts)
    edge = None
    if "edge" in manifest:
        meta = manifest["edge"]
        edge = EdgeLayer(_get(root, "edge_bits", arrays), _get(root, "edge_classes", arrays),
                         meta["num_weights"], _get(root, "edge_plasticity", arrays),
                         meta["input_dim"], EdgeLearnConfig(**meta["config"]))
    return q, edge
