"""Spiking runtime: dense reference inference, event-driven inference and op counting.

Both paths share the integer first layer (its input is not binary). After the
first binarization the event path only touches active spikes, so every
multiply degenerates to a weight accumulation. Op counts feed the energy proxy.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .quantization import QuantizedCnn, int_conv, or_pool

__all__ = [
    "SpikePattern",
    "LayerOps",
    "OpCount",
    "CsnnModel",
    "InferenceResult",
    "convert_to_csnn",
    "infer_dense",
    "infer_event",
    "extract_features",
    "accumulator_bound",
    "tap_density",
]

LAYERS = ("conv1", "conv2", "readout")


@dataclass(frozen=True)
class SpikePattern:
    """Sorted flat indices of the active units of a map with extents ``dims``."""

    dims: tuple
    active: np.ndarray

    def __post_init__(self):
        active = np.asarray(self.active, dtype=np.int64).ravel()
        size = int(np.prod(self.dims)) if len(self.dims) else 0
        if active.size and (np.any(np.diff(active) <= 0) or active[0] < 0 or active[-1] >= size):
            raise ValueError("spike indices must be strictly increasing and inside the map")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "active", active)

    @classmethod
    def from_dense(cls, spikes) -> "SpikePattern":
        spikes = np.asarray(spikes)
        return cls(spikes.shape, np.flatnonzero(spikes.ravel()))

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    @property
    def count(self) -> int:
        return int(self.active.size)

    @property
    def density(self) -> float:
        return self.count / self.size if self.size else 0.0

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.size, dtype=bool)
        out[self.active] = True
        return out.reshape(self.dims)

    def __eq__(self, other):
        if not isinstance(other, SpikePattern):
            return NotImplemented
        return self.dims == other.dims and np.array_equal(self.active, other.active)

    __hash__ = None


@dataclass
class LayerOps:
    dense_macs: int = 0
    event_accumulates: int = 0
    weight_fetches: int = 0
    event_driven: bool = False

    def __add__(self, other: "LayerOps") -> "LayerOps":
        if self.event_driven != other.event_driven:
            raise ValueError("cannot add op counts of differently executed layers")
        return LayerOps(self.dense_macs + other.dense_macs,
                        self.event_accumulates + other.event_accumulates,
                        self.weight_fetches + other.weight_fetches, self.event_driven)


@dataclass
class OpCount:
    """Per-layer operation counts with totals.

    ``dense_macs`` is what a dense execution of the layer would cost, so the
    ratio ``event_accumulates / dense_macs`` is directly comparable per layer.
    """

    layers: dict = field(default_factory=dict)

    @property
    def dense_macs(self) -> int:
        return sum(l.dense_macs for l in self.layers.values())

    @property
    def event_accumulates(self) -> int:
        return sum(l.event_accumulates for l in self.layers.values())

    @property
    def weight_fetches(self) -> int:
        return sum(l.weight_fetches for l in self.layers.values())

    def __add__(self, other: "OpCount") -> "OpCount":
        names = list(self.layers) + [n for n in other.layers if n not in self.layers]
        merged = {}
        for n in names:
            a, b = self.layers.get(n), other.layers.get(n)
            merged[n] = a + b if a is not None and b is not None else (a or b)
        return OpCount(merged)


@dataclass(frozen=True)
class CsnnModel:
    """Converted network: integer conv stages plus an optional binary edge readout."""

    q: QuantizedCnn
    edge: Optional[object] = None

    @property
    def input_shape(self) -> tuple:
        return tuple(self.q.input_shape)

    @property
    def feature_dim(self) -> int:
        return self.q.feature_dim

    @property
    def num_layers(self) -> int:
        return 3


@dataclass
class InferenceResult:
    potentials: np.ndarray
    trace: dict  # layer name -> SpikePattern
    ops: OpCount

    @property
    def features(self) -> SpikePattern:
        return self.trace["features"]


def convert_to_csnn(q: QuantizedCnn, edge=None) -> CsnnModel:
    """Wrap a quantized network, optionally replacing its dense readout with ``edge``."""
    c, h, w = q.input_shape
    if q.conv1.shape[1] != c or q.conv2.shape[1] != q.conv1.shape[0]:
        raise ValueError("convolution channel counts do not chain")
    if q.dense.shape[0] != q.feature_dim:
        raise ValueError(f"dense readout expects {q.dense.shape[0]} inputs, "
                         f"feature map flattens to {q.feature_dim}")
    if edge is not None and edge.input_dim != q.feature_dim:
        raise ValueError(f"edge layer input dimension {edge.input_dim} does not match "
                         f"flattened spike dimension {q.feature_dim}")
    return CsnnModel(q, edge)


def accumulator_bound(q: QuantizedCnn) -> int:
    """Largest accumulator magnitude any input can produce in either conv stage."""
    k1 = int(np.prod(q.conv1.shape[1:]))
    k2 = int(np.prod(q.conv2.shape[1:]))
    b1 = 127 * 127 * k1 + int(np.abs(q.conv1_bias).max(initial=0))
    b2 = 127 * k2 + int(np.abs(q.conv2_bias).max(initial=0))
    b3 = 127 * q.feature_dim + int(np.abs(q.dense_bias).max(initial=0))
    return max(b1, b2, b3)


def _as_batch(model: CsnnModel, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    shape = model.input_shape
    if x.shape == shape[1:] and shape[0] == 1:
        return x[None, None], True
    if x.shape == shape:
        return x[None], True
    if x.ndim == 4 and x.shape[1:] == shape:
        return x, False
    raise ValueError(f"input shape {x.shape} does not match model input {shape}")


def _conv_macs(q: QuantizedCnn, acc_shape: tuple, weights) -> int:
    _, ho, wo, f = acc_shape
    return int(f * ho * wo * np.prod(weights.shape[1:]))


def _readout_dense(model: CsnnModel, feats: np.ndarray) -> np.ndarray:
    if model.edge is None:
        w = model.q.dense.values.astype(np.int64)
        return feats.astype(np.int64) @ w + model.q.dense_bias
    return model.edge.potentials_dense(feats)


def _readout_dim(model: CsnnModel) -> int:
    return model.edge.num_neurons if model.edge is not None else model.q.dense.shape[1]


def _trace(names, maps) -> dict:
    return {n: SpikePattern.from_dense(m) for n, m in zip(names, maps)}


def infer_dense(model: CsnnModel, x) -> InferenceResult | list[InferenceResult]:
    """Reference path: every layer evaluated densely in integer arithmetic."""
    xb, single = _as_batch(model, x)
    q = model.q
    th1, th2 = q.thresholds.as_tuple()
    acc1 = int_conv(xb.transpose(0, 2, 3, 1), q.conv1.values, q.conv1_bias, q.pad1)
    spk1 = acc1 > th1
    pool1 = or_pool(spk1, q.pool)
    acc2 = int_conv(pool1, q.conv2.values, q.conv2_bias, q.pad2)
    spk2 = acc2 > th2
    pool2 = or_pool(spk2, q.pool)
    feats = pool2.reshape(len(xb), -1)
    pots = _readout_dense(model, feats)
    m1 = _conv_macs(q, (1,) + acc1.shape[1:], q.conv1.values)
    m2 = _conv_macs(q, (1,) + acc2.shape[1:], q.conv2.values)
    m3 = q.feature_dim * _readout_dim(model)
    results = []
    for i in range(len(xb)):
        ops = OpCount({
            "conv1": LayerOps(m1, 0, m1, False),
            "conv2": LayerOps(m2, 0, m2, False),
            "readout": LayerOps(m3, 0, m3, False),
        })
        trace = _trace(("spikes1", "pool1", "spikes2", "features"),
                       (spk1[i], pool1[i], spk2[i], feats[i]))
        results.append(InferenceResult(pots[i], trace, ops))
    return results[0] if single else results


def tap_density(pool1: SpikePattern, kernel: int, pad: int) -> float:
    """Fraction of second-layer (output, tap) pairs that land on an active spike.

    With zero padding, border units feed fewer outputs than interior ones; this
    is the density for which ``accumulates == density * dense_macs`` holds exactly.
    """
    h, w, c = pool1.dims
    ho, wo = h + 2 * pad - kernel + 1, w + 2 * pad - kernel + 1
    y, x, _ = np.unravel_index(pool1.active, pool1.dims)
    reach_y = _reach(y, h, ho, kernel, pad)
    reach_x = _reach(x, w, wo, kernel, pad)
    return float(np.sum(reach_y * reach_x)) / (ho * wo * kernel * kernel * c)


def _reach(pos, extent, out_extent, kernel, pad):
    # number of output rows whose window covers input row ``pos``
    lo = np.maximum(pos + pad - kernel + 1, 0)
    hi = np.minimum(pos + pad, out_extent - 1)
    return np.maximum(hi - lo + 1, 0)


def _sparse_cols(active_yxc: tuple, in_hw: tuple, channels: int, kernel: int, pad: int):
    """Sparse im2col of a binary map: one nonzero per (output, tap) that hits a spike."""
    y, x, c = active_yxc
    h, w = in_hw
    ho, wo = h + 2 * pad - kernel + 1, w + 2 * pad - kernel + 1
    rows, cols = [], []
    for ky in range(kernel):
        for kx in range(kernel):
            oy, ox = y + pad - ky, x + pad - kx
            ok = (oy >= 0) & (oy < ho) & (ox >= 0) & (ox < wo)
            rows.append(oy[ok] * wo + ox[ok])
            cols.append((ky * kernel + kx) * channels + c[ok])
    rows = np.concatenate(rows) if rows else np.zeros(0, np.int64)
    cols = np.concatenate(cols) if cols else np.zeros(0, np.int64)
    data = np.ones(rows.size, dtype=np.float32)
    return sp.csr_matrix((data, (rows, cols)), shape=(ho * wo, kernel * kernel * channels)), (ho, wo)


def _event_pool(active_yxc: tuple, in_dims: tuple, size: int) -> SpikePattern:
    y, x, c = active_yxc
    h, w, ch = in_dims
    ho, wo = h // size, w // size
    keep = (y < ho * size) & (x < wo * size)
    flat = np.ravel_multi_index((y[keep] // size, x[keep] // size, c[keep]), (ho, wo, ch))
    return SpikePattern((ho, wo, ch), np.unique(flat))


def infer_event(model: CsnnModel, x) -> InferenceResult | list[InferenceResult]:
    """Event-driven path. Downstream of the first binarization only active spikes are touched."""
    xb, single = _as_batch(model, x)
    q = model.q
    th1, th2 = q.thresholds.as_tuple()
    acc1 = int_conv(xb.transpose(0, 2, 3, 1), q.conv1.values, q.conv1_bias, q.pad1)
    m1 = _conv_macs(q, (1,) + acc1.shape[1:], q.conv1.values)
    f2, c2, k2, _ = q.conv2.shape
    kmat = q.conv2.values.transpose(2, 3, 1, 0).reshape(k2 * k2 * c2, f2).astype(np.float32)
    results = []
    for i in range(len(xb)):
        spk1 = SpikePattern.from_dense(acc1[i] > th1)
        pool1 = _event_pool(np.unravel_index(spk1.active, spk1.dims), spk1.dims, q.pool)
        ph, pw, _ = pool1.dims
        cols, (ho, wo) = _sparse_cols(np.unravel_index(pool1.active, pool1.dims), (ph, pw), c2, k2, q.pad2)
        # each stored entry is one spike reaching one tap: F accumulations
        acc2 = np.rint(cols @ kmat).astype(np.int64) + q.conv2_bias
        m2 = f2 * ho * wo * k2 * k2 * c2
        a2 = int(cols.nnz) * f2
        spk2 = SpikePattern((ho, wo, f2), np.flatnonzero(acc2.ravel() > th2))
        feats = _event_pool(np.unravel_index(spk2.active, spk2.dims), spk2.dims, q.pool)
        feat_flat = SpikePattern((feats.size,), feats.active)
        n_out = _readout_dim(model)
        if model.edge is not None:
            pots = model.edge.potentials(feat_flat.active)
            a3 = int(pots.sum())  # binary synapses: one accumulate per connected active input
        else:
            w = model.q.dense.values.astype(np.int64)
            pots = w[feat_flat.active].sum(axis=0) + q.dense_bias
            a3 = feat_flat.count * n_out
        m3 = q.feature_dim * n_out
        ops = OpCount({
            "conv1": LayerOps(m1, 0, m1, False),
            "conv2": LayerOps(m2, a2, a2, True),
            "readout": LayerOps(m3, a3, a3, True),
        })
        trace = {"spikes1": spk1, "pool1": pool1, "spikes2": spk2, "features": feat_flat}
        results.append(InferenceResult(np.asarray(pots, dtype=np.int64), trace, ops))
    return results[0] if single else results


def extract_features(model: CsnnModel, x, batch_size: int = 32) -> np.ndarray:
    """Flattened binary feature maps ``(N, feature_dim)`` for a batch of int8 inputs."""
    xb, _ = _as_batch(model, x)
    return model.q.features(xb, batch_size)
