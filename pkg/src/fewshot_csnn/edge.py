"""Binary-weight, class-partitioned readout trained by a winner-take-all plasticity rule.

Each neuron holds exactly ``num_weights`` binary synapses. A learning step picks
the best-matching neuron of the labelled class and swaps some of its unused
synapses onto the active inputs it missed; its plasticity then decays. Many
neurons per class behave like cluster prototypes.

Weights are stored row-major, bit-packed into little-endian uint64 words, so a
neuron's potential is a popcount of its row ANDed with the packed pattern.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .stats import MetricsReport, compute_metrics

__all__ = [
    "EdgeLearnConfig",
    "EdgeLayer",
    "estimate_num_weights",
    "num_weights_from_mean",
    "init_edge_layer",
    "edge_learn_step",
    "edge_train",
    "classify",
    "classify_batch",
    "pack_bits",
    "unpack_bits",
]


def _round(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class EdgeLearnConfig:
    initial_plasticity: float = 1.0
    learning_competition: float = 0.0
    min_plasticity: float = 0.1
    plasticity_decay: float = 0.25
    neurons_per_class: int = 1000
    num_classes: int = 2
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.min_plasticity <= self.initial_plasticity <= 1:
            raise ValueError("need 0 <= min_plasticity <= initial_plasticity <= 1")
        if self.plasticity_decay < 0:
            raise ValueError("plasticity_decay must be >= 0")
        if not 0 <= self.learning_competition <= 1:
            raise ValueError("learning_competition must lie in [0, 1]")
        if self.neurons_per_class < 1 or self.num_classes < 1:
            raise ValueError("need at least one neuron and one class")


def pack_bits(dense: np.ndarray) -> np.ndarray:
    """Pack a boolean ``(..., D)`` array into ``(..., ceil(D / 64))`` uint64 words."""
    dense = np.asarray(dense, dtype=bool)
    d = dense.shape[-1]
    words = (d + 63) // 64
    padded = np.zeros(dense.shape[:-1] + (words * 64,), dtype=bool)
    padded[..., :d] = dense
    return np.packbits(padded, axis=-1, bitorder="little").view("<u8")


def unpack_bits(words: np.ndarray, dim: int) -> np.ndarray:
    raw = np.ascontiguousarray(words, dtype="<u8").view(np.uint8)
    return np.unpackbits(raw, axis=-1, count=dim, bitorder="little").astype(bool)


def _word_masks(idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    idx = np.asarray(idx, dtype=np.int64)
    return idx >> 6, np.left_shift(np.uint64(1), (idx & 63).astype(np.uint64))


@dataclass
class EdgeLayer:
    bits: np.ndarray  # uint64 (num_neurons, ceil(input_dim / 64))
    class_of_neuron: np.ndarray
    num_weights: int
    plasticity: np.ndarray
    input_dim: int
    config: EdgeLearnConfig = field(default_factory=EdgeLearnConfig)
    rng: Optional[np.random.Generator] = None

    @property
    def num_neurons(self) -> int:
        return len(self.class_of_neuron)

    @property
    def weights(self) -> np.ndarray:
        """Dense boolean ``(num_neurons, input_dim)`` copy."""
        return unpack_bits(self.bits, self.input_dim)

    def row(self, neuron: int) -> np.ndarray:
        """Sorted input indices connected to ``neuron``."""
        return np.flatnonzero(unpack_bits(self.bits[int(neuron)], self.input_dim))

    def _set(self, neuron: int, idx, value: bool):
        words, masks = _word_masks(idx)
        row = self.bits[int(neuron)]
        if value:
            np.bitwise_or.at(row, words, masks)
        else:
            np.bitwise_and.at(row, words, ~masks)

    def popcounts(self) -> np.ndarray:
        return np.bitwise_count(self.bits).sum(axis=1, dtype=np.int64)

    def pack_pattern(self, active) -> np.ndarray:
        vec = np.zeros(self.bits.shape[1], dtype=np.uint64)
        words, masks = _word_masks(active)
        np.bitwise_or.at(vec, words, masks)
        return vec

    def potentials(self, active, neurons=None) -> np.ndarray:
        """Integer potentials (synapse/pattern overlaps) for a pattern given by its active indices."""
        vec = self.pack_pattern(active)
        rows = self.bits if neurons is None else self.bits[neurons]
        return np.bitwise_count(rows & vec).sum(axis=1, dtype=np.int64)

    def potentials_dense(self, features: np.ndarray) -> np.ndarray:
        """Potentials for a dense binary batch ``(N, input_dim)``."""
        packed = pack_bits(np.asarray(features, dtype=bool))
        out = np.empty((len(packed), self.num_neurons), dtype=np.int64)
        for i, vec in enumerate(packed):
            out[i] = np.bitwise_count(self.bits & vec).sum(axis=1, dtype=np.int64)
        return out

    def copy(self) -> "EdgeLayer":
        rng = None
        if self.rng is not None:
            rng = np.random.Generator(type(self.rng.bit_generator)())
            rng.bit_generator.state = self.rng.bit_generator.state
        return EdgeLayer(self.bits.copy(), self.class_of_neuron.copy(), self.num_weights,
                         self.plasticity.copy(), self.input_dim, self.config, rng)


def num_weights_from_mean(mean_spikes: float) -> int:
    return max(1, _round(1.2 * mean_spikes))


def estimate_num_weights(model, inputs) -> int:
    """``max(1, round(1.2 * mean total feature spikes per sample))``."""
    from .csnn import extract_features

    inputs = np.asarray(inputs)
    if len(inputs) == 0:
        raise ValueError("cannot estimate from an empty dataset")
    counts = extract_features(model, inputs).sum(axis=1)
    return num_weights_from_mean(float(counts.mean()))


def init_edge_layer(input_dim: int, num_weights: int, config: EdgeLearnConfig = EdgeLearnConfig()) -> EdgeLayer:
    if num_weights > input_dim:
        raise ValueError(f"num_weights {num_weights} exceeds input dimension {input_dim}")
    if num_weights < 1:
        raise ValueError("num_weights must be positive")
    rng = np.random.default_rng(config.seed)
    n = config.neurons_per_class * config.num_classes
    row = np.zeros(input_dim, dtype=bool)
    bits = np.zeros((n, (input_dim + 63) // 64), dtype=np.uint64)
    for j in range(n):
        row[:] = False
        row[rng.choice(input_dim, num_weights, replace=False)] = True
        bits[j] = pack_bits(row)
    classes = np.repeat(np.arange(config.num_classes), config.neurons_per_class)
    return EdgeLayer(bits, classes, num_weights,
                     np.full(n, config.initial_plasticity, dtype=np.float64), input_dim, config, rng)


def _active(pattern, input_dim: int) -> np.ndarray:
    active = getattr(pattern, "active", pattern)
    dims = getattr(pattern, "dims", None)
    if dims is not None and int(np.prod(dims)) != input_dim:
        raise ValueError(f"pattern has {int(np.prod(dims))} units, layer expects {input_dim}")
    active = np.asarray(active, dtype=np.int64)
    if active.size and (active.min() < 0 or active.max() >= input_dim):
        raise ValueError("pattern index outside the layer input")
    return active


def _pick(rng, pool: np.ndarray, k: int) -> np.ndarray:
    if k <= 0:
        return pool[:0]
    return pool[rng.choice(pool.size, k, replace=False)]


def _mask(active: np.ndarray, dim: int) -> np.ndarray:
    mask = np.zeros(dim, dtype=bool)
    mask[active] = True
    return mask


def _learn(layer: EdgeLayer, mask: np.ndarray, pots: np.ndarray, label: int) -> list:
    """Apply the rule given precomputed potentials; returns ``[(neuron, cleared, added)]``."""
    cfg = layer.config
    if layer.rng is None:
        layer.rng = np.random.default_rng(cfg.seed)
    rng = layer.rng
    members = np.flatnonzero(layer.class_of_neuron == label)
    if members.size == 0:
        raise ValueError(f"unknown class label {label}")
    winner = int(members[np.argmax(pots[members])])
    changes = []

    row = unpack_bits(layer.bits[winner], layer.input_dim)
    miss = np.flatnonzero(mask & ~row)
    m = min(_round(layer.plasticity[winner] * miss.size), layer.num_weights)
    if m:
        outside = np.flatnonzero(row & ~mask)
        cleared = _pick(rng, outside, min(m, outside.size))
        if cleared.size < m:
            overlap = np.flatnonzero(row & mask)
            cleared = np.concatenate([cleared, _pick(rng, overlap, m - cleared.size)])
        added = _pick(rng, miss, m)
        layer._set(winner, cleared, False)
        layer._set(winner, added, True)
        changes.append((winner, cleared, added))
    layer.plasticity[winner] = max(cfg.min_plasticity, layer.plasticity[winner] - cfg.plasticity_decay)

    if cfg.learning_competition > 0:
        rivals = np.flatnonzero(layer.class_of_neuron != label)
        if rivals.size:
            rival = int(rivals[np.argmax(pots[rivals])])
            rrow = unpack_bits(layer.bits[rival], layer.input_dim)
            overlap = np.flatnonzero(rrow & mask)
            free = np.flatnonzero(~rrow & ~mask)
            k = min(_round(cfg.learning_competition * overlap.size), free.size)
            if k:
                cleared, added = _pick(rng, overlap, k), _pick(rng, free, k)
                layer._set(rival, cleared, False)
                layer._set(rival, added, True)
                changes.append((rival, cleared, added))
    return changes


def edge_learn_step(layer: EdgeLayer, pattern, label: int) -> EdgeLayer:
    """One in-place learning event; returns ``layer`` for chaining.

    The winner is the best-matching neuron of class ``label``. It moves
    ``round(plasticity * |missed inputs|)`` synapses from inputs outside the
    pattern onto missed active inputs, then its plasticity drops by the decay
    (floored at the minimum). With competition enabled the best wrong-class
    neuron also sheds a fraction of its overlap with the pattern.
    """
    if label not in set(layer.class_of_neuron.tolist()):
        raise ValueError(f"unknown class label {label}")
    active = _active(pattern, layer.input_dim)
    _learn(layer, _mask(active, layer.input_dim), layer.potentials(active), int(label))
    return layer


def classify(layer: EdgeLayer, pattern) -> tuple[int, np.ndarray]:
    """Class of the highest-potential neuron (lowest index wins ties) and all potentials."""
    pots = layer.potentials(_active(pattern, layer.input_dim))
    return int(layer.class_of_neuron[int(np.argmax(pots))]), pots


def classify_batch(layer: EdgeLayer, features: np.ndarray) -> np.ndarray:
    features = np.asarray(features)
    if features.ndim != 2 or features.shape[1] != layer.input_dim:
        raise ValueError(f"expected features of width {layer.input_dim}")
    return layer.class_of_neuron[np.argmax(_overlaps(layer, features), axis=1)]


def _overlaps(layer: EdgeLayer, features: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """``features @ weights.T`` for a binary batch, blocked over the input axis."""
    out = np.zeros((len(features), layer.num_neurons), dtype=np.float64)
    for start in range(0, layer.input_dim, chunk):
        stop = min(start + chunk, layer.input_dim)
        w0, w1 = start // 64, (stop + 63) // 64
        block = unpack_bits(layer.bits[:, w0:w1], (w1 - w0) * 64)[:, start - w0 * 64 : stop - w0 * 64]
        out += features[:, start:stop].astype(np.float32) @ block.T.astype(np.float32)
    return np.rint(out).astype(np.int64)


def _as_features(samples, input_dim: int) -> np.ndarray:
    if isinstance(samples, np.ndarray) and samples.ndim == 2:
        if samples.shape[1] != input_dim:
            raise ValueError(f"expected features of width {input_dim}")
        return samples.astype(bool, copy=False)
    out = np.zeros((len(samples), input_dim), dtype=bool)
    for i, p in enumerate(samples):
        out[i, _active(p, input_dim)] = True
    return out


def edge_train(layer: EdgeLayer, samples, labels, epochs: int = 25,
               eval_samples=None, eval_labels=None, seed: Optional[int] = None,
               log=None, on_epoch=None) -> tuple[EdgeLayer, list[MetricsReport]]:
    """Seeded-shuffled learning epochs; metrics are taken on the evaluation partition after each.

    ``samples`` may be a binary ``(N, input_dim)`` matrix or a list of spike
    patterns. Without an explicit evaluation set the training set is scored.
    ``on_epoch(epoch, predictions)`` is called after each epoch with the
    evaluation-set predictions. Potentials of every sample are cached and patched only for the neurons a
    step rewires, which gives the same result as recomputing them.
    """
    x = _as_features(samples, layer.input_dim)
    labels = np.asarray(labels, dtype=np.int64)
    if len(x) == 0:
        raise ValueError("cannot train on an empty dataset")
    if len(x) != len(labels):
        raise ValueError("samples and labels differ in length")
    if eval_samples is None:
        xe, eval_labels = x, labels
    else:
        xe = _as_features(eval_samples, layer.input_dim)
        eval_labels = np.asarray(eval_labels, dtype=np.int64)
    unknown = set(labels.tolist()) - set(layer.class_of_neuron.tolist())
    if unknown:
        raise ValueError(f"unknown class labels {sorted(unknown)}")
    rng = np.random.default_rng(layer.config.seed + 1 if seed is None else seed)
    history = []
    if epochs <= 0:
        return layer, history
    pots = _overlaps(layer, x)
    pots_eval = pots if xe is x else _overlaps(layer, xe)
    # input-major copies make the per-step column gathers contiguous
    caches = [(pots, np.ascontiguousarray(x.T).view(np.uint8))]
    if xe is not x:
        caches.append((pots_eval, np.ascontiguousarray(xe.T).view(np.uint8)))
    for epoch in range(epochs):
        for i in rng.permutation(len(x)):
            for neuron, cleared, added in _learn(layer, x[i], pots[i], int(labels[i])):
                for cache, cols in caches:
                    # int32 accumulation is exact here and much faster than int64
                    cache[:, neuron] += (cols[added].sum(axis=0, dtype=np.int32)
                                         - cols[cleared].sum(axis=0, dtype=np.int32))
        preds = layer.class_of_neuron[np.argmax(pots_eval, axis=1)]
        report = compute_metrics(preds, eval_labels)
        history.append(report)
        if on_epoch is not None:
            on_epoch(epoch + 1, preds)
        if log is not None:
            log(f"edge epoch {epoch + 1}/{epochs}: acc {report.accuracy:.4f} tpr {report.tpr} tnr {report.tnr}")
    return layer, history
