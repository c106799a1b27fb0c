"""8-bit weight quantization, single-bit activations and quantization-aware retraining.

Integer semantics of a converted network (all accumulators are exact integers)::

    acc1 = conv(x_int8, q1) + b1          spikes1 = acc1 > theta1   -> OR-pool
    acc2 = conv(spikes1, q2) + b2         spikes2 = acc2 > theta2   -> OR-pool -> flatten
    logits = features @ q3 + b3

Biases live in accumulator units, i.e. ``b_float / (weight_scale * input_scale)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .stats import compute_metrics
from .tensor import (CnnModel, MaxPool2D, TrainConfig, TrainingDivergedError,
                     batch_weighted_cross_entropy, col2im, im2col, kernel_matrix, _pad_amount)

__all__ = [
    "INPUT_SCALE",
    "QuantizedTensor",
    "ThresholdSet",
    "QuantizedCnn",
    "QatConfig",
    "round_half_away",
    "quantize_weights",
    "quantize_cnn",
    "calibrate_thresholds",
    "binarize",
    "qat_retrain",
    "quantize_data",
    "to_float_input",
    "int_conv",
    "or_pool",
]

# float networks see int8 data divided by this
INPUT_SCALE = 1.0 / 127.0
QMAX = 127


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def to_float_input(x_int: np.ndarray, dtype=np.float32) -> np.ndarray:
    """int8 segments ``(N, C, H, W)`` -> the float network's input range."""
    return x_int.astype(dtype) * dtype(INPUT_SCALE)


@dataclass
class QuantizedTensor:
    values: np.ndarray
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if self.values.size and np.abs(self.values.astype(np.int64)).max() > QMAX:
            raise ValueError("quantized values outside [-127, 127]")

    def dequantize(self) -> np.ndarray:
        return self.values.astype(np.float64) * self.scale

    @property
    def shape(self):
        return self.values.shape


def quantize_weights(t, bits: int = 8) -> QuantizedTensor:
    """Symmetric max-abs quantization with round-half-away-from-zero."""
    t = np.asarray(t, dtype=np.float64)
    qmax = 2 ** (bits - 1) - 1
    peak = float(np.abs(t).max()) if t.size else 0.0
    if peak == 0.0:
        return QuantizedTensor(np.zeros(t.shape, dtype=np.int8), 1.0)
    scale = peak / qmax
    values = np.clip(round_half_away(t / scale), -qmax, qmax).astype(np.int8)
    return QuantizedTensor(values, scale)


def quantize_data(segment) -> np.ndarray:
    """Per-segment symmetric map of float samples onto int8 bins [-127, 127]."""
    seg = np.asarray(segment, dtype=np.float64)
    if not np.all(np.isfinite(seg)):
        raise ValueError("segment contains non-finite samples")
    peak = float(np.abs(seg).max()) if seg.size else 0.0
    if peak == 0.0:
        return np.zeros(seg.shape, dtype=np.int8)
    return np.clip(round_half_away(QMAX * seg / peak), -QMAX, QMAX).astype(np.int8)


def binarize(preact, threshold):
    """Spike wherever the integer pre-activation strictly exceeds the threshold."""
    return (np.asarray(preact) > threshold).astype(np.uint8)


@dataclass
class ThresholdSet:
    conv1: int = 0
    conv2: int = 0

    def __post_init__(self):
        if self.conv1 < 0 or self.conv2 < 0:
            raise ValueError("thresholds must be nonnegative")

    def as_tuple(self):
        return self.conv1, self.conv2


def _exact_dtype(bound: float):
    # integer-valued partial sums stay exact below the mantissa limit
    if bound < 2**24:
        return np.float32
    if bound < 2**53:
        return np.float64
    raise OverflowError("accumulator bound exceeds exact float range")


def _magnitude_bound(a: np.ndarray) -> float:
    if a.dtype == np.bool_:
        return 1.0
    if a.dtype == np.int8:
        return 128.0
    return float(np.abs(a).max()) if a.size else 0.0


def int_conv(x: np.ndarray, weights: np.ndarray, bias: np.ndarray, pad: int) -> np.ndarray:
    """Exact integer convolution of channels-last ``x`` with ``(F, C, k, k)`` integer weights.

    Runs through BLAS in a float type wide enough that every partial sum is exact,
    then returns integer accumulators of shape ``(N, Ho, Wo, F)`` (int32 when the
    worst case fits, int64 otherwise).
    """
    f, _, k, _ = weights.shape
    n, h, w, _ = x.shape
    taps = weights.shape[1] * k * k
    bound = _magnitude_bound(x) * _magnitude_bound(weights) * taps
    dt = _exact_dtype(bound)
    cols = im2col(x.astype(dt, copy=False), k, k, pad)
    out = cols @ kernel_matrix(weights.astype(dt)).T
    ho, wo = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    bias = np.asarray(bias, dtype=np.int64)
    total = bound + float(np.abs(bias).max(initial=0))
    acc = out.astype(np.int32 if total < 2**31 - 1 else np.int64)
    acc += bias.astype(acc.dtype)
    return acc.reshape(n, ho, wo, f)


def or_pool(spikes: np.ndarray, size: int = 2) -> np.ndarray:
    """Max-pool of a binary channels-last map, i.e. logical OR over each window."""
    n, h, w, c = spikes.shape
    ho, wo = h // size, w // size
    out = np.zeros((n, ho, wo, c), dtype=bool)
    for i in range(size):
        for j in range(size):
            out |= spikes[:, i : ho * size : size, j : wo * size : size, :].astype(bool)
    return out


@dataclass
class QuantizedCnn:
    """Integer mirror of :class:`CnnModel` with firing thresholds.

    ``shadow`` optionally carries the float weights used during retraining.
    """

    conv1: QuantizedTensor
    conv1_bias: np.ndarray
    conv2: QuantizedTensor
    conv2_bias: np.ndarray
    dense: QuantizedTensor
    dense_bias: np.ndarray
    thresholds: ThresholdSet
    input_shape: tuple
    padding: str = "same"
    pool: int = 2
    shadow: Optional[dict] = None
    history: list = field(default_factory=list)

    @property
    def pad1(self) -> int:
        return _pad_amount(self.conv1.shape[-1], self.padding)

    @property
    def pad2(self) -> int:
        return _pad_amount(self.conv2.shape[-1], self.padding)

    @property
    def feature_shape(self) -> tuple:
        """``(H, W, C)`` of the pooled second-layer spike map."""
        _, h, w = self.input_shape
        k1, k2 = self.conv1.shape[-1], self.conv2.shape[-1]
        h, w = (h + 2 * self.pad1 - k1 + 1) // self.pool, (w + 2 * self.pad1 - k1 + 1) // self.pool
        h, w = (h + 2 * self.pad2 - k2 + 1) // self.pool, (w + 2 * self.pad2 - k2 + 1) // self.pool
        return h, w, self.conv2.shape[0]

    @property
    def feature_dim(self) -> int:
        return int(np.prod(self.feature_shape))

    def stages(self, x_int: np.ndarray) -> dict:
        """Every intermediate of the integer forward pass for a ``(N, C, H, W)`` batch."""
        x = np.asarray(x_int)
        if tuple(x.shape[1:]) != tuple(self.input_shape):
            raise ValueError(f"expected inputs of shape {self.input_shape}, got {tuple(x.shape[1:])}")
        x = x.transpose(0, 2, 3, 1)
        th1, th2 = self.thresholds.as_tuple()
        acc1 = int_conv(x, self.conv1.values, self.conv1_bias, self.pad1)
        spk1 = acc1 > th1
        pool1 = or_pool(spk1, self.pool)
        acc2 = int_conv(pool1, self.conv2.values, self.conv2_bias, self.pad2)
        spk2 = acc2 > th2
        pool2 = or_pool(spk2, self.pool)
        features = pool2.reshape(len(x), -1)
        logits = features.astype(np.int64) @ self.dense.values.astype(np.int64) + self.dense_bias
        return dict(acc1=acc1, spikes1=spk1, pool1=pool1, acc2=acc2, spikes2=spk2,
                    pool2=pool2, features=features, logits=logits)

    def features(self, x_int: np.ndarray, batch_size: int = 32) -> np.ndarray:
        out = [self.stages(x_int[i : i + batch_size])["features"] for i in range(0, len(x_int), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.feature_dim), dtype=bool)

    def logits(self, x_int: np.ndarray, batch_size: int = 32) -> np.ndarray:
        feats = self.features(x_int, batch_size).astype(np.int64)
        return feats @ self.dense.values.astype(np.int64) + self.dense_bias

    def predict(self, x_int: np.ndarray, batch_size: int = 32) -> np.ndarray:
        return self.logits(x_int, batch_size).argmax(axis=1)


def _bias_units(bias: np.ndarray, unit: float) -> np.ndarray:
    return round_half_away(np.asarray(bias, dtype=np.float64) / unit).astype(np.int64)


def _quantize_params(params: dict, input_shape, padding, pool, thresholds) -> QuantizedCnn:
    q1 = quantize_weights(params["conv1.weight"])
    q2 = quantize_weights(params["conv2.weight"])
    q3 = quantize_weights(params["dense.weight"])
    return QuantizedCnn(
        conv1=q1, conv1_bias=_bias_units(params["conv1.bias"], q1.scale * INPUT_SCALE),
        conv2=q2, conv2_bias=_bias_units(params["conv2.bias"], q2.scale),
        dense=q3, dense_bias=_bias_units(params["dense.bias"], q3.scale),
        thresholds=thresholds, input_shape=tuple(input_shape), padding=padding, pool=pool,
        shadow={k: np.array(v, dtype=np.float64) for k, v in params.items()},
    )


def quantize_cnn(model: CnnModel, thresholds: Optional[ThresholdSet] = None) -> QuantizedCnn:
    """Quantize every parameter tensor of a trained float model (thresholds default to 0)."""
    return _quantize_params(model.state_dict(), model.input_shape, model.padding,
                            model.layers[2].size, thresholds or ThresholdSet())


def _nearest_rank(values: np.ndarray, percentile: float) -> int:
    n = values.size
    rank = max(1, math.ceil(percentile / 100.0 * n))
    return int(np.partition(values, rank - 1)[rank - 1])


def calibrate_thresholds(model: QuantizedCnn, calibration, percentile: float = 50.0,
                         batch_size: int = 16) -> ThresholdSet:
    """Per-layer threshold = nearest-rank percentile of the positive integer pre-activations.

    Layer 2 statistics are gathered with layer 1 already firing at its new threshold.
    """
    calibration = np.asarray(calibration)
    if len(calibration) == 0:
        raise ValueError("calibration set is empty")
    probe = replace(model, thresholds=ThresholdSet(0, 0))
    pos1 = []
    for i in range(0, len(calibration), batch_size):
        acc1 = probe.stages(calibration[i : i + batch_size])["acc1"]
        pos1.append(acc1[acc1 > 0])
    pos1 = np.concatenate(pos1)
    th1 = _nearest_rank(pos1, percentile) if pos1.size else 0
    probe = replace(model, thresholds=ThresholdSet(th1, 0))
    pos2 = []
    for i in range(0, len(calibration), batch_size):
        acc2 = probe.stages(calibration[i : i + batch_size])["acc2"]
        pos2.append(acc2[acc2 > 0])
    pos2 = np.concatenate(pos2)
    th2 = _nearest_rank(pos2, percentile) if pos2.size else 0
    return ThresholdSet(th1, th2)


@dataclass
class QatConfig:
    max_epochs: int = 150
    target: float = 0.90
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    seed: int = 0
    class_weights: tuple = (1.0, 1.0)
    surrogate_width: float = 0.5
    max_grad_norm: float = 1.0  # global clip; binary features make raw steps very large


class _QatNet:
    """Fake-quantized training graph: integer forward, straight-through backward."""

    def __init__(self, qmodel: QuantizedCnn):
        if qmodel.shadow is None:
            raise ValueError("retraining needs float shadow weights")
        self.q = qmodel
        self.params = {k: np.array(v, dtype=np.float64) for k, v in qmodel.shadow.items()}
        self.velocity = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.pool1 = MaxPool2D(qmodel.pool)
        self.pool2 = MaxPool2D(qmodel.pool)
        # thresholds are held fixed in float units so that a change of weight scale
        # does not silently move every neuron's firing point
        th1, th2 = qmodel.thresholds.as_tuple()
        self.float_thresholds = (th1 * qmodel.conv1.scale * INPUT_SCALE, th2 * qmodel.conv2.scale)

    def export(self) -> QuantizedCnn:
        q = self.q
        out = _quantize_params(self.params, q.input_shape, q.padding, q.pool, q.thresholds)
        f1, f2 = self.float_thresholds
        out.thresholds = ThresholdSet(int(round_half_away(f1 / (out.conv1.scale * INPUT_SCALE))),
                                      int(round_half_away(f2 / out.conv2.scale)))
        return out

    @staticmethod
    def _surrogate(acc, theta, unit, width):
        # normalised fast-sigmoid derivative around the firing threshold, evaluated in
        # accumulator units and rescaled to float units
        a = acc.astype(np.float32)
        sample = a.reshape(-1)[::7]  # spread estimate from a fixed strided subsample
        scale = np.float32(width * float(sample.std(dtype=np.float64)) + 1e-12)
        a -= np.float32(theta)
        np.abs(a, out=a)
        a += scale
        np.square(a, out=a)
        np.divide(np.float32(0.5 * scale / unit), a, out=a)
        return a

    def step(self, x_int, labels, cfg: QatConfig):
        qm = self.export()
        th1, th2 = qm.thresholds.as_tuple()
        x = np.ascontiguousarray(x_int.transpose(0, 2, 3, 1)).astype(np.float32)
        n = len(x)
        k1, k2 = qm.conv1.shape[-1], qm.conv2.shape[-1]
        u1 = qm.conv1.scale * INPUT_SCALE
        u2 = qm.conv2.scale
        u3 = qm.dense.scale

        acc1 = int_conv(x, qm.conv1.values, qm.conv1_bias, qm.pad1)
        s1 = (acc1 > th1).astype(np.float32)
        p1 = self.pool1.forward(s1)
        acc2 = int_conv(p1, qm.conv2.values, qm.conv2_bias, qm.pad2)
        s2 = (acc2 > th2).astype(np.float32)
        p2 = self.pool2.forward(s2)
        feats = p2.reshape(n, -1)
        logits = (feats.astype(np.float64) @ qm.dense.values + qm.dense_bias) * u3
        losses, dlogits = batch_weighted_cross_entropy(logits, labels, cfg.class_weights)
        loss = float(losses.mean())
        if not math.isfinite(loss):
            raise TrainingDivergedError("non-finite loss at layer dense")

        grads = {}
        grads["dense.weight"] = feats.T.astype(np.float64) @ dlogits
        grads["dense.bias"] = dlogits.sum(axis=0)
        dfeat = (dlogits @ qm.dense.dequantize().T).astype(np.float32)
        ds2 = self.pool2.backward(dfeat.reshape(p2.shape))
        dz2 = ds2 * self._surrogate(acc2, th2, u2, cfg.surrogate_width)
        f2 = dz2.shape[-1]
        dflat2 = dz2.reshape(-1, f2)
        cols2 = im2col(p1, k2, k2, qm.pad2)
        c2 = qm.conv2.shape[1]
        grads["conv2.weight"] = (dflat2.T @ cols2).reshape(f2, k2, k2, c2).transpose(0, 3, 1, 2)
        grads["conv2.bias"] = dflat2.sum(axis=0)
        dcols2 = dflat2 @ kernel_matrix(qm.conv2.dequantize().astype(np.float32))
        dp1 = col2im(dcols2, p1.shape, k2, k2, qm.pad2)
        ds1 = self.pool1.backward(dp1)
        dz1 = ds1 * self._surrogate(acc1, th1, u1, cfg.surrogate_width)
        f1 = dz1.shape[-1]
        dflat1 = dz1.reshape(-1, f1)
        cols1 = im2col(x * np.float32(INPUT_SCALE), k1, k1, qm.pad1)
        c1 = qm.conv1.shape[1]
        grads["conv1.weight"] = (dflat1.T @ cols1).reshape(f1, k1, k1, c1).transpose(0, 3, 1, 2)
        grads["conv1.bias"] = dflat1.sum(axis=0)

        norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
        if cfg.max_grad_norm and norm > cfg.max_grad_norm:
            grads = {k: g * (cfg.max_grad_norm / norm) for k, g in grads.items()}
        for key, g in grads.items():
            w = self.params[key]
            if key.endswith("weight"):
                # straight-through only inside the representable range
                scale = np.abs(w).max() / QMAX if np.abs(w).max() > 0 else 1.0
                g = g * (np.abs(w / scale) <= QMAX + 0.5)
            v = self.velocity[key]
            v *= cfg.momentum
            v -= cfg.learning_rate * g
            w += v
            if not np.all(np.isfinite(w)):
                raise TrainingDivergedError(f"parameters of layer {key.split('.')[0]} became non-finite")
        return loss


def qat_retrain(qmodel: QuantizedCnn, inputs: np.ndarray, labels: np.ndarray,
                config: QatConfig = QatConfig(), log=None) -> QuantizedCnn:
    """Straight-through retraining until accuracy, TPR and TNR all exceed the target.

    The check runs before the first epoch and after each one, capped at
    ``config.max_epochs``. Firing thresholds stay fixed in float units and are re-expressed in
    accumulator units of the current weight scale.
    The returned model's ``history`` lists ``(epoch, MetricsReport)`` checks.
    """
    if len(inputs) == 0:
        raise ValueError("empty dataset")
    labels = np.asarray(labels, dtype=np.int64)
    net = _QatNet(qmodel)
    rng = np.random.default_rng(config.seed)
    current = net.export()
    history = []
    for epoch in range(config.max_epochs + 1):
        report = compute_metrics(current.predict(inputs), labels)
        history.append((epoch, report))
        if log is not None:
            log(f"qat epoch {epoch}: acc {report.accuracy:.4f} tpr {report.tpr} tnr {report.tnr}")
        if report.all_above(config.target) or epoch == config.max_epochs:
            break
        order = rng.permutation(len(inputs))
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            net.step(inputs[idx], labels[idx], config)
        current = net.export()
    current.history = history
    return current
