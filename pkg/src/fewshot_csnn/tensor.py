"""Small dense tensor core with hand-written reverse-mode layers.

Tensors are plain numpy arrays laid out as ``(batch, channels, rows, cols)``.
Every layer caches what it needs during ``forward`` and returns the input
gradient from ``backward``; parameter gradients land in ``layer.grads``.
This is just enough machinery to train the two-convolution group model.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Conv2D",
    "MaxPool2D",
    "ReLU",
    "Flatten",
    "Dense",
    "CnnModel",
    "TrainConfig",
    "TrainingDivergedError",
    "ShapeError",
    "forward_cnn",
    "weighted_cross_entropy",
    "batch_weighted_cross_entropy",
    "train_step",
    "fit_stage1",
    "im2col",
    "col2im",
    "conv_output_shape",
]


class ShapeError(ValueError):
    """Raised when an input does not match the shape a layer expects."""


class TrainingDivergedError(FloatingPointError):
    """Raised when a loss or parameter stops being finite."""


def _pad_amount(kernel: int, padding: str) -> int:
    if padding == "same":
        return kernel // 2
    if padding == "valid":
        return 0
    raise ValueError(f"unknown padding mode {padding!r}")


def conv_output_shape(rows: int, cols: int, kernel: int, padding: str) -> tuple[int, int]:
    pad = _pad_amount(kernel, padding)
    return rows + 2 * pad - kernel + 1, cols + 2 * pad - kernel + 1


def im2col(x: np.ndarray, kh: int, kw: int, pad: int) -> np.ndarray:
    """Unfold channels-last ``(N, H, W, C)`` into ``(N*Ho*Wo, kh*kw*C)`` rows.

    Column order is ``(ky, kx, c)``.
    """
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    n, c = x.shape[0], x.shape[3]
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))  # N, Ho, Wo, C, kh, kw
    ho, wo = win.shape[1:3]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)


def col2im(cols: np.ndarray, x_shape: tuple, kh: int, kw: int, pad: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add receptive-field rows back."""
    n, h, w, c = x_shape
    hp, wp = h + 2 * pad, w + 2 * pad
    ho, wo = hp - kh + 1, wp - kw + 1
    cols = cols.reshape(n, ho, wo, kh, kw, c)
    out = np.zeros((n, hp, wp, c), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + ho, j : j + wo, :] += cols[:, :, :, i, j, :]
    if pad:
        out = out[:, pad : pad + h, pad : pad + w, :]
    return out


def kernel_matrix(weight: np.ndarray) -> np.ndarray:
    """``(F, C, kh, kw)`` weights as the ``(F, kh*kw*C)`` matrix matching :func:`im2col`."""
    return weight.transpose(0, 2, 3, 1).reshape(weight.shape[0], -1)


def _glorot(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Layer:
    """Base layer. ``forward``/``backward`` work on channels-last arrays."""

    name = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.velocity: dict[str, np.ndarray] = {}

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}({self.name})"


class Conv2D(Layer):
    """Stride-1 2-D convolution (cross-correlation) with bias.

    ``weight`` has shape ``(filters, in_channels, k, k)``. ``needs_input_grad``
    can be switched off for the first layer to skip the col2im pass.
    """

    def __init__(self, in_channels, filters, kernel, padding="same", rng=None,
                 dtype=np.float32, name="conv", needs_input_grad=True):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.name = name
        self.kernel = kernel
        self.padding = padding
        self.pad = _pad_amount(kernel, padding)
        self.needs_input_grad = needs_input_grad
        fan_in = in_channels * kernel * kernel
        fan_out = filters * kernel * kernel
        self.params["weight"] = _glorot(rng, (filters, in_channels, kernel, kernel), fan_in, fan_out, dtype)
        self.params["bias"] = np.zeros(filters, dtype=dtype)
        self._cache = None

    @property
    def in_channels(self) -> int:
        return self.params["weight"].shape[1]

    @property
    def filters(self) -> int:
        return self.params["weight"].shape[0]

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.in_channels:
            raise ShapeError(f"{self.name}: expected {self.in_channels} input channels, got {c}")
        ho, wo = conv_output_shape(h, w, self.kernel, self.padding)
        if ho < 1 or wo < 1:
            raise ShapeError(f"{self.name}: input {h}x{w} too small for kernel {self.kernel}")
        return self.filters, ho, wo

    def forward(self, x):
        n, h, w, c = x.shape
        f, ho, wo = self.output_shape((c, h, w))
        cols = im2col(x, self.kernel, self.kernel, self.pad)
        out = cols @ kernel_matrix(self.params["weight"]).T
        out += self.params["bias"]
        self._cache = (x.shape, cols)
        return out.reshape(n, ho, wo, f)

    def backward(self, dout):
        x_shape, cols = self._cache
        f, c, k, _ = self.params["weight"].shape
        dflat = dout.reshape(-1, f)
        gw = dflat.T @ cols
        self.grads["weight"] = gw.reshape(f, k, k, c).transpose(0, 3, 1, 2)
        self.grads["bias"] = dflat.sum(axis=0)
        if not self.needs_input_grad:
            return None
        dcols = dflat @ kernel_matrix(self.params["weight"])
        return col2im(dcols, x_shape, k, k, self.pad)


class MaxPool2D(Layer):
    """Non-overlapping max pooling; trailing rows/cols that do not fill a window are dropped.

    Ties route the gradient to the first maximal element in row-major order.
    """

    def __init__(self, size=2, name="pool"):
        super().__init__()
        self.size = size
        self.name = name
        self._cache = None

    def output_shape(self, in_shape):
        c, h, w = in_shape
        ho, wo = h // self.size, w // self.size
        if ho < 1 or wo < 1:
            raise ShapeError(f"{self.name}: input {h}x{w} smaller than pool {self.size}")
        return c, ho, wo

    def _taps(self, x, ho, wo):
        s = self.size
        return [x[:, i : ho * s : s, j : wo * s : s, :] for i in range(s) for j in range(s)]

    def forward(self, x):
        n, h, w, c = x.shape
        _, ho, wo = self.output_shape((c, h, w))
        taps = self._taps(x, ho, wo)
        out = taps[0].copy()
        for t in taps[1:]:
            np.maximum(out, t, out=out)
        taken = np.zeros(out.shape, dtype=bool)
        winners = []
        for t in taps:
            sel = (t == out) & ~taken
            taken |= sel
            winners.append(sel)
        self._cache = (x.shape, winners)
        return out

    def backward(self, dout):
        x_shape, winners = self._cache
        _, ho, wo, _ = dout.shape
        dx = np.zeros(x_shape, dtype=dout.dtype)
        for view, sel in zip(self._taps(dx, ho, wo), winners):
            view[...] = dout * sel
        return dx


class ReLU(Layer):
    def __init__(self, name="relu"):
        super().__init__()
        self.name = name
        self._mask = None

    def output_shape(self, in_shape):
        return in_shape

    def forward(self, x):
        self._mask = x > 0
        return np.maximum(x, 0)

    def backward(self, dout):
        return dout * self._mask


class Flatten(Layer):
    def __init__(self, name="flatten"):
        super().__init__()
        self.name = name
        self._shape = None

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._shape)


class Dense(Layer):
    """Fully connected layer, ``weight`` stored as ``(in_features, out_features)``."""

    def __init__(self, in_features, out_features, rng=None, dtype=np.float32, name="dense"):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.name = name
        self.params["weight"] = _glorot(rng, (in_features, out_features), in_features, out_features, dtype)
        self.params["bias"] = np.zeros(out_features, dtype=dtype)
        self._x = None

    def output_shape(self, in_shape):
        (d,) = in_shape
        if d != self.params["weight"].shape[0]:
            raise ShapeError(f"{self.name}: expected {self.params['weight'].shape[0]} features, got {d}")
        return (self.params["weight"].shape[1],)

    def forward(self, x):
        self._x = x
        return x @ self.params["weight"] + self.params["bias"]

    def backward(self, dout):
        self.grads["weight"] = self._x.T @ dout
        self.grads["bias"] = dout.sum(axis=0)
        return dout @ self.params["weight"].T


class Sequential:
    """Ordered layer stack with a fixed input shape ``(C, H, W)``."""

    def __init__(self, layers: Sequence[Layer], input_shape: tuple):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
        self.output_shape = shape
        self.activations: list[np.ndarray] = []

    def _check_input(self, x):
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"expected input of shape {self.input_shape}, got {tuple(x.shape[1:])}")

    def forward(self, x, record=False):
        """Run a ``(N, C, H, W)`` batch; features are flattened in ``(H, W, C)`` order."""
        self._check_input(x)
        x = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
        self.activations = []
        for layer in self.layers:
            x = layer.forward(x)
            if record:
                self.activations.append(x)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
            if dout is None:
                return None
        return dout.transpose(0, 3, 1, 2)

    def parameters(self):
        for layer in self.layers:
            for key, value in layer.params.items():
                yield layer, key, value

    def state_dict(self) -> dict[str, np.ndarray]:
        return {f"{layer.name}.{k}": v.copy() for layer, k, v in self.parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        for layer, k, v in self.parameters():
            v[...] = state[f"{layer.name}.{k}"]

    def clear_cache(self):
        """Drop forward-pass caches (they can hold large im2col buffers)."""
        self.activations = []
        for layer in self.layers:
            for attr in ("_cache", "_mask", "_x", "_shape"):
                if hasattr(layer, attr):
                    setattr(layer, attr, None)

    def copy(self):
        self.clear_cache()
        return copy.deepcopy(self)


class CnnModel(Sequential):
    """The group-level network: conv(12,5x5) > relu > pool > conv(64,3x3) > relu > pool > dense(2)."""

    def __init__(self, input_shape=(1, 19, 996), seed=0, conv1_filters=12, conv1_kernel=5,
                 conv2_filters=64, conv2_kernel=3, pool=2, padding="same", n_classes=2,
                 dtype=np.float32):
        rng = np.random.default_rng(seed)
        c = input_shape[0]
        conv1 = Conv2D(c, conv1_filters, conv1_kernel, padding, rng, dtype, "conv1", needs_input_grad=False)
        pool1 = MaxPool2D(pool, "pool1")
        conv2 = Conv2D(conv1_filters, conv2_filters, conv2_kernel, padding, rng, dtype, "conv2")
        pool2 = MaxPool2D(pool, "pool2")
        shape = conv1.output_shape(tuple(input_shape))
        shape = pool1.output_shape(shape)
        shape = conv2.output_shape(shape)
        shape = pool2.output_shape(shape)
        features = int(np.prod(shape))
        dense = Dense(features, n_classes, rng, dtype, "dense")
        super().__init__([conv1, ReLU("relu1"), pool1, conv2, ReLU("relu2"), pool2, Flatten(), dense],
                         input_shape)
        self.padding = padding
        self.dtype = dtype

    @property
    def conv1(self) -> Conv2D:
        return self.layers[0]

    @property
    def conv2(self) -> Conv2D:
        return self.layers[3]

    @property
    def dense(self) -> Dense:
        return self.layers[7]

    @property
    def feature_shape(self) -> tuple:
        return self.layers[5].output_shape(self.layers[4].output_shape(
            self.conv2.output_shape(self.layers[2].output_shape(self.conv1.output_shape(self.input_shape)))))

    def predict(self, x, batch_size=64) -> np.ndarray:
        out = []
        for i in range(0, len(x), batch_size):
            out.append(self.forward(np.asarray(x[i : i + batch_size], dtype=self.dtype)).argmax(axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=int)


@dataclass
class TrainConfig:
    epochs: int = 125
    learning_rate: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 32
    seed: int = 0
    class_weights: tuple = (1.0, 1.0)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if any(w <= 0 for w in self.class_weights):
            raise ValueError("class weights must be positive")


def _as_single(model: Sequential, x) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == len(model.input_shape) - 1:
        x = x[None]
    if tuple(x.shape) != tuple(model.input_shape):
        raise ShapeError(f"expected input of shape {model.input_shape}, got {tuple(x.shape)}")
    return x[None]


def forward_cnn(model: Sequential, x) -> np.ndarray:
    """Logits for a single input of shape ``(C, H, W)`` (or ``(H, W)`` when C is 1)."""
    logits = model.forward(_as_single(model, x).astype(model.layers[0].params.get(
        "weight", np.zeros(1)).dtype, copy=False))[0]
    return logits


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def weighted_cross_entropy(logits, label: int, weights=(1.0, 1.0)) -> float:
    """Class-weighted softmax cross-entropy of one logit vector."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise TrainingDivergedError("non-finite logits")
    if any(w <= 0 for w in weights):
        raise ValueError("class weights must be positive")
    # -log p = log(1 + sum exp(z_j - z_label)); log1p keeps confident losses exact
    gaps = np.delete(logits, label) - logits[label]
    top = max(0.0, float(gaps.max()))
    if top == 0.0:
        loss = float(np.log1p(np.exp(gaps).sum()))
    else:
        loss = top + float(np.log(np.exp(-top) + np.exp(gaps - top).sum()))
    return float(weights[label] * loss)


def batch_weighted_cross_entropy(logits: np.ndarray, labels: np.ndarray, weights) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample weighted losses and the gradient of their mean w.r.t. ``logits``."""
    logits64 = logits.astype(np.float64)
    logp = _log_softmax(logits64)
    w = np.asarray(weights, dtype=np.float64)[labels]
    n = len(labels)
    losses = -w * logp[np.arange(n), labels]
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    grad *= (w / n)[:, None]
    return losses, grad.astype(logits.dtype)


def _first_nonfinite_layer(model: Sequential) -> str:
    for layer, act in zip(model.layers, model.activations):
        if not np.all(np.isfinite(act)):
            return layer.name
    for layer, key, value in model.parameters():
        if not np.all(np.isfinite(value)):
            return layer.name
    return model.layers[-1].name


def train_step(model: Sequential, inputs: np.ndarray, labels: np.ndarray, config: TrainConfig):
    """One momentum-SGD update on a batch; returns ``(model, mean loss before the update)``.

    The model is updated in place.
    """
    if len(inputs) == 0:
        raise ValueError("empty batch")
    labels = np.asarray(labels, dtype=np.int64)
    logits = model.forward(inputs, record=True)
    if not np.all(np.isfinite(logits)):
        raise TrainingDivergedError(f"non-finite activations in layer {_first_nonfinite_layer(model)}")
    losses, dlogits = batch_weighted_cross_entropy(logits, labels, config.class_weights)
    loss = float(losses.mean())
    if not math.isfinite(loss):
        raise TrainingDivergedError(f"non-finite loss at layer {_first_nonfinite_layer(model)}")
    model.backward(dlogits)
    lr, mu = config.learning_rate, config.momentum
    for layer in model.layers:
        for key, grad in layer.grads.items():
            v = layer.velocity.get(key)
            if v is None:
                v = layer.velocity[key] = np.zeros_like(layer.params[key])
            v *= mu
            v -= lr * grad
            layer.params[key] += v
            if not np.all(np.isfinite(layer.params[key])):
                raise TrainingDivergedError(f"parameters of layer {layer.name} became non-finite")
    return model, loss


def fit_stage1(model: CnnModel, inputs: np.ndarray, labels: np.ndarray, config: TrainConfig,
               log=None):
    """Train for ``config.epochs`` epochs and keep the lowest-training-loss snapshot.

    Returns ``(best_model, epoch_losses)``; the input model is left at its final state.
    """
    if len(inputs) == 0:
        raise ValueError("empty dataset")
    labels = np.asarray(labels, dtype=np.int64)
    if not set(np.unique(labels)) <= {0, 1}:
        raise ValueError("labels must be 0 or 1")
    rng = np.random.default_rng(config.seed)
    n = len(inputs)
    losses: list[float] = []
    best_loss, best_state = math.inf, None
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            xb = np.asarray(inputs[idx], dtype=model.dtype)
            _, loss = train_step(model, xb, labels[idx], config)
            total += loss * len(idx)
        epoch_loss = total / n
        losses.append(epoch_loss)
        if log is not None:
            log(f"stage1 epoch {epoch + 1}/{config.epochs} loss {epoch_loss:.5f}")
        if epoch_loss < best_loss:
            best_loss, best_state = epoch_loss, model.state_dict()
    best = model.copy()
    best.load_state_dict(best_state)
    for layer in best.layers:
        layer.velocity = {}
    return best, losses
