import numpy as np
import pytest
from dataclasses import replace
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from fewshot_csnn.quantization import (QatConfig, QuantizedTensor, ThresholdSet, binarize,
                                       calibrate_thresholds, int_conv, or_pool, qat_retrain,
                                       quantize_cnn, quantize_data, quantize_weights, round_half_away)
from fewshot_csnn.stats import compute_metrics
from fewshot_csnn.tensor import CnnModel, TrainConfig, fit_stage1
from fewshot_csnn.verify import random_quantized_cnn

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


# -- weights ---------------------------------------------------------------------

def test_zero_tensor():
    q = quantize_weights(np.zeros((3, 4)))
    assert q.scale == 1.0 and not q.values.any()


def test_hand_example():
    q = quantize_weights([-1.0, 0.5, 1.0])
    assert q.scale == pytest.approx(1 / 127)
    # 0.5 * 127 = 63.5 rounds away from zero
    assert q.values.tolist() == [-127, 64, 127]


def test_round_half_away():
    assert round_half_away([-2.5, -1.5, -0.5, 0.5, 1.5, 2.5]).tolist() == [-3, -2, -1, 1, 2, 3]


@given(hnp.arrays(np.float64, st.integers(1, 40), elements=finite))
def test_weight_roundtrip_bound(t):
    q = quantize_weights(t)
    assert q.values.dtype == np.int8
    assert np.abs(q.values.astype(int)).max() <= 127
    assert q.scale > 0
    assert np.all(np.abs(q.dequantize() - t) <= q.scale / 2 + 1e-12 * np.abs(t).max())


def test_quantized_tensor_rejects_bad_values():
    with pytest.raises(ValueError):
        QuantizedTensor(np.array([-128], dtype=np.int8), 1.0)
    with pytest.raises(ValueError):
        QuantizedTensor(np.array([1], dtype=np.int8), 0.0)


# -- data ------------------------------------------------------------------------

def test_data_endpoints():
    assert quantize_data([-100.0, 0.0, 100.0]).tolist() == [-127, 0, 127]
    assert not quantize_data(np.zeros((3, 5))).any()


def test_data_matches_bin_oracle():
    rng = np.random.default_rng(0)
    seg = rng.normal(0, 20, (19, 996))
    peak = np.abs(seg).max()
    # brute-force: nearest of the 255 bin centres, ties away from zero
    centres = np.arange(-127, 128) * peak / 127
    flat = seg.ravel()
    idx = np.abs(flat[:, None] - centres[None, :]).argmin(axis=1)
    oracle = (idx - 127).reshape(seg.shape)
    assert np.array_equal(quantize_data(seg).astype(int), oracle)


def test_data_rejects_nonfinite():
    with pytest.raises(ValueError):
        quantize_data([1.0, np.nan])


# -- binarize --------------------------------------------------------------------

def test_binarize_strict():
    assert binarize([-1, 0, 3], 1).tolist() == [0, 0, 1]
    x = np.array([4, 7, 2])
    assert not binarize(x, x.max()).any()


@given(hnp.arrays(np.int64, 20, elements=st.integers(-100, 100)),
       hnp.arrays(np.int64, 20, elements=st.integers(0, 50)), st.integers(0, 60))
def test_binarize_monotone_and_idempotent(x, bump, th):
    a, b = binarize(x, th), binarize(x + bump, th)
    assert np.all(b >= a)
    assert set(np.unique(a)) <= {0, 1}
    assert np.array_equal(binarize(a, 0), a)


def test_threshold_set_validation():
    with pytest.raises(ValueError):
        ThresholdSet(-1, 0)


# -- integer convolution ---------------------------------------------------------

def test_int_conv_matches_exact_integer_loop():
    rng = np.random.default_rng(3)
    x = rng.integers(-127, 128, (2, 5, 7, 3)).astype(np.int8)
    w = rng.integers(-127, 128, (4, 3, 3, 3)).astype(np.int8)
    b = rng.integers(-1000, 1000, 4)
    acc = int_conv(x, w, b, 1)
    xp = np.pad(x.astype(np.int64), ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros((2, 5, 7, 4), dtype=np.int64)
    for i in range(5):
        for j in range(7):
            patch = xp[:, i : i + 3, j : j + 3, :]
            ref[:, i, j, :] = np.einsum("nhwc,fchw->nf", patch, w.astype(np.int64)) + b
    assert np.array_equal(acc, ref)


def test_int_conv_worst_case_representable():
    # max-magnitude weights and full-density input through the widest stage
    x = np.full((1, 6, 6, 12), -128, dtype=np.int8)
    w = np.full((2, 12, 5, 5), 127, dtype=np.int8)
    acc = int_conv(x, w, np.zeros(2, np.int64), 2)
    assert acc.dtype.itemsize >= 4
    assert acc[0, 2, 2, 0] == -128 * 127 * 12 * 25
    spikes = np.ones((1, 4, 4, 64), dtype=bool)
    w2 = np.full((3, 64, 3, 3), 127, dtype=np.int8)
    assert int_conv(spikes, w2, np.zeros(3), 1)[0, 1, 1, 0] == 127 * 64 * 9


def test_or_pool_is_max_pool():
    rng = np.random.default_rng(0)
    s = rng.random((2, 6, 9, 3)) < 0.3
    ref = s[:, :6, :8].reshape(2, 3, 2, 4, 2, 3).max(axis=(2, 4))
    assert np.array_equal(or_pool(s), ref)


# -- model conversion and calibration --------------------------------------------

def test_quantize_cnn_shapes_match_source():
    model = CnnModel((1, 6, 10), seed=0)
    q = quantize_cnn(model)
    for name in ("conv1", "conv2", "dense"):
        assert getattr(q, name).shape == getattr(model, name).params["weight"].shape
        assert getattr(q, f"{name}_bias").shape == getattr(model, name).params["bias"].shape


def test_calibration_constant_and_floor():
    q = random_quantized_cnn(np.random.default_rng(0), (1, 4, 4))
    q.conv1 = QuantizedTensor(np.zeros_like(q.conv1.values), 1.0)
    q.conv1_bias = np.full_like(q.conv1_bias, 10)
    q.conv2 = QuantizedTensor(np.zeros_like(q.conv2.values), 1.0)
    q.conv2_bias = np.full_like(q.conv2_bias, -3)
    th = calibrate_thresholds(q, np.zeros((3, 1, 4, 4), np.int8))
    assert th.as_tuple() == (10, 0)


def test_calibration_empty_rejected():
    q = random_quantized_cnn(np.random.default_rng(0), (1, 4, 4))
    with pytest.raises(ValueError):
        calibrate_thresholds(q, np.zeros((0, 1, 4, 4), np.int8))


def _sort_percentile(values, p):
    v = np.sort(values)
    return int(v[int(np.ceil(p / 100 * len(v))) - 1])


@pytest.mark.parametrize("p", [10, 50, 90])
def test_calibration_matches_sort_and_index_oracle(p):
    rng = np.random.default_rng(0)
    model = CnnModel((1, 6, 12), seed=0, conv1_filters=4, conv2_filters=6)
    q = quantize_cnn(model)
    x = rng.integers(-127, 128, (10, 1, 6, 12)).astype(np.int8)
    th = calibrate_thresholds(q, x, p)
    acc1 = replace(q, thresholds=ThresholdSet()).stages(x)["acc1"]
    t1 = _sort_percentile(acc1[acc1 > 0], p)
    acc2 = replace(q, thresholds=ThresholdSet(t1, 0)).stages(x)["acc2"]
    t2 = _sort_percentile(acc2[acc2 > 0], p) if (acc2 > 0).any() else 0
    assert th.as_tuple() == (t1, t2)


# -- retraining ------------------------------------------------------------------

def _boundary_toy(n=120, seed=0):
    """Class 1 carries a weak bump in the top-left corner."""
    rng = np.random.default_rng(seed)
    y = np.repeat([0, 1], n // 2)
    x = rng.normal(0, 30, (n, 1, 6, 8))
    x[y == 1, :, :3, :3] += 60
    return np.clip(np.rint(x), -127, 127).astype(np.int8), y


def test_qat_early_stop_when_already_passing():
    x, y = _boundary_toy()
    model = CnnModel((1, 6, 8), seed=0, conv1_filters=4, conv1_kernel=3, conv2_filters=4)
    best, _ = fit_stage1(model, x.astype(np.float32) / 127, y, TrainConfig(epochs=40, batch_size=16))
    q = quantize_cnn(best)
    q = replace(q, thresholds=calibrate_thresholds(q, x))
    out = qat_retrain(q, x, y, QatConfig(target=0.0))
    assert len(out.history) == 1 and out.history[0][0] == 0
    assert np.array_equal(out.conv1.values, q.conv1.values)


def test_qat_recovers_naive_quantization_loss():
    x, y = _boundary_toy()
    model = CnnModel((1, 6, 8), seed=0, conv1_filters=4, conv1_kernel=3, conv2_filters=4)
    best, _ = fit_stage1(model, x.astype(np.float32) / 127, y, TrainConfig(epochs=40, batch_size=16))
    q = quantize_cnn(best)
    q = replace(q, thresholds=calibrate_thresholds(q, x))
    before = compute_metrics(q.predict(x), y)
    # the float net is near-perfect; binarized activations cost accuracy
    assert compute_metrics(best.predict(x.astype(np.float32) / 127), y).accuracy >= 0.99
    assert before.accuracy < 0.9
    out = qat_retrain(q, x, y, QatConfig(max_epochs=150))
    after = out.history[-1][1]
    assert after.all_above(0.9), (before, after)
    assert out.history[-1][0] <= 150
    for name in ("conv1", "conv2", "dense"):
        t = getattr(out, name)
        assert np.abs(t.values.astype(int)).max() <= 127
        # returned integers are exactly the quantized shadow weights
        assert np.array_equal(quantize_weights(out.shadow[f"{name}.weight"]).values, t.values)


def test_qat_rejects_empty():
    q = random_quantized_cnn(np.random.default_rng(0), (1, 4, 4))
    with pytest.raises(ValueError):
        qat_retrain(q, np.zeros((0, 1, 4, 4), np.int8), np.zeros(0))
