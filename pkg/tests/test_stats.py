import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats as sps

from fewshot_csnn.csnn import LayerOps, OpCount
from fewshot_csnn.stats import (CostModel, aggregate, compute_metrics, energy_proxy, latency_ratio,
                                percent_reduction, welch_t_test)


# -- metrics ---------------------------------------------------------------------

def test_perfect_and_flipped():
    y = np.array([0, 1, 1, 0, 1])
    r = compute_metrics(y, y)
    assert (r.accuracy, r.tpr, r.tnr) == (1.0, 1.0, 1.0)
    assert compute_metrics(1 - y, y).accuracy == 0.0


def test_hand_confusion():
    labels = [1] * 10 + [0] * 10
    preds = [1] * 9 + [0] + [0] * 8 + [1] * 2
    r = compute_metrics(preds, labels)
    assert (r.tp, r.fn, r.tn, r.fp) == (9, 1, 8, 2)
    assert r.accuracy == pytest.approx(0.85) and r.tpr == pytest.approx(0.9) and r.tnr == pytest.approx(0.8)


def test_undefined_rates_absent():
    r = compute_metrics([0, 0], [0, 0])
    assert r.tpr is None and r.tnr == 1.0
    assert not r.all_above(0.5)
    assert r.as_dict()["tpr"] is None


def test_metric_errors():
    with pytest.raises(ValueError):
        compute_metrics([], [])
    with pytest.raises(ValueError):
        compute_metrics([1], [1, 0])


@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=80))
def test_accuracy_is_prevalence_weighted_mix(pairs):
    preds, labels = map(np.array, zip(*pairs))
    r = compute_metrics(preds, labels)
    prev = labels.mean()
    mix = prev * (r.tpr or 0.0) + (1 - prev) * (r.tnr or 0.0)
    assert r.accuracy == pytest.approx(mix)
    assert r.total == len(pairs)


# -- aggregation and tests -------------------------------------------------------

def test_aggregate():
    assert aggregate([5]) == (5.0, 0.0)
    assert aggregate([1, 2, 3]) == (2.0, 1.0)
    assert aggregate([4, 4, 4])[1] == 0.0
    with pytest.raises(ValueError):
        aggregate([])


def test_welch_identical_and_symmetric():
    a = [1.0, 3.0, 2.0, 5.0]
    r = welch_t_test(a, a)
    assert r.statistic == 0.0 and r.p_value == pytest.approx(1.0)
    b = [2.0, 2.5, 7.0]
    assert welch_t_test(a, b).p_value == pytest.approx(welch_t_test(b, a).p_value)


def test_welch_reference_example():
    ref = sps.ttest_ind(range(1, 6), range(2, 7), equal_var=False)
    r = welch_t_test(range(1, 6), range(2, 7))
    assert r.statistic == pytest.approx(ref.statistic, abs=1e-9)
    assert r.p_value == pytest.approx(ref.pvalue, abs=1e-6)
    assert r.dof == pytest.approx(8.0)


def test_welch_matches_oracle_on_random_pairs():
    rng = np.random.default_rng(0)
    for _ in range(100):
        a = rng.normal(rng.normal(), rng.uniform(0.1, 3), rng.integers(2, 40))
        b = rng.normal(rng.normal(), rng.uniform(0.1, 3), rng.integers(2, 40))
        ref = sps.ttest_ind(a, b, equal_var=False)
        r = welch_t_test(a, b)
        assert r.p_value == pytest.approx(ref.pvalue, abs=1e-6)
        assert 0.0 <= r.p_value <= 1.0


def test_welch_degenerate():
    with pytest.raises(ValueError):
        welch_t_test([1.0, 1.0], [2.0, 2.0])
    with pytest.raises(ValueError):
        welch_t_test([1.0], [2.0, 3.0])


# -- energy formulas -------------------------------------------------------------

def test_percent_reduction_examples():
    assert percent_reduction(195.6, 4.90) == pytest.approx(97.49, abs=0.005)
    assert percent_reduction(29.0, 0.82) == pytest.approx(97.17, abs=0.005)
    assert percent_reduction(3.0, 3.0) == 0.0
    with pytest.raises(ValueError):
        percent_reduction(0.0, 1.0)


def test_latency_ratio_examples():
    assert latency_ratio(5.56, 4.49) == pytest.approx(1.238, abs=5e-4)
    assert latency_ratio(4.80, 3.67) == pytest.approx(1.308, abs=5e-4)
    assert latency_ratio(2.0, 2.0) == 1.0
    with pytest.raises(ValueError):
        latency_ratio(1.0, 0.0)


def test_energy_proxy_examples():
    assert energy_proxy(OpCount({})).energy == 0.0
    unit = CostModel(1.0, 1.0, 0.0)
    dense = energy_proxy(OpCount({"l": LayerOps(10**6, 0, 0, False)}), unit)
    event = energy_proxy(OpCount({"l": LayerOps(10**6, 10**5, 0, True)}), unit)
    assert percent_reduction(dense.energy, event.energy) == pytest.approx(90.0)


@given(st.integers(0, 10**6), st.integers(0, 10**6), st.integers(0, 10**6),
       st.floats(0, 10), st.floats(0, 10), st.floats(0, 10))
def test_energy_proxy_linear(m, a, f, e1, e2, e3):
    ops = OpCount({"x": LayerOps(m, 0, m, False), "y": LayerOps(m, a, f, True)})
    one = energy_proxy(ops, CostModel(e1, e2, e3)).energy
    two = energy_proxy(ops, CostModel(2 * e1, 2 * e2, 2 * e3)).energy
    assert two == pytest.approx(2 * one)
    assert one >= 0


def test_cost_model_validation():
    with pytest.raises(ValueError):
        CostModel(-1.0)
    with pytest.raises(ValueError):
        energy_proxy(OpCount({"x": LayerOps(-1, 0, 0, False)}))
