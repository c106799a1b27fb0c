"""Fast self-checks of the library invariants, runnable without pytest.

Each check returns ``(name, ok, detail)``. Sizes are modest so the whole suite
finishes in well under a minute; the test suite runs the same properties at
full scale.
"""

from __future__ import annotations

import numpy as np

from .csnn import convert_to_csnn, infer_dense, infer_event, tap_density
from .edge import EdgeLearnConfig, edge_learn_step, init_edge_layer
from .eeg import (FCAS_CHANNELS, GeneratorConfig, augment_noise, build_dataset,
                  duplicate_positives, generate_participant, select_channels, split_participants)
from .quantization import QuantizedCnn, QuantizedTensor, ThresholdSet
from .tensor import Conv2D, Dense, Flatten, MaxPool2D, ReLU, Sequential

__all__ = ["random_quantized_cnn", "run_checks"]


def random_quantized_cnn(rng, in_shape=None) -> QuantizedCnn:
    """Small random integer network for equivalence checks."""
    c = int(rng.integers(1, 3)) if in_shape is None else in_shape[0]
    h, w = (int(rng.integers(4, 10)), int(rng.integers(4, 14))) if in_shape is None else in_shape[1:]
    f1, f2 = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    k1, k2 = int(rng.choice([1, 3, 5])), int(rng.choice([1, 3]))
    probe = QuantizedCnn(
        conv1=QuantizedTensor(rng.integers(-127, 128, (f1, c, k1, k1)).astype(np.int8), 1.0),
        conv1_bias=rng.integers(-500, 500, f1),
        conv2=QuantizedTensor(rng.integers(-127, 128, (f2, f1, k2, k2)).astype(np.int8), 1.0),
        conv2_bias=rng.integers(-50, 50, f2),
        dense=QuantizedTensor(np.zeros((1, 2), dtype=np.int8), 1.0), dense_bias=np.zeros(2, np.int64),
        thresholds=ThresholdSet(int(rng.integers(0, 3000)), int(rng.integers(0, 150))),
        input_shape=(c, h, w),
    )
    probe.dense = QuantizedTensor(rng.integers(-127, 128, (probe.feature_dim, 2)).astype(np.int8), 1.0)
    probe.dense_bias = rng.integers(-100, 100, 2)
    return probe


def _check_equivalence(rng, pairs: int):
    bad = 0
    for _ in range(pairs):
        q = random_quantized_cnn(rng)
        x = rng.integers(-127, 128, (1,) + q.input_shape).astype(np.int8)
        m = convert_to_csnn(q)
        a, b = infer_dense(m, x[0]), infer_event(m, x[0])
        if not (np.array_equal(a.potentials, b.potentials) and a.trace == b.trace):
            bad += 1
        c2 = b.ops.layers["conv2"]
        d = tap_density(b.trace["pool1"], q.conv2.shape[-1], q.pad2)
        if c2.dense_macs and c2.event_accumulates != round(d * c2.dense_macs):
            bad += 1
    return "event path equals dense path", bad == 0, f"{pairs} random pairs, {bad} mismatches"


def _check_gradients(rng, instances: int):
    worst = 0.0
    for _ in range(instances):
        net = Sequential([Conv2D(1, 2, 3, rng=rng, dtype=np.float64), ReLU(), MaxPool2D(2),
                          Flatten(), Dense(2 * 2 * 2, 2, rng=rng, dtype=np.float64)], (1, 4, 4))
        x = rng.standard_normal((1, 1, 4, 4))
        g = rng.standard_normal((1, 2))
        net.forward(x, record=True)
        net.backward(g)
        for layer in net.layers:
            for k, p in layer.params.items():
                flat = p.ravel()
                for j in range(flat.size):
                    old = flat[j]
                    flat[j] = old + 1e-4
                    up = float(np.sum(net.forward(x) * g))
                    flat[j] = old - 1e-4
                    dn = float(np.sum(net.forward(x) * g))
                    flat[j] = old
                    num = (up - dn) / 2e-4
                    ana = layer.grads[k].ravel()[j]
                    if abs(num) + abs(ana) > 1e-8:
                        worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-6))
    return "gradients match finite differences", worst <= 1e-3, f"worst relative error {worst:.2e}"


def _check_edge(rng, steps: int):
    cfg = EdgeLearnConfig(neurons_per_class=8, seed=int(rng.integers(1 << 30)))
    layer = init_edge_layer(200, 30, cfg)
    violations = 0
    for _ in range(steps):
        before = layer.weights
        plast = layer.plasticity.copy()
        active = np.sort(rng.choice(200, int(rng.integers(0, 80)), replace=False))
        edge_learn_step(layer, active, int(rng.integers(0, 2)))
        after = layer.weights
        changed = np.flatnonzero((before != after).any(axis=1))
        violations += int(np.any(after.sum(axis=1) != 30))
        violations += int(changed.size > 1)
        violations += int(np.any(layer.plasticity > plast) or np.any(layer.plasticity < 0.1))
        new = np.flatnonzero((after & ~before).any(axis=0))
        violations += int(not set(new.tolist()) <= set(active.tolist()))
    return "edge-layer invariants", violations == 0, f"{steps} steps, {violations} violations"


def _check_pipeline():
    cfg = GeneratorConfig.desk_scale(trials={"countdown-nominal": 2, "countdown-stressed": 2, "stoplight": 2})
    problems = []
    for kind, multiset, width in (("countdown-nominal", [0, 0, 0, 0, 1], 996), ("stoplight", [0, 1], 1074)):
        trials = generate_participant(cfg, 0, kind)
        ds = build_dataset(trials)
        for t in trials:
            labels = sorted(ds.labels[[i for i, tid in enumerate(ds.trial_ids) if tid == t.trial_id]].tolist())
            if labels != multiset:
                problems.append(f"{t.trial_id} labels {labels}")
        if ds.width != width:
            problems.append(f"{kind} width {ds.width}")
        if kind == "countdown-nominal":
            if ds.data[0].size != 18924:
                problems.append("flattened size")
            dup = duplicate_positives(ds)
            if dup.counts() != (ds.counts()[0], 4 * ds.counts()[1]):
                problems.append("duplication")
            if len(augment_noise(ds, 4, 0)) != 5 * len(ds):
                problems.append("augmentation")
            if select_channels(ds, FCAS_CHANNELS).data.shape[1] != 5:
                problems.append("channel selection")
    splits = split_participants(list(range(11)), 0, 10)
    covered = set().union(*(set(ind) for _, ind in splits))
    if covered != set(range(11)) or any(len(g) != 8 or len(i) != 3 or set(g) & set(i) for g, i in splits):
        problems.append("participant splits")
    return "pipeline invariants", not problems, "; ".join(problems) or "ok"


def run_checks(seed: int = 0, pairs: int = 200, grad_instances: int = 5, edge_steps: int = 1000):
    rng = np.random.default_rng(seed)
    return [
        _check_equivalence(rng, pairs),
        _check_gradients(rng, grad_instances),
        _check_edge(rng, edge_steps),
        _check_pipeline(),
    ]
