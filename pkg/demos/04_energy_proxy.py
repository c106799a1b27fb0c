"""Counting operations on the dense and event-driven paths.

The dense path multiplies every weight with every input. The event path only
touches weights reached by a spike, so its conv2 work is the layer-1 tap density
times the dense MAC count. The proxy energy weights a MAC at 4.6 units and an
accumulate at 1.

Layer 1 sees dense int8 data, so it costs the same on both paths. In this toy
network layer 1 dominates and the saving is modest; in the 12/64-filter group
network conv2 outweighs conv1 several times over and the saving is far larger.
"""

import numpy as np

from fewshot_csnn.csnn import convert_to_csnn, infer_dense, infer_event, tap_density
from fewshot_csnn.quantization import calibrate_thresholds
from fewshot_csnn.stats import CostModel, energy_proxy, percent_reduction
from fewshot_csnn.verify import random_quantized_cnn

rng = np.random.default_rng(3)
q = random_quantized_cnn(rng, in_shape=(1, 19, 64))
xs = rng.integers(-127, 128, (16,) + q.input_shape).astype(np.int8)
# sparser firing than the median rule, as a trained network would show
q.thresholds = calibrate_thresholds(q, xs, percentile=95.0)
m = convert_to_csnn(q)
x = xs[0]
dense, event = infer_dense(m, x), infer_event(m, x)

for name in ("conv1", "conv2", "readout"):
    e = event.ops.layers[name]
    work = f"{e.event_accumulates:9d} accumulates" if e.event_driven else f"{e.dense_macs:9d} MACs (dense input)"
    print(f"{name:8s} dense path {dense.ops.layers[name].dense_macs:9d} MACs   event path {work}")

c2 = event.ops.layers["conv2"]
d = tap_density(event.trace["pool1"], q.conv2.shape[-1], q.pad2)
print(f"tap density {d:.4f} x {c2.dense_macs} = {d * c2.dense_macs:.1f}  (counted {c2.event_accumulates})")

cost = CostModel()
e_dense, e_event = energy_proxy(dense.ops, cost).energy, energy_proxy(event.ops, cost).energy
print(f"proxy energy: dense {e_dense:.0f}, event {e_event:.0f}, reduction {percent_reduction(e_dense, e_event):.1f}%")
