"""From a float CNN to an integer spiking network.

A small network is trained on the 5-channel subset of a few participants, then
its weights are cut to int8 and its activations to spikes. Calibration picks the
firing thresholds, retraining recovers what quantization lost, and the event
path is checked to agree exactly with the dense integer path.
"""

import numpy as np

from fewshot_csnn.csnn import convert_to_csnn, infer_dense, infer_event
from fewshot_csnn.eeg import (FCAS_CHANNELS, GeneratorConfig, LabeledDataset, build_dataset,
                              compute_class_weights, generate_participant)
from fewshot_csnn.quantization import (INPUT_SCALE, QatConfig, calibrate_thresholds, qat_retrain,
                                       quantize_cnn)
from fewshot_csnn.stats import compute_metrics
from fewshot_csnn.tensor import CnnModel, TrainConfig, fit_stage1

config = GeneratorConfig.desk_scale()
ds = LabeledDataset.concatenate([build_dataset(generate_participant(config, p, "countdown-nominal"),
                                               FCAS_CHANNELS) for p in range(4)])
x_int = ds.as_input()
x = x_int.astype(np.float32) * np.float32(INPUT_SCALE)
weights = compute_class_weights(ds)
print(f"{len(ds)} segments, class weights {tuple(round(w, 3) for w in weights)}")

model = CnnModel(input_shape=x.shape[1:], seed=0)
best, losses = fit_stage1(model, x, ds.labels, TrainConfig(epochs=8, learning_rate=2e-3, class_weights=weights))
print("stage-1 loss per epoch:", np.round(losses, 3).tolist())
print("float       ", compute_metrics(best.predict(x), ds.labels))

q = quantize_cnn(best)
q.thresholds = calibrate_thresholds(q, x_int[:64])
print("thresholds  ", q.thresholds.as_tuple())
print("quantized   ", compute_metrics(q.predict(x_int), ds.labels))

q2 = qat_retrain(q, x_int, ds.labels, QatConfig(class_weights=weights, max_epochs=10))
print(f"retrained ({q2.history[-1][0]} epochs)", q2.history[-1][1])

m = convert_to_csnn(q2)
dense, event = infer_dense(m, x_int[0]), infer_event(m, x_int[0])
print("event == dense:", np.array_equal(dense.potentials, event.potentials) and dense.trace == event.trace)
print("layer-1 spikes:", len(event.trace["pool1"].active), "of", int(np.prod(event.trace["pool1"].dims)))
