"""Few-shot learning with the binary edge layer.

Each edge neuron holds a fixed number of binary connections. A training pattern
picks the best-matching neuron of its class and moves that neuron's unused
connections onto the pattern's active inputs, a little less each time the
neuron wins. Here the patterns are noisy copies of two class prototypes.
"""

import numpy as np

from fewshot_csnn.edge import EdgeLearnConfig, classify_batch, edge_train, init_edge_layer, num_weights_from_mean

rng = np.random.default_rng(0)
dim, k = 2000, 120
prototypes = [rng.choice(dim, k, replace=False) for _ in range(2)]


def sample(n, flip=60):
    labels = rng.integers(0, 2, n)
    x = np.zeros((n, dim), bool)
    for i, y in enumerate(labels):
        x[i, prototypes[y]] = True
        x[i, rng.choice(dim, flip, replace=False)] ^= True
    return x, labels


train_x, train_y = sample(10)
test_x, test_y = sample(200)
nw = num_weights_from_mean(train_x.sum(axis=1).mean())
layer = init_edge_layer(dim, nw, EdgeLearnConfig(neurons_per_class=50, seed=1))
print(f"{len(train_x)} training patterns, {nw} connections per neuron")
print("before training:", np.mean(classify_batch(layer, test_x) == test_y))
layer, history = edge_train(layer, train_x, train_y, epochs=5, eval_samples=test_x, eval_labels=test_y)
for epoch, report in enumerate(history, 1):
    print(f"epoch {epoch}: accuracy {report.accuracy:.3f}  tpr {report.tpr:.3f}  tnr {report.tnr:.3f}")
used = (layer.plasticity < 1.0).sum()
print(f"{used} of {layer.num_neurons} neurons were recruited; plasticity floor {layer.plasticity.min():.2f}")
