"""Class prototypes by moving average, retrieval, and gated injection."""

import numpy as np

from mvocc.autodiff import Tensor
from mvocc.memory import (
    PrototypeBank,
    VoxelFeatureBatch,
    refine,
    retrieval_weights,
    similarity,
    update_multi_proto,
    update_single_proto,
)

rng = np.random.default_rng(3)
dim, n_classes = 8, 3
centers = rng.normal(size=(n_classes, dim)) * 3.0

def batch(n=60):
    labels = rng.integers(1, n_classes + 1, size=n)
    feats = centers[labels - 1] + rng.normal(size=(n, dim)) * 0.3
    return feats, labels

# A single-prototype bank drifts toward each class's running mean. Label 0
# is free space and never updates the bank.
bank = PrototypeBank.create(n_classes, dim, n_protos=1, momentum=0.1)
for step in range(50):
    update_single_proto(bank, *batch())
    if step in (0, 9, 49):
        dist = np.linalg.norm(bank.protos[:, 0] - centers, axis=1).mean()
        print(f"step {step + 1:2d}: mean distance to true centers {dist:.3f}")

# Multi-prototype banks split each class into sub-prototypes by nearest
# assignment; useful when a class has multiple modes.
multi = PrototypeBank.create(n_classes, dim, n_protos=4, momentum=0.1)
for _ in range(50):
    update_multi_proto(multi, *batch())
spread = np.linalg.norm(multi.protos - multi.protos.mean(axis=1, keepdims=True), axis=2)
print("sub-prototype spread per class:", spread.mean(axis=1).round(3))

# Retrieval: cosine similarity, then a temperature softmax per class over
# its sub-prototypes. Low temperature concentrates on the best match.
x = centers[0] + rng.normal(size=(4, dim)) * 0.2
sims = similarity(multi, x)
for tau in (0.5, 0.1, 0.02):
    multi.temperature = tau
    w = retrieval_weights(multi, sims)
    print(f"tau={tau}: max weight {w.max():.3f}, rows sum to {w.sum(axis=2).max():.6f}")

# Injection adds the retrieved prototype, scaled by the gate. A gate of
# zeros is the identity; a confident gate pulls faint features into line
# with their class direction.
multi.temperature = 0.1
weak = 0.2 * centers[0] + rng.normal(size=(4, dim)) * 0.1
w = retrieval_weights(multi, similarity(multi, weak))
gate = np.zeros((4, n_classes))
gate[:, 0] = 1.0
off = refine(VoxelFeatureBatch(Tensor(weak), gate=Tensor(np.zeros((4, n_classes)))), multi, w)
on = refine(VoxelFeatureBatch(Tensor(weak), gate=Tensor(gate)), multi, w)
print("zero gate is identity:", np.array_equal(off.data, weak))

def alignment(a):
    return (a @ centers[0] / (np.linalg.norm(a, axis=1) * np.linalg.norm(centers[0]))).mean()

print(f"alignment with the class-1 direction: {alignment(weak):.3f} -> {alignment(on.data):.3f}")
