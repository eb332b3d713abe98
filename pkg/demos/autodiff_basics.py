"""Tour of the tensor core: building graphs, backprop, checking gradients."""

import numpy as np

from mvocc import autodiff as ad
from mvocc.autodiff import Tensor, backward
from mvocc.gradcheck import check_gradients

rng = np.random.default_rng(0)

# Tensors wrap float64 arrays. Only leaves created with requires_grad=True
# receive gradients; everything downstream is tracked automatically.
w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
b = Tensor(np.zeros(2), requires_grad=True)
x = Tensor(rng.normal(size=(5, 3)))

h = ad.gelu(ad.add(ad.matmul(x, w), b))
loss = ad.mean_all(ad.mul(h, h))
print("loss:", loss.item())

backward(loss)
print("dL/dw:\n", w.grad)
print("dL/db:", b.grad)

# The same graph through the finite-difference checker. It perturbs every
# input element by 1e-5 and reports the worst relative error.
def build(leaves):
    ww, bb = leaves
    hh = ad.gelu(ad.add(ad.matmul(x, ww), bb))
    return ad.mean_all(ad.mul(hh, hh))

err = check_gradients(build, [w.data, b.data])
print(f"worst finite-difference error: {err:.2e}")

# A classifier loss on integer labels, with per-class weighting.
logits = Tensor(rng.normal(size=(6, 4)), requires_grad=True)
labels = np.array([0, 1, 2, 3, 1, 0])
nll = ad.cross_entropy(logits, labels, class_weights=np.array([1.0, 2.0, 1.0, 0.5]))
backward(nll)
print("weighted nll:", nll.item())
print("logit grad row sums:", logits.grad.sum(axis=1).round(12))  # softmax rows, sum ~0

# softmax with a temperature: low tau sharpens toward the argmax.
scores = Tensor(np.array([[1.0, 2.0, 3.0]]))
for tau in (1.0, 0.25, 0.05):
    print(f"softmax tau={tau}:", ad.softmax(scores, temperature=tau).data.round(4))
