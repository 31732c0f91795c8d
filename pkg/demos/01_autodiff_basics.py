"""
Reverse-mode autodiff on numpy arrays
=====================================

Everything in the stereo model is built from a small Tensor type that
records operations and replays them backwards.  This walk-through shows
the pieces the rest of the package relies on.
"""

import numpy as np

from madis_stereo.tensor import Tensor, finite_diff_check, layer_norm, no_grad, softmax

# A tensor that requires grad becomes a leaf of the graph.
x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
loss = (x * x).sum()
loss.backward()
print("d/dx sum(x^2) =", x.grad)

# Using a tensor twice adds the two contributions.
x.grad = None
(x.exp().sum() + (x * 2.0).sum()).backward()
print("exp(x) + 2 =", x.grad, "expected", np.exp(x.data) + 2)

# Inside no_grad nothing is recorded, which is how the teacher runs.
with no_grad():
    y = softmax(x)
print("softmax sums to", y.data.sum(), "| recorded graph:", y.requires_grad)

# Finite differences are the reference for every gradient in the package.
rng = np.random.default_rng(0)
logits = Tensor(rng.normal(size=(4, 6)))
targets = np.eye(6)[[1, 0, 5, 2]]


def cross_entropy(t):
    return -(softmax(t).log() * targets).sum() * 0.25


print("softmax cross-entropy, max rel err vs central differences:",
      finite_diff_check(cross_entropy, logits, eps=1e-5))

gain, shift = Tensor(rng.normal(size=6)), Tensor(rng.normal(size=6))
probe = rng.normal(size=(4, 6))
print("layer norm:", finite_diff_check(lambda t: (layer_norm(t, gain, shift) * probe).sum(), logits))
