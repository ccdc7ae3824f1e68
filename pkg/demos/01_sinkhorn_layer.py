"""
The Sinkhorn layer
==================

Alternately normalising the rows and columns of a strictly positive matrix
drives it towards a doubly-stochastic matrix.  This script watches the
normalization error fall, shows that a noisy permutation matrix stays close
to the permutation, and checks the analytic backward pass against finite
differences.
"""
import numpy as np

from permlearn.gradcheck import numeric_gradient, relative_error
from permlearn.permcore import Permutation, normalization_error
from permlearn.sinkhorn import SinkhornConfig, sinkhorn_backward, sinkhorn_forward, to_positive

rng = np.random.default_rng(0)

# raw network scores can be any real number; the layer exponentiates them first
scores = rng.standard_normal((6, 6))
cfg = SinkhornConfig(iterations=1)
q = to_positive(scores, cfg)
print("iteration  normalization error")
print(f"{0:9d}  {normalization_error(q):.3e}")
for n in range(1, 16):
    q, _ = sinkhorn_forward(q, cfg)
    print(f"{n:9d}  {normalization_error(q):.3e}")

# row sums after the final column pass are the only ones still off
print("row sums:   ", np.round(q.sum(axis=1), 6))
print("column sums:", np.round(q.sum(axis=0), 6))

# a permutation matrix plus small positive noise is almost a fixed point
p = Permutation([2, 0, 3, 1])
noisy = p.matrix() + 0.01 * rng.uniform(size=(4, 4))
q, _ = sinkhorn_forward(noisy, SinkhornConfig(iterations=10))
print("\nnoisy permutation after 10 iterations:")
print(np.round(q, 3))
print("largest deviation from the permutation:", f"{np.abs(q - p.matrix()).max():.4f}")

# backward pass: the gradient of sum(g * S(q0)) with respect to q0
cfg = SinkhornConfig(iterations=5)
q0 = rng.uniform(0.1, 1.0, (5, 5))
g = rng.standard_normal((5, 5))
_, tape = sinkhorn_forward(q0, cfg)
analytic = sinkhorn_backward(g, tape)
numeric = numeric_gradient(lambda: float(np.sum(g * sinkhorn_forward(q0, cfg)[0])), q0)
print("\nbackward pass, max relative error vs central differences:", f"{relative_error(analytic, numeric).max():.2e}")
