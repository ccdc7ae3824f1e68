"""
Rounding a doubly-stochastic matrix
===================================

The network's output is a soft permutation.  The nearest hard permutation in
Frobenius distance is the one that maximises the sum of the selected entries,
a linear assignment problem solved here with the Hungarian method and checked
against exhaustive search.
"""
import itertools
import time

import numpy as np

from permlearn.assign import brute_force_round, frobenius_objective, round_to_permutation
from permlearn.sinkhorn import SinkhornConfig, sinkhorn_forward

rng = np.random.default_rng(1)

q, _ = sinkhorn_forward(rng.uniform(size=(5, 5)) ** 4 + 1e-6, SinkhornConfig(iterations=50))
print("soft permutation:")
print(np.round(q, 3))

res = round_to_permutation(q)
print("\nrounded pi:", res.perm.pi.tolist(), f" distance {res.objective:.4f}")
print(res.perm.matrix().astype(int))

# every permutation's distance, to see how clear the winner is
dist = sorted((frobenius_objective(q, pi), pi) for pi in itertools.permutations(range(5)))
for d, pi in dist[:3]:
    print(f"  {list(pi)}  {d:.4f}")

# uniform matrices are maximally ambiguous: every permutation ties, and the
# lexicographically smallest one wins so the answer is reproducible
print("\nuniform 4x4 rounds to", round_to_permutation(np.full((4, 4), 0.25)).perm.pi.tolist())

# the Hungarian method agrees with brute force and is far faster
for l in (6, 8):
    q, _ = sinkhorn_forward(rng.uniform(size=(l, l)), SinkhornConfig(iterations=30))
    t0 = time.perf_counter()
    fast = round_to_permutation(q)
    t1 = time.perf_counter()
    slow = brute_force_round(q)
    t2 = time.perf_counter()
    print(f"l={l}: same answer {fast.perm == slow.perm}, hungarian {1e3 * (t1 - t0):.2f} ms, "
          f"brute force {1e3 * (t2 - t1):.0f} ms")
