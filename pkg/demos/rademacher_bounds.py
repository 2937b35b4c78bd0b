"""
Complexity of the linear class before and after augmentation
============================================================

For the unit-ball linear class the empirical Rademacher complexity is
``E ||sum_i sigma_i x_i|| / m``.  Augmenting m points with U noisy copies
each gives n = U*m points whose bound ``sqrt((max||x||^2 + k) / n)`` drops
below the original ``sqrt(max||x||^2 / m)`` once U is large compared to
``1 + k / max||x||^2``.
"""

import numpy as np

from virm import build_augmented_set, empirical_rademacher_linear, init_sda, lemma2_bound, theorem1_bound

rng = np.random.default_rng(0)
m, k = 64, 16
S = rng.standard_normal((m, k))
S /= np.linalg.norm(S, axis=1, keepdims=True)
params = init_sda(k, rng)   # untrained estimator: unit-variance noise

orig = empirical_rademacher_linear(S, 2000, rng)
print(f"original  m={m:5d}  estimate {orig.mean:.4f} +- {orig.stderr:.4f}  bound {lemma2_bound(S):.4f}")

###############################################################################
# The crossover sits at U = 1 + k = 17 for unit-norm rows.

for U in (1, 10, 17, 18, 100, 400):
    S_aug = build_augmented_set(S, params, U, 0.8, rng)
    est = empirical_rademacher_linear(S_aug, 500, rng)
    bound = theorem1_bound(S_aug, 1.0, k)
    print(f"U={U:4d}    n={len(S_aug):5d}  estimate {est.mean:.4f} +- {est.stderr:.4f}  bound {bound:.4f}")

###############################################################################
# Small sets can be enumerated exactly.

small = rng.normal(size=(8, 3))
print("exact", empirical_rademacher_linear(small, method="exact").mean, "bound", lemma2_bound(small))
