"""Streaming Gram accumulation and damping.

Run with ``python demos/02_calibration.py``.
"""

# %% Activations arrive in batches; only the m x m Gram matrix is kept
import numpy as np

from calibq.calibration import GramAccumulator, damp
from calibq.synthetic import correlated_activations

rng = np.random.default_rng(1)
X = correlated_activations(rng, rows=600, m=12, cond=1e3)
acc = GramAccumulator(12)
for start in range(0, len(X), 128):
    acc.accumulate(X[start : start + 128])
print("batches agree with one product:", np.allclose(acc.sum, X.T @ X))

# %% Damping adds lam = ratio * Tr(H) / m to the diagonal
print("diag(1, 3) ->", damp(np.diag([1.0, 3.0]), 0.01).lam)
H = damp(acc, 0.01)
print(f"lam = {H.lam:.4g}")
print(f"condition number {np.linalg.cond(acc.sum):.3g} -> {np.linalg.cond(H.H):.3g}")
