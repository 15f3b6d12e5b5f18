"""Uniform asymmetric quantization on per-group grids.

Run with ``python demos/01_quantizer.py``.
"""

# %% A grid is fit to the range of each group
import numpy as np

from calibq.quant_grid import QuantConfig, fit_grid, fit_matrix_grid, quantize_codes, dequantize, quantize_matrix

w = np.array([-1.5, 0.0, 1.5, 3.0])
cfg = QuantConfig(bits=2)
grid = fit_grid(w, cfg)
print("delta", grid.delta, "zero", grid.zero)
print("grid points", grid.points())

# %% Round to nearest: codes live in [0, 2**bits - 1]
codes = quantize_codes(w, grid)
print("codes", codes, "dequantized", dequantize(codes, grid))

# %% A one-signed group keeps its full range because the zero-point is not clamped
w_pos = np.array([2.0, 2.5, 4.0])
g_pos = fit_grid(w_pos, cfg)
print("one-signed zero", g_pos.zero, "points", g_pos.points())

# %% Matrices: rows are the input dimension and every block of rows gets its own grids
rng = np.random.default_rng(0)
W = rng.normal(size=(8, 3))
mgrid = fit_matrix_grid(W, QuantConfig(bits=3, group_size=4))
Q, codes = quantize_matrix(W, mgrid)
print("grid shape (groups, columns):", mgrid.delta.shape)
print("max abs error per group:", [float(np.abs(W - Q)[r.start : r.stop].max()) for r in mgrid.groups])
