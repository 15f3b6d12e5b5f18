"""Calibrated low-rank adapter initialization versus plain truncated SVD.

Run with ``python demos/04_lowrank_init.py``.
"""

# %% After quantization the residual dW = W - Q is what the adapters must absorb
import numpy as np

from calibq.lowrank import InitConfig, layer_pipeline
from calibq.ptq import PtqConfig
from calibq.quant_grid import QuantConfig
from calibq.synthetic import layer_suite

layers = layer_suite(seed=4, count=12, m_range=(48, 96), n_range=(48, 96))
cfg_ptq = PtqConfig(quant=QuantConfig(bits=2, group_size=16))
cfg_init = InitConfig(rank=8)

# %% Compare three discrepancies ||X (Q + A B^T - W)||_F per layer
print(f"{'layer':>5} {'Q only':>9} {'plain SVD':>10} {'calibrated':>11} {'spectral':>9}")
for i, layer in enumerate(layers):
    res = layer_pipeline(layer.W, layer.gram, cfg_ptq, cfg_init, layer_id=str(i))
    print(f"{i:>5} {res.frob_q_only:9.3f} {res.frob_baseline_loftq:10.3f} {res.frob_disc:11.3f} {res.spec_disc:9.3f}")

# %% The closed form reaches the tail energy of R dW, so no rank-8 pair does better
res = layer_pipeline(layers[0].W, layers[0].gram, cfg_ptq, cfg_init)
print("history of (step, objective):", [(s, round(v, 4)) for s, v in res.history])

# %% Extra alternating rounds re-quantize W - A B^T; adapter steps never increase the objective
res3 = layer_pipeline(layers[0].W, layers[0].gram, cfg_ptq, InitConfig(rank=8, altmin_iters=3))
print([(s, round(v, 4)) for s, v in res3.history])
print("A, B shapes:", res.A.shape, res.B.shape, "| product norm", float(np.linalg.norm(res.A @ res.B.T)))
