"""Error-compensating quantization against plain rounding.

Run with ``python demos/03_optq_vs_rtn.py``.
"""

# %% The objective is the calibration-weighted error ||X (Q - W)||_F
import numpy as np

from calibq.calibration import damp
from calibq.ptq import MagrConfig, PtqConfig, ptq_optq, ptq_rtn
from calibq.quant_grid import QuantConfig
from calibq.synthetic import layer_suite

layers = layer_suite(seed=3, count=10, m_range=(32, 64), n_range=(32, 64))
cfg = PtqConfig(quant=QuantConfig(bits=2, group_size=16))

# %% OPTQ sweeps rows and pushes each rounding error onto the rows not yet fixed
for i, layer in enumerate(layers):
    H = damp(layer.gram, cfg.damp_ratio)
    rtn = ptq_rtn(layer.W, cfg, H).obj_weighted
    optq = ptq_optq(layer.W, H, cfg).obj_weighted
    print(f"layer {i}: rtn {rtn:8.3f}  optq {optq:8.3f}  ratio {optq / rtn:.3f}")

# %% MagR shrinks the largest weights before the grids are fit
cfg_magr = PtqConfig(quant=cfg.quant, magr=MagrConfig(alpha=None))
layer = layers[0]
H = damp(layer.gram, cfg.damp_ratio)
res = ptq_optq(layer.W, H, cfg_magr)
print("max |W| before/after MagR:", float(np.abs(layer.W).max()), float(np.abs(res.W_pre).max()))
print("objective with MagR:", res.obj_weighted)
