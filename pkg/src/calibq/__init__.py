"""Calibrated post-training quantization with closed-form low-rank adapter init."""

__version__ = "0.1.0"

from .calibration import DampedGram, GramAccumulator, damp, gram_from_bundle  # noqa: E402
from .lowrank import (  # noqa: E402
    AdapterPair,
    InitConfig,
    LayerInitResult,
    RootTransform,
    altmin_refine,
    build_root,
    cloq_init,
    layer_pipeline,
    lr_approx,
    tail_energy,
    truncated_lr,
)
from .ptq import (  # noqa: E402
    MagrConfig,
    PtqConfig,
    PtqResult,
    magr_preprocess,
    ptq_optq,
    ptq_rtn,
    quantize_layer,
    weighted_objective,
)
from .quant_grid import QuantConfig, QuantGrid, fit_grid, partition_rows, quantize_rtn  # noqa: E402
from .tensor_store import LayerRecord, TensorBundle, read_bundle, write_bundle  # noqa: E402

__all__ = [
    "AdapterPair",
    "DampedGram",
    "GramAccumulator",
    "InitConfig",
    "LayerInitResult",
    "LayerRecord",
    "MagrConfig",
    "PtqConfig",
    "PtqResult",
    "QuantConfig",
    "QuantGrid",
    "RootTransform",
    "TensorBundle",
    "altmin_refine",
    "build_root",
    "cloq_init",
    "damp",
    "fit_grid",
    "gram_from_bundle",
    "layer_pipeline",
    "lr_approx",
    "magr_preprocess",
    "partition_rows",
    "ptq_optq",
    "ptq_rtn",
    "quantize_layer",
    "quantize_rtn",
    "read_bundle",
    "tail_energy",
    "truncated_lr",
    "weighted_objective",
    "write_bundle",
]
