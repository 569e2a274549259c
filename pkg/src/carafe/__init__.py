"""Content-aware feature upsampling (CARAFE) in NumPy, with baseline
upsamplers, a FLOPs/parameter cost model and a toy training benchmark."""

from .baselines import UpsamplerKind
from .carafe import (
    CarafeConfig, CarafeParams, KernelField, carafe_backward, carafe_forward,
    normalize_variant, predict_kernels, reassemble, reassemble_mask, staged_upsample,
)
from .cost import CostReport, baseline_cost, carafe_cost, cost_table
from .errors import ConfigError, ContractError, ShapeError, TrainingDiverged
from .tensor import make_rng

__version__ = "0.1.0"

__all__ = [
    "CarafeConfig", "CarafeParams", "ConfigError", "ContractError", "CostReport",
    "KernelField", "ShapeError", "TrainingDiverged", "UpsamplerKind", "baseline_cost",
    "carafe_backward", "carafe_cost", "carafe_forward", "cost_table", "make_rng", "normalize_variant",
    "predict_kernels", "reassemble", "reassemble_mask", "staged_upsample",
]
