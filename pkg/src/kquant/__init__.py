"""Gaussian k-quantile quantization: training, integer-only inference and
threshold export for comparator-chain activation hardware."""

from .errors import (AccumulatorOverflow, ConfigError, DegenerateTableError, DegenerateWeightsError,
                     DivergenceError, DomainError, KQuantError, ModelStateError, NumericError, ShapeError)
from .gaussmath import GaussParams, RoundingPolicy, normal_cdf, normal_pdf, normal_quantile, round_scalar
from .infer import analyze_ranges, estimate_hw_cost, execute_graph, residual_block_forward
from .model import ModelGraph, build_resnet_small, build_small_conv, build_vgg_like
from .quantize import (QuantConfig, ShiftSpec, ThresholdTable, build_threshold_table, eval_comparator_chain,
                       linear_shift_quantize, log2_quantize, quantize_activation, quantize_weights)
from .train import TrainConfig, advance_stage, train_model

__version__ = "0.1.0"

__all__ = [
    "AccumulatorOverflow", "ConfigError", "DegenerateTableError", "DegenerateWeightsError", "DivergenceError",
    "DomainError", "KQuantError", "ModelStateError", "NumericError", "ShapeError",
    "GaussParams", "RoundingPolicy", "normal_cdf", "normal_pdf", "normal_quantile", "round_scalar",
    "analyze_ranges", "estimate_hw_cost", "execute_graph", "residual_block_forward",
    "ModelGraph", "build_resnet_small", "build_small_conv", "build_vgg_like",
    "QuantConfig", "ShiftSpec", "ThresholdTable", "build_threshold_table", "eval_comparator_chain",
    "linear_shift_quantize", "log2_quantize", "quantize_activation", "quantize_weights",
    "TrainConfig", "advance_stage", "train_model",
]
