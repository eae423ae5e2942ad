"""Transformer, Low-Rank Transformer and Linformer: models, cost accounting and benchmarks."""

from .attention import (
    AttentionMask,
    LinformerConfig,
    LowRankConfig,
    ModelConfig,
    linformer_attention,
    lrmha_forward,
    mha_forward,
    sdpa,
)
from .blocks import ClassifierModel, LedLayer, VariantSpec, count_params, led_forward
from .costmodel import CostReport, cost_report, macs_forward, memory_estimate

__version__ = "0.1.0"
