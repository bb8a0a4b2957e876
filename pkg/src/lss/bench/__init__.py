"""Synthetic occlusion benchmark for comparing sample-selection strategies."""

from .model import STRATEGIES, CellHeadRegressor
from .runner import BenchConfig, BenchReport, compare, preset_config, run_strategy
from .synth import SynthBatch, SynthConfig, generate_scene, mixup_batch

__all__ = [
    "STRATEGIES",
    "BenchConfig",
    "BenchReport",
    "CellHeadRegressor",
    "SynthBatch",
    "SynthConfig",
    "compare",
    "generate_scene",
    "mixup_batch",
    "preset_config",
    "run_strategy",
]
