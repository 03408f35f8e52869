"""Non-oscillatory pattern decomposition of multicomponent signals."""

from .signal_model import (
    ComponentSpec, NoiseSpec, SampledSignal, ShapeFunction, builtin_experiment_signal,
    synthesize,
)
from .driver import NopConfig, NopInit, NopResult, run_nop

__version__ = "0.1.0"

__all__ = [
    "ComponentSpec", "NoiseSpec", "SampledSignal", "ShapeFunction", "builtin_experiment_signal",
    "synthesize", "NopConfig", "NopInit", "NopResult", "run_nop",
]
