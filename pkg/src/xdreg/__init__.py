"""xdreg: cross-domain feature-adaptation regression.

Fuses feature vectors from two statistically mismatched domains (RGB and
energy-distribution) through z-score, LayerNorm or LayerNorm+GroupNorm
adaptation heads to regress a positive scalar (food energy in kCal),
with from-scratch gradient-checked layers, a deterministic trainer, and
a synthetic dual-domain benchmark.
"""

from .dataio import FeatureVector, Sample
from .errors import XdregError
from .evaluation import MetricsReport, evaluate, evaluate_window, mae, mape
from .heads import HeadModel, HeadVariant, build_head, head_backward, head_forward
from .rng import RngStream
from .synthbench import SynthConfig, generate, ordering_experiment
from .training import Checkpoint, TrainConfig, loss_and_grad, optimizer_step, train

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "FeatureVector",
    "HeadModel",
    "HeadVariant",
    "MetricsReport",
    "RngStream",
    "Sample",
    "SynthConfig",
    "TrainConfig",
    "XdregError",
    "build_head",
    "evaluate",
    "evaluate_window",
    "generate",
    "head_backward",
    "head_forward",
    "loss_and_grad",
    "mae",
    "mape",
    "optimizer_step",
    "ordering_experiment",
    "train",
]
