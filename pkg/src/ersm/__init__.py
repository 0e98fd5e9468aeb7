"""Energy-regularized spatial masking for convolutional feature maps.

The package bundles a float64 tensor kernel set, a reverse-mode autodiff
tape, the energy-mask layer (unary + pairwise token energies, sigmoid
gating, expected-energy regularizer), a small convolutional classifier, a
synthetic planted-glyph dataset, an AdamW training loop, and a
deletion-robustness / sparsity / alignment evaluation suite.
"""

from . import autodiff, data, energy_mask, evaluation, model, tensor, training
from .autodiff import GradCheckReport, Node, Tape, grad_check
from .data import Dataset, GeneratorConfig, Sample
from .energy_mask import (
    EnergyDiagnostics,
    MaskLayerParams,
    NeighborTable,
    TokenGeometry,
)
from .evaluation import AlignmentReport, RobustnessCurve, SparsityReport
from .model import ConvBlock, Model, ModelConfig, ModelParams
from .training import EpochMetrics, TrainConfig, TrainResult

__version__ = "0.1.0"

__all__ = [
    "autodiff",
    "data",
    "energy_mask",
    "evaluation",
    "model",
    "tensor",
    "training",
    "AlignmentReport",
    "ConvBlock",
    "Dataset",
    "EnergyDiagnostics",
    "EpochMetrics",
    "GeneratorConfig",
    "GradCheckReport",
    "MaskLayerParams",
    "Model",
    "ModelConfig",
    "ModelParams",
    "NeighborTable",
    "Node",
    "RobustnessCurve",
    "Sample",
    "SparsityReport",
    "Tape",
    "TokenGeometry",
    "TrainConfig",
    "TrainResult",
    "grad_check",
]
