"""Multi-view graph convolutional siamese networks for brain-connectivity pairs.

Spectral graph convolution over a shared brain-geometry graph, view pooling,
row-wise pair matching and a softmax head, trained with hand-written
gradients and Adam, plus baselines, metrics and a synthetic data generator.
"""

from mvgcn.dataio import Dataset, SynthConfig, generate_synthetic, load_dataset, save_dataset
from mvgcn.errors import ConvergenceError, DataFormatError, DegenerateGraphError, InvalidInputError
from mvgcn.training import TrainConfig, run_cross_validation

__version__ = "0.1.0"

__all__ = [
    "ConvergenceError",
    "DataFormatError",
    "Dataset",
    "DegenerateGraphError",
    "InvalidInputError",
    "SynthConfig",
    "TrainConfig",
    "generate_synthetic",
    "load_dataset",
    "run_cross_validation",
    "save_dataset",
]
