"""Kolmogorov-Arnold networks with curvature penalties, built on NumPy."""

from .basis import BasisKind, GridSpec, K_SILU
from .errors import ConfigError, DivergenceError, NumericalError, ShapeError
from .network import KanNetwork, forward, init_network, predict
from .optim import TrainConfig, TrainLog, evaluate, train
from .penalty import PenaltyConfig, PenaltyKind

__all__ = [
    "BasisKind", "GridSpec", "K_SILU", "ConfigError", "DivergenceError", "NumericalError", "ShapeError",
    "KanNetwork", "forward", "init_network", "predict", "TrainConfig", "TrainLog", "evaluate", "train",
    "PenaltyConfig", "PenaltyKind",
]
