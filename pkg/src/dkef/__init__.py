"""Deep kernel exponential families: fitting, evaluation and synthetic benchmarks."""

from .errors import DataError, DkefError, NumericalError
from .featnet import NetSpec
from .kef import FittedModel, RegWeights
from .trainer import Architecture, TrainConfig, fit_mixture, train

__version__ = "0.1.0"
