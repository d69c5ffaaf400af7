"""vLinear: a linear multivariate forecaster with a rank-1 token mixer and a
flow-matching output head, implemented on numpy with hand-written gradients."""
from .flowmatch import LossSpec
from .linalg import Rng
from .model import ModelConfig, forecast, forecast_ensemble
from .train import TrainConfig, load_checkpoint, save_checkpoint, train_loop

__version__ = "0.1.0"

__all__ = ["LossSpec", "ModelConfig", "Rng", "TrainConfig", "forecast", "forecast_ensemble",
           "load_checkpoint", "save_checkpoint", "train_loop", "__version__"]
