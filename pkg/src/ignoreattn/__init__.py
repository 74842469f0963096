"""Channel and spatial attention blocks that learn what to ignore, on a small numpy autodiff stack."""
from .attention import AttentionMode, CBAMBlock, Inversion, SEBlock, invert
from .autograd import Variable, backward, no_grad, numeric_grad
from .errors import CheckpointError, ConfigError, DataError, IgnoreAttnError, NumericError
from .models import Model, ModelConfig, Stage, build
from .train import TrainConfig, evaluate, fit

__version__ = "0.1.0"

__all__ = [
    "AttentionMode", "CBAMBlock", "Inversion", "SEBlock", "invert",
    "Variable", "backward", "no_grad", "numeric_grad",
    "CheckpointError", "ConfigError", "DataError", "IgnoreAttnError", "NumericError",
    "Model", "ModelConfig", "Stage", "build",
    "TrainConfig", "evaluate", "fit",
]
