"""Multi-modal masked autoencoder (image + text) on a small numpy autograd."""

from .config import RunConfig, TrainConfig, load_run_config
from .errors import CheckpointConfigError, CheckpointIntegrityError, ConfigError
from .model import M3AE
from .tensor import Parameter, Tensor, backward, no_grad
from .transformer import ModelConfig

__all__ = [
    "CheckpointConfigError",
    "CheckpointIntegrityError",
    "ConfigError",
    "M3AE",
    "ModelConfig",
    "Parameter",
    "RunConfig",
    "Tensor",
    "TrainConfig",
    "backward",
    "load_run_config",
    "no_grad",
]
