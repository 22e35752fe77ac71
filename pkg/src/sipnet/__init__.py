"""SIP-Net: a 3-D encoder-decoder segmentation network with densely-connected
residual blocks, parameter-free attention gates and deep supervision, built on
a small numpy autodiff engine."""

from .tensor import ConfigError, ShapeError, Tensor, UsageError, backward, no_grad, precision
from .model import Model, ModelConfig, build, forward, shape_trace

__all__ = [
    "ConfigError",
    "Model",
    "ModelConfig",
    "ShapeError",
    "Tensor",
    "UsageError",
    "backward",
    "build",
    "forward",
    "no_grad",
    "precision",
    "shape_trace",
]

__version__ = "0.1.0"
