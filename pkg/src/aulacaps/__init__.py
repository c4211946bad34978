"""AULA-Caps: a dual-stream (2D spatial + 3D spatio-temporal) capsule network for
multi-label facial action unit detection, built on a small numpy autodiff engine."""

from .autodiff import Tensor, backward, no_grad
from .model import AULACaps, ModelConfig, build, desk_config, full_config

__all__ = ["AULACaps", "ModelConfig", "Tensor", "backward", "build", "desk_config", "full_config", "no_grad"]
__version__ = "0.1.0"
