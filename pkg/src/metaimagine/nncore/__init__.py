"""Small differentiable-network kernel on numpy (float64)."""
from . import autodiff as ad
from .autodiff import Param, TapeError, Tensor, backward
from .checkpoint import load_into, read_checkpoint, save_checkpoint
from .gradcheck import finite_diff_check
from .layers import (
    STD_FLOOR,
    GaussianHead,
    Gru,
    GruSpec,
    Mlp,
    MlpSpec,
    gaussian_log_density,
    gaussian_split,
    gru_step,
    mlp_forward,
)
from .params import ParameterStore, adam_update, clip_grad_norm

__all__ = [
    "ad",
    "Param",
    "TapeError",
    "Tensor",
    "backward",
    "load_into",
    "read_checkpoint",
    "save_checkpoint",
    "finite_diff_check",
    "STD_FLOOR",
    "GaussianHead",
    "Gru",
    "GruSpec",
    "Mlp",
    "MlpSpec",
    "gaussian_log_density",
    "gaussian_split",
    "gru_step",
    "mlp_forward",
    "ParameterStore",
    "adam_update",
    "clip_grad_norm",
]
