from . import tensor
from .nn import (
    ConfigError,
    MlpSpec,
    ParameterSet,
    init_attention,
    init_linear,
    init_mlp,
    linear,
    mha_cross_attention,
    mlp_forward,
    position_encode,
    set_identity_attention,
    sinusoidal_encode,
)
from .tensor import Tensor, as_tensor, backward, no_grad

__all__ = [
    "ConfigError", "MlpSpec", "ParameterSet", "Tensor", "as_tensor", "backward",
    "init_attention", "init_linear", "init_mlp", "linear", "mha_cross_attention",
    "mlp_forward", "no_grad", "position_encode", "set_identity_attention",
    "sinusoidal_encode", "tensor",
]
