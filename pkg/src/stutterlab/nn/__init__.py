from .autograd import Tensor
from .params import ParamStore, lora_param_count
from .optim import OptimState, optimizer_step
from .gradcheck import grad_check
from .layers import NetContext, mean_pool

__all__ = [
    "Tensor",
    "ParamStore",
    "lora_param_count",
    "OptimState",
    "optimizer_step",
    "grad_check",
    "NetContext",
    "mean_pool",
]
