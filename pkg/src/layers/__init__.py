from .params import Parameter, LayerParams, BatchNormState
from .optim import sgd_step
from .gradcheck import gradient_check

__all__ = [
    Parameter,
    LayerParams,
    BatchNormState,
    sgd_step,
    gradient_check,
]
