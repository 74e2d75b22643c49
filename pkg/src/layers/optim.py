import numpy as np

from errors import NumericalError


def sgd_step(parameters, lr, momentum=0.9, weight_decay=0.):
    """One SGD-with-momentum update over every parameter.

    v <- momentum * v + grad + weight_decay * w, then w <- w - lr * v. Weight decay is
    skipped for parameters created with `decay=False` (biases, batch-norm affine terms).

    Args:
        parameters (list of layers.params.Parameter): Parameters with gradients filled in.
        lr (float): Learning rate.
        momentum (float): Momentum factor.
        weight_decay (float): L2 penalty factor.

    """
    for param in parameters:
        if not np.all(np.isfinite(param.grad)):
            bad = int(np.size(param.grad) - np.count_nonzero(np.isfinite(param.grad)))
            raise NumericalError('non-finite gradient in `{}` ({} of {} entries)'
                                 .format(param.name, bad, param.grad.size))
        grad = param.grad
        if weight_decay and param.decay:
            grad = grad + weight_decay * param.value
        param.velocity *= momentum
        param.velocity += grad
        param.value -= lr * param.velocity
