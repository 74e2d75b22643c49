import numpy as np

import config
from errors import ConfigurationError


class Parameter:
    """A trainable array with its gradient and momentum buffer.

    Args:
        name (str): Unique name inside a network, used as checkpoint key.
        value (numpy.ndarray): Initial value. Its shape is fixed from here on.
        decay (bool): Whether weight decay applies to this parameter.

    """

    def __init__(self, name, value, decay=True):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)
        self.velocity = np.zeros_like(value)
        self.decay = decay

    @property
    def shape(self):
        return self.value.shape

    def assign(self, value):
        value = np.asarray(value, dtype=self.value.dtype)
        if value.shape != self.value.shape:
            raise ConfigurationError('parameter `{}` has shape {}, got {}'
                                     .format(self.name, self.value.shape, value.shape))
        self.value[...] = value

    def zero_grad(self):
        self.grad[...] = 0.

    def astype(self, dtype):
        self.value = self.value.astype(dtype)
        self.grad = self.grad.astype(dtype)
        self.velocity = self.velocity.astype(dtype)


class LayerParams:
    """Weights and bias of a convolution or dense layer.

    Conv weights are (C_out, C_in, k, k); dense weights are (F_in, F_out).
    """

    def __init__(self, weights, bias):
        self.weights = weights
        self.bias = bias

    def parameters(self):
        return [self.weights, self.bias]

    @classmethod
    def conv(cls, name, in_channels, out_channels, kernel_size, rng, dtype='float32'):
        if kernel_size % 2 == 0:
            raise ConfigurationError('kernel size must be odd, got {}'.format(kernel_size))
        fan_in = in_channels * kernel_size * kernel_size
        weights = rng.normal(0., np.sqrt(2. / fan_in),
                             size=(out_channels, in_channels, kernel_size, kernel_size))
        return cls(Parameter('{}.weights'.format(name), weights.astype(dtype)),
                   Parameter('{}.bias'.format(name), np.zeros(out_channels, dtype=dtype),
                             decay=False))

    @classmethod
    def dense(cls, name, in_features, out_features, rng, dtype='float32'):
        weights = rng.normal(0., np.sqrt(2. / in_features), size=(in_features, out_features))
        return cls(Parameter('{}.weights'.format(name), weights.astype(dtype)),
                   Parameter('{}.bias'.format(name), np.zeros(out_features, dtype=dtype),
                             decay=False))


class BatchNormState:
    """Per-channel affine parameters and running statistics of a batch-norm layer."""

    def __init__(self, name, num_channels, dtype='float32',
                 momentum=config.BN_MOMENTUM, epsilon=config.BN_EPSILON):
        if not 0. < momentum < 1.:
            raise ConfigurationError('batchnorm momentum must lie in (0, 1), got {}'
                                     .format(momentum))
        self.name = name
        self.gamma = Parameter('{}.gamma'.format(name), np.ones(num_channels, dtype=dtype),
                               decay=False)
        self.beta = Parameter('{}.beta'.format(name), np.zeros(num_channels, dtype=dtype),
                              decay=False)
        self.running_mean = np.zeros(num_channels, dtype=dtype)
        self.running_var = np.ones(num_channels, dtype=dtype)
        self.momentum = momentum
        self.epsilon = epsilon

    @property
    def num_channels(self):
        return self.gamma.shape[0]

    def parameters(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return {'{}.running_mean'.format(self.name): self.running_mean,
                '{}.running_var'.format(self.name): self.running_var}

    def astype(self, dtype):
        self.gamma.astype(dtype)
        self.beta.astype(dtype)
        self.running_mean = self.running_mean.astype(dtype)
        self.running_var = self.running_var.astype(dtype)
