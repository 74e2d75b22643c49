"""Forward and backward passes of the layers the residual network is built from.

Each `*_forward` returns `(output, cache)`; the matching `*_backward` consumes the cache.
Activations are NCHW numpy arrays, dense activations are (N, F).
"""
from collections import namedtuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import log_softmax, softmax as _softmax

from errors import ConfigurationError, UsageError


ConvCache = namedtuple('ConvCache', ['windows', 'input_shape', 'padded_shape', 'stride', 'pad',
                                     'output_shape'])
DenseCache = namedtuple('DenseCache', ['inputs'])
BatchNormCache = namedtuple('BatchNormCache', ['mode', 'normalized', 'inv_std', 'axes'])


def _require_cache(cache, layer):
    if cache is None:
        raise UsageError('{} backward called without a forward cache'.format(layer))


def _channel_view(values, ndim):
    return values.reshape((1, -1) + (1,) * (ndim - 2))


def conv_output_size(size, kernel_size, stride, pad):
    return (size + 2 * pad - kernel_size) // stride + 1


def conv2d_forward(inputs, params, stride=1, pad=0):
    """Cross-correlate an NCHW batch with (C_out, C_in, k, k) kernels.

    Args:
        inputs (numpy.ndarray): Batch of shape (N, C_in, H, W).
        params (layers.params.LayerParams): Kernel and per-output-channel bias.
        stride (int): Step between neighbouring windows.
        pad (int): Zero padding added to each spatial border.

    Returns:
        outputs (numpy.ndarray): Shape (N, C_out, H_out, W_out).
        cache (ConvCache): Needed by `conv2d_backward`.

    """
    weights = params.weights.value
    if inputs.ndim != 4:
        raise ConfigurationError('conv input must be 4-D, got shape {}'.format(inputs.shape))
    if inputs.shape[1] != weights.shape[1]:
        raise ConfigurationError('input has {} channels, kernel expects {}'
                                 .format(inputs.shape[1], weights.shape[1]))
    kernel_size = weights.shape[2]
    if kernel_size % 2 == 0 or weights.shape[3] != kernel_size:
        raise ConfigurationError('kernels must be square with odd size, got {}'
                                 .format(weights.shape[2:]))
    if stride < 1:
        raise ConfigurationError('stride must be >= 1')
    out_h = conv_output_size(inputs.shape[2], kernel_size, stride, pad)
    out_w = conv_output_size(inputs.shape[3], kernel_size, stride, pad)
    if out_h < 1 or out_w < 1:
        raise ConfigurationError('kernel {0}x{0} does not fit input {1}x{2} with pad {3}'
                                 .format(kernel_size, inputs.shape[2], inputs.shape[3], pad))

    padded = np.pad(inputs, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(padded, (kernel_size, kernel_size), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]
    outputs = np.tensordot(windows, weights, axes=([1, 4, 5], [1, 2, 3]))
    outputs = outputs.transpose(0, 3, 1, 2) + _channel_view(params.bias.value, 4)
    outputs = np.ascontiguousarray(outputs)
    cache = ConvCache(windows, inputs.shape, padded.shape, stride, pad, outputs.shape)
    return outputs, cache


def conv2d_backward(grad_out, cache, params):
    """Returns (grad_input, grad_weights, grad_bias)."""
    _require_cache(cache, 'conv2d')
    if grad_out.shape != cache.output_shape:
        raise ConfigurationError('grad_out has shape {}, forward output was {}'
                                 .format(grad_out.shape, cache.output_shape))
    weights = params.weights.value
    kernel_size = weights.shape[2]
    stride = cache.stride
    out_h, out_w = grad_out.shape[2:]

    grad_bias = grad_out.sum(axis=(0, 2, 3))
    grad_weights = np.tensordot(grad_out, cache.windows, axes=([0, 2, 3], [0, 2, 3]))

    grad_padded = np.zeros(cache.padded_shape, dtype=grad_out.dtype)
    for i in range(kernel_size):
        for j in range(kernel_size):
            contribution = np.einsum('nfhw,fc->nchw', grad_out, weights[:, :, i, j])
            grad_padded[:, :, i:i + stride * (out_h - 1) + 1:stride,
                        j:j + stride * (out_w - 1) + 1:stride] += contribution
    pad = cache.pad
    height, width = cache.input_shape[2:]
    grad_input = grad_padded[:, :, pad:pad + height, pad:pad + width]
    return np.ascontiguousarray(grad_input), grad_weights, grad_bias


def dense_forward(inputs, params):
    if inputs.ndim != 2 or inputs.shape[1] != params.weights.shape[0]:
        raise ConfigurationError('dense layer expects (N, {}) input, got {}'
                                 .format(params.weights.shape[0], inputs.shape))
    return inputs @ params.weights.value + params.bias.value, DenseCache(inputs)


def dense_backward(grad_out, cache, params):
    _require_cache(cache, 'dense')
    grad_input = grad_out @ params.weights.value.T
    grad_weights = cache.inputs.T @ grad_out
    return grad_input, grad_weights, grad_out.sum(axis=0)


def relu_forward(inputs):
    active = inputs > 0
    return inputs * active, active


def relu_backward(grad_out, cache):
    _require_cache(cache, 'relu')
    return grad_out * cache


def batchnorm_forward(inputs, state, mode):
    """Normalize per channel over batch (and spatial) axes.

    `mode='train'` normalizes with batch statistics and updates the running ones in place;
    `mode='eval'` reads the running statistics only.
    """
    if mode not in ('train', 'eval'):
        raise ConfigurationError('batchnorm mode must be `train` or `eval`, got `{}`'
                                 .format(mode))
    if inputs.shape[1] != state.num_channels:
        raise ConfigurationError('batchnorm expects {} channels, got {}'
                                 .format(state.num_channels, inputs.shape[1]))
    axes = (0,) + tuple(range(2, inputs.ndim))
    ndim = inputs.ndim
    if mode == 'train':
        mean = inputs.mean(axis=axes)
        var = inputs.var(axis=axes)
        state.running_mean[...] = state.momentum * state.running_mean + (1. - state.momentum) * mean
        state.running_var[...] = state.momentum * state.running_var + (1. - state.momentum) * var
    else:
        mean, var = state.running_mean, state.running_var

    inv_std = 1. / np.sqrt(var + state.epsilon)
    normalized = (inputs - _channel_view(mean, ndim)) * _channel_view(inv_std, ndim)
    outputs = normalized * _channel_view(state.gamma.value, ndim) \
        + _channel_view(state.beta.value, ndim)
    return outputs.astype(inputs.dtype, copy=False), BatchNormCache(mode, normalized, inv_std, axes)


def batchnorm_backward(grad_out, cache, state):
    """Returns (grad_input, grad_gamma, grad_beta)."""
    _require_cache(cache, 'batchnorm')
    ndim = grad_out.ndim
    normalized = cache.normalized
    grad_gamma = (grad_out * normalized).sum(axis=cache.axes)
    grad_beta = grad_out.sum(axis=cache.axes)
    grad_normalized = grad_out * _channel_view(state.gamma.value, ndim)
    inv_std = _channel_view(cache.inv_std, ndim)

    if cache.mode == 'eval':
        return grad_normalized * inv_std, grad_gamma, grad_beta

    count = grad_out.size // grad_out.shape[1]
    sum_grad = _channel_view(grad_normalized.sum(axis=cache.axes), ndim)
    sum_grad_dot = _channel_view((grad_normalized * normalized).sum(axis=cache.axes), ndim)
    grad_input = inv_std / count * (count * grad_normalized - sum_grad - normalized * sum_grad_dot)
    return grad_input, grad_gamma, grad_beta


def global_avg_pool_forward(inputs):
    return inputs.mean(axis=(2, 3)), inputs.shape


def global_avg_pool_backward(grad_out, cache):
    _require_cache(cache, 'global_avg_pool')
    height, width = cache[2:]
    grad = grad_out[:, :, None, None] / (height * width)
    return np.broadcast_to(grad, cache).copy()


def softmax(logits):
    return _softmax(logits, axis=1)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood of `labels` under softmax(logits).

    Args:
        logits (numpy.ndarray): Shape (N, K).
        labels (array-like of int): Shape (N,), values in [0, K).

    Returns:
        loss (float): Mean over the batch.
        grad_logits (numpy.ndarray): (softmax - onehot) / N.

    """
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ConfigurationError('logits must be (N, K) with K >= 2, got {}'.format(logits.shape))
    if labels.shape != (logits.shape[0],):
        raise ConfigurationError('labels must have shape ({},), got {}'
                                 .format(logits.shape[0], labels.shape))
    num_classes = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ConfigurationError('labels must lie in [0, {})'.format(num_classes))

    batch = logits.shape[0]
    log_probs = log_softmax(logits, axis=1)
    rows = np.arange(batch)
    loss = -log_probs[rows, labels].mean()
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1.
    return float(loss), grad / batch
