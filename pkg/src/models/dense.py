from collections import namedtuple

import numpy as np

from dropout import DropoutSpec
from errors import ConfigurationError
from layers import functional as F
from layers.params import LayerParams
from models.model import BaseNetwork, dropout_site, dropout_site_backward

_DenseConfig = namedtuple('DenseConfig', ['input_dim', 'hidden_sizes', 'num_classes', 'dropout',
                                          'final_fc_dropout_rate', 'precision'])


class DenseConfig(_DenseConfig):
    __slots__ = ()

    def __new__(cls, input_dim=2, hidden_sizes=(64,), num_classes=2, dropout=None,
                final_fc_dropout_rate=0.1, precision='float32'):
        hidden_sizes = tuple(int(h) for h in hidden_sizes)
        if input_dim < 1 or (hidden_sizes and min(hidden_sizes) < 1):
            raise ConfigurationError('layer sizes must be positive')
        if dropout is None:
            dropout = DropoutSpec()
        elif isinstance(dropout, dict):
            dropout = DropoutSpec(**dropout)
        if not 0. <= final_fc_dropout_rate < 1.:
            raise ConfigurationError('final_fc_dropout_rate must lie in [0, 1)')
        return super(DenseConfig, cls).__new__(cls, int(input_dim), hidden_sizes,
                                               int(num_classes), dropout,
                                               float(final_fc_dropout_rate), precision)

    def to_dict(self):
        return {'input_dim': self.input_dim,
                'hidden_sizes': list(self.hidden_sizes),
                'num_classes': self.num_classes,
                'dropout': self.dropout.to_dict(),
                'final_fc_dropout_rate': self.final_fc_dropout_rate,
                'precision': self.precision}


class DenseNetwork(BaseNetwork):
    """Multilayer perceptron: ([drop] dense ReLU) per hidden layer, then head dropout and dense.

    Body sites see (N, F) features, so block and channel variants reduce to element
    dropout; the layer variant has no residual blocks and leaves the body untouched.
    With no hidden layers the network is linear in its parameters.
    """

    architecture = 'dense'

    def __init__(self, config, seed):
        super(DenseNetwork, self).__init__(config, seed)
        rng = np.random.default_rng(self.seed)
        sizes = (config.input_dim,) + config.hidden_sizes
        self.hidden = [LayerParams.dense('hidden{}'.format(i), sizes[i], sizes[i + 1], rng,
                                         config.precision)
                       for i in range(len(config.hidden_sizes))]
        self.fc = LayerParams.dense('fc', sizes[-1], config.num_classes, rng, config.precision)

    def parameters(self):
        params = []
        for layer in self.hidden:
            params += layer.parameters()
        return params + self.fc.parameters()

    def config_dict(self):
        return self.config.to_dict()

    @classmethod
    def from_config_dict(cls, config_dict, seed):
        return cls(DenseConfig(**config_dict), seed)

    def _forward(self, inputs, sampler, bn_mode):
        hidden = inputs.reshape(inputs.shape[0], -1)
        if hidden.shape[1] != self.config.input_dim:
            raise ConfigurationError('expected {} input features, got {}'
                                     .format(self.config.input_dim, hidden.shape[1]))
        tape = {'input_shape': inputs.shape, 'layers': []}
        for i, layer in enumerate(self.hidden):
            entry = {}
            hidden, entry['drop'] = dropout_site(
                hidden, sampler.site_mask('hidden{}'.format(i), hidden.shape))
            hidden, entry['dense'] = F.dense_forward(hidden, layer)
            hidden, entry['relu'] = F.relu_forward(hidden)
            tape['layers'].append(entry)
        hidden, tape['drop_head'] = dropout_site(hidden, sampler.head_mask(hidden.shape))
        logits, tape['fc'] = F.dense_forward(hidden, self.fc)
        return logits, tape

    def _backward(self, grad_logits, tape):
        grad, grad_w, grad_b = F.dense_backward(grad_logits, tape['fc'], self.fc)
        self.fc.weights.grad += grad_w
        self.fc.bias.grad += grad_b
        grad = dropout_site_backward(grad, tape['drop_head'])
        for layer, entry in zip(reversed(self.hidden), reversed(tape['layers'])):
            grad = F.relu_backward(grad, entry['relu'])
            grad, grad_w, grad_b = F.dense_backward(grad, entry['dense'], layer)
            layer.weights.grad += grad_w
            layer.bias.grad += grad_b
            grad = dropout_site_backward(grad, entry['drop'])
