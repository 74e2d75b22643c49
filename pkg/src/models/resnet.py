from collections import namedtuple

import numpy as np

from dropout import DropoutSpec
from errors import ConfigurationError
from layers import functional as F
from layers.params import BatchNormState, LayerParams
from models.model import BaseNetwork, dropout_site, dropout_site_backward

_ResNetConfig = namedtuple('ResNetConfig', ['stage_channels', 'blocks_per_stage', 'num_classes',
                                            'input_shape', 'dropout', 'final_fc_dropout_rate',
                                            'precision'])


class ResNetConfig(_ResNetConfig):
    """Architecture of a pre-activation ResNet.

    Stage s holds `blocks_per_stage` blocks with `stage_channels[s]` output channels; the
    first block of every stage after the first halves the resolution.
    """

    __slots__ = ()

    def __new__(cls, stage_channels=(16, 32, 64), blocks_per_stage=2, num_classes=10,
                input_shape=(3, 32, 32), dropout=None, final_fc_dropout_rate=0.1,
                precision='float32'):
        stage_channels = tuple(int(c) for c in stage_channels)
        input_shape = tuple(int(s) for s in input_shape)
        if not stage_channels or min(stage_channels) < 1:
            raise ConfigurationError('stage_channels must be a non-empty list of positive ints')
        if blocks_per_stage < 1:
            raise ConfigurationError('blocks_per_stage must be >= 1')
        if len(input_shape) != 3:
            raise ConfigurationError('input_shape must be (C, H, W), got {}'.format(input_shape))
        if dropout is None:
            dropout = DropoutSpec()
        elif isinstance(dropout, dict):
            dropout = DropoutSpec(**dropout)
        if not 0. <= final_fc_dropout_rate < 1.:
            raise ConfigurationError('final_fc_dropout_rate must lie in [0, 1)')
        return super(ResNetConfig, cls).__new__(cls, stage_channels, int(blocks_per_stage),
                                                int(num_classes), input_shape, dropout,
                                                float(final_fc_dropout_rate), precision)

    def to_dict(self):
        return {'stage_channels': list(self.stage_channels),
                'blocks_per_stage': self.blocks_per_stage,
                'num_classes': self.num_classes,
                'input_shape': list(self.input_shape),
                'dropout': self.dropout.to_dict(),
                'final_fc_dropout_rate': self.final_fc_dropout_rate,
                'precision': self.precision}


class PreActBlock:
    """BN-ReLU-[drop]-conv3x3-BN-ReLU-[drop]-conv3x3 with an identity or 1x1 projection skip.

    The projection, when present, reads the pre-activated input behind its own dropout
    site. A gate of 0 skips the residual branch entirely; kept branches are not rescaled.
    """

    def __init__(self, name, in_channels, out_channels, stride, rng, dtype):
        self.name = name
        self.stride = stride
        self.bn1 = BatchNormState('{}.bn1'.format(name), in_channels, dtype)
        self.conv1 = LayerParams.conv('{}.conv1'.format(name), in_channels, out_channels, 3,
                                      rng, dtype)
        self.bn2 = BatchNormState('{}.bn2'.format(name), out_channels, dtype)
        self.conv2 = LayerParams.conv('{}.conv2'.format(name), out_channels, out_channels, 3,
                                      rng, dtype)
        self.shortcut = None
        if stride != 1 or in_channels != out_channels:
            self.shortcut = LayerParams.conv('{}.shortcut'.format(name), in_channels,
                                             out_channels, 1, rng, dtype)

    @property
    def is_downsampling(self):
        return self.stride != 1

    def parameters(self):
        params = self.bn1.parameters() + self.conv1.parameters() \
            + self.bn2.parameters() + self.conv2.parameters()
        if self.shortcut is not None:
            params += self.shortcut.parameters()
        return params

    def buffers(self):
        buffers = dict(self.bn1.buffers())
        buffers.update(self.bn2.buffers())
        return buffers

    def forward(self, inputs, sampler, bn_mode, gate):
        tape = {'gate': gate}
        if gate == 0. and self.shortcut is None:
            return inputs, tape

        pre, tape['bn1'] = F.batchnorm_forward(inputs, self.bn1, bn_mode)
        act, tape['relu1'] = F.relu_forward(pre)
        if self.shortcut is None:
            skip = inputs
        else:
            masked, tape['drop_shortcut'] = dropout_site(
                act, sampler.site_mask('{}.shortcut'.format(self.name), act.shape))
            skip, tape['shortcut'] = F.conv2d_forward(masked, self.shortcut, self.stride, 0)
        if gate == 0.:
            return skip, tape

        hidden, tape['drop1'] = dropout_site(
            act, sampler.site_mask('{}.conv1'.format(self.name), act.shape))
        hidden, tape['conv1'] = F.conv2d_forward(hidden, self.conv1, self.stride, 1)
        hidden, tape['bn2'] = F.batchnorm_forward(hidden, self.bn2, bn_mode)
        hidden, tape['relu2'] = F.relu_forward(hidden)
        hidden, tape['drop2'] = dropout_site(
            hidden, sampler.site_mask('{}.conv2'.format(self.name), hidden.shape))
        hidden, tape['conv2'] = F.conv2d_forward(hidden, self.conv2, 1, 1)
        return skip + hidden, tape

    def backward(self, grad, tape):
        gate = tape['gate']
        if gate == 0. and self.shortcut is None:
            return grad

        grad_act = None
        if gate != 0.:
            grad_hidden, grad_w, grad_b = F.conv2d_backward(grad, tape['conv2'], self.conv2)
            _accumulate(self.conv2, grad_w, grad_b)
            grad_hidden = dropout_site_backward(grad_hidden, tape['drop2'])
            grad_hidden = F.relu_backward(grad_hidden, tape['relu2'])
            grad_hidden, grad_g, grad_be = F.batchnorm_backward(grad_hidden, tape['bn2'], self.bn2)
            _accumulate_bn(self.bn2, grad_g, grad_be)
            grad_hidden, grad_w, grad_b = F.conv2d_backward(grad_hidden, tape['conv1'], self.conv1)
            _accumulate(self.conv1, grad_w, grad_b)
            grad_act = dropout_site_backward(grad_hidden, tape['drop1'])

        if self.shortcut is None:
            grad_inputs = grad
        else:
            grad_masked, grad_w, grad_b = F.conv2d_backward(grad, tape['shortcut'], self.shortcut)
            _accumulate(self.shortcut, grad_w, grad_b)
            grad_skip = dropout_site_backward(grad_masked, tape['drop_shortcut'])
            grad_act = grad_skip if grad_act is None else grad_act + grad_skip
            grad_inputs = 0.

        grad_pre = F.relu_backward(grad_act, tape['relu1'])
        grad_pre, grad_g, grad_be = F.batchnorm_backward(grad_pre, tape['bn1'], self.bn1)
        _accumulate_bn(self.bn1, grad_g, grad_be)
        return grad_inputs + grad_pre


def _accumulate(params, grad_weights, grad_bias):
    params.weights.grad += grad_weights
    params.bias.grad += grad_bias


def _accumulate_bn(state, grad_gamma, grad_beta):
    state.gamma.grad += grad_gamma
    state.beta.grad += grad_beta


class PreActResNet(BaseNetwork):
    """Miniature pre-activation ResNet with a dropout site in front of every convolution.

    stem: [drop] conv3x3 -> residual stages -> BN-ReLU -> global average pool ->
    element dropout at `final_fc_dropout_rate` -> dense. The head dropout ignores the
    body variant; the layer variant replaces the per-conv sites with per-block gates.
    """

    architecture = 'resnet'

    def __init__(self, config, seed):
        super(PreActResNet, self).__init__(config, seed)
        rng = np.random.default_rng(self.seed)
        dtype = config.precision
        channels, height, width = config.input_shape

        self.stem = LayerParams.conv('stem', channels, config.stage_channels[0], 3, rng, dtype)
        self.blocks = []
        in_channels = config.stage_channels[0]
        for stage, out_channels in enumerate(config.stage_channels):
            for index in range(config.blocks_per_stage):
                stride = 2 if stage > 0 and index == 0 else 1
                name = 'stage{}.block{}'.format(stage, index)
                self.blocks.append(PreActBlock(name, in_channels, out_channels, stride, rng, dtype))
                in_channels = out_channels
        self.bn_final = BatchNormState('final.bn', in_channels, dtype)
        self.fc = LayerParams.dense('fc', in_channels, config.num_classes, rng, dtype)

    @property
    def is_downsampling(self):
        return [block.is_downsampling for block in self.blocks]

    def parameters(self):
        params = self.stem.parameters()
        for block in self.blocks:
            params += block.parameters()
        return params + self.bn_final.parameters() + self.fc.parameters()

    def buffers(self):
        buffers = {}
        for block in self.blocks:
            buffers.update(block.buffers())
        buffers.update(self.bn_final.buffers())
        return buffers

    def config_dict(self):
        return self.config.to_dict()

    @classmethod
    def from_config_dict(cls, config_dict, seed):
        return cls(ResNetConfig(**config_dict), seed)

    def _forward(self, inputs, sampler, bn_mode):
        if inputs.shape[1:] != self.config.input_shape:
            raise ConfigurationError('expected inputs of shape (N, {}), got {}'
                                     .format(self.config.input_shape, inputs.shape))
        tape = {}
        hidden, tape['drop_stem'] = dropout_site(inputs, sampler.site_mask('stem', inputs.shape))
        hidden, tape['stem'] = F.conv2d_forward(hidden, self.stem, 1, 1)

        gates = sampler.layer_gates(self.is_downsampling)
        tape['blocks'] = []
        for block, gate in zip(self.blocks, gates):
            hidden, block_tape = block.forward(hidden, sampler, bn_mode, gate)
            tape['blocks'].append(block_tape)
        tape['gates'] = gates

        hidden, tape['bn_final'] = F.batchnorm_forward(hidden, self.bn_final, bn_mode)
        hidden, tape['relu_final'] = F.relu_forward(hidden)
        features, tape['pool'] = F.global_avg_pool_forward(hidden)
        features, tape['drop_head'] = dropout_site(features, sampler.head_mask(features.shape))
        logits, tape['fc'] = F.dense_forward(features, self.fc)
        return logits, tape

    def _backward(self, grad_logits, tape):
        grad, grad_w, grad_b = F.dense_backward(grad_logits, tape['fc'], self.fc)
        _accumulate(self.fc, grad_w, grad_b)
        grad = dropout_site_backward(grad, tape['drop_head'])
        grad = F.global_avg_pool_backward(grad, tape['pool'])
        grad = F.relu_backward(grad, tape['relu_final'])
        grad, grad_g, grad_be = F.batchnorm_backward(grad, tape['bn_final'], self.bn_final)
        _accumulate_bn(self.bn_final, grad_g, grad_be)

        for block, block_tape in zip(reversed(self.blocks), reversed(tape['blocks'])):
            grad = block.backward(grad, block_tape)

        _, grad_w, grad_b = F.conv2d_backward(grad, tape['stem'], self.stem)
        _accumulate(self.stem, grad_w, grad_b)

    def last_gates(self):
        """Layer gates of the last recorded forward pass."""
        return None if self._tape is None else self._tape['gates'].copy()
