import numpy as np

from dropout import DropoutSpec
from errors import ConfigurationError, DataFormatError
from .model import BaseNetwork
from .resnet import PreActResNet, ResNetConfig
from .dense import DenseNetwork, DenseConfig

NETWORKS = {
    PreActResNet.architecture: PreActResNet,
    DenseNetwork.architecture: DenseNetwork,
}


def build_network(network_config, seed):
    """Initialize a network from a `ResNetConfig` or `DenseConfig`.

    Parameter values are a pure function of (config, seed).
    """
    if isinstance(network_config, ResNetConfig):
        return PreActResNet(network_config, seed)
    if isinstance(network_config, DenseConfig):
        return DenseNetwork(network_config, seed)
    raise ConfigurationError('unsupported network config {!r}'.format(type(network_config)))


def network_config_from_run(run_config, dropout=None, input_shape=None, num_classes=None,
                            precision=None):
    """Network config described by the `model` and `dropout` sections of a run config.

    Keyword overrides win over the run config; data-dependent extents (input shape, class
    count) are usually supplied by the caller from the loaded dataset.
    """
    model = run_config.model
    if dropout is None:
        dropout = DropoutSpec(**run_config.dropout)
    num_classes = num_classes or model['num_classes']
    precision = precision or model['precision']
    if model['architecture'] == 'resnet':
        return ResNetConfig(stage_channels=model['stage_channels'],
                            blocks_per_stage=model['blocks_per_stage'],
                            num_classes=num_classes,
                            input_shape=input_shape or model['input_shape'],
                            dropout=dropout,
                            final_fc_dropout_rate=model['final_fc_dropout_rate'],
                            precision=precision)
    if model['architecture'] == 'dense':
        if input_shape is None:
            input_dim = run_config.dataset['num_features']
        else:
            input_dim = int(np.prod(input_shape))
        return DenseConfig(input_dim=input_dim,
                           hidden_sizes=model['hidden_sizes'],
                           num_classes=num_classes,
                           dropout=dropout,
                           final_fc_dropout_rate=model['final_fc_dropout_rate'],
                           precision=precision)
    raise ConfigurationError('unknown architecture `{}`'.format(model['architecture']))


def load_network(local_dir):
    """Load a checkpoint of any architecture."""
    header, _ = BaseNetwork.read_checkpoint(local_dir)
    architecture = header.get('architecture')
    if architecture not in NETWORKS:
        raise DataFormatError('unknown architecture `{}` in checkpoint'.format(architecture))
    return NETWORKS[architecture].load(local_dir)


__all__ = [
    BaseNetwork,
    PreActResNet,
    ResNetConfig,
    DenseNetwork,
    DenseConfig,
    build_network,
    network_config_from_run,
    load_network,
]
