import os
import copy
from collections import namedtuple

import yaml

from errors import ConfigurationError


WORKSPACE = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
DIR_DATA = os.path.join(WORKSPACE, 'data')
DIR_CONFIGS = os.path.join(WORKSPACE, 'configs')
FLOAT_EPSILN = 1.e-2
TABLE_FLOAT_FORMAT = '%.10g'

PROB_FLOOR = 1.e-12
BN_EPSILON = 1.e-5
BN_MOMENTUM = 0.9
FINAL_FC_DROPOUT_RATE = 0.1
DEFAULT_NUM_BINS = 20
DEFAULT_MC_SAMPLES = 30
DEEP_ENSEMBLE_SIZE = 5

ENV_THREADS = 'CALIDROP_THREADS'

EXIT_OK = 0
EXIT_CONFIG_ERROR = 2
EXIT_DATA_ERROR = 3
EXIT_NUMERIC_FAILURE = 4

DATASET_SOURCES = ('cifar10', 'toy', 'synthetic', 'synthetic_file')

SECTIONS = ('dataset', 'model', 'dropout', 'train', 'eval', 'al', 'run')

DEFAULTS = {
    'dataset': {
        'source': 'cifar10',
        'path': os.path.join(DIR_DATA, 'cifar-10-batches-bin'),
        'train_size': 10000,
        'valid_size': 2000,
        'test_size': 2000,
        'stratified': True,
        'num_features': 2,
        'num_classes': 3,
        'num_samples': 4000,
        'ambiguous_fraction': 0.2,
        'conditional': 'logistic',
        'constant': 0.5,
    },
    'model': {
        'architecture': 'resnet',
        'stage_channels': [16, 32, 64],
        'blocks_per_stage': 2,
        'num_classes': 10,
        'input_shape': [3, 32, 32],
        'hidden_sizes': [64],
        'final_fc_dropout_rate': FINAL_FC_DROPOUT_RATE,
        'precision': 'float32',
    },
    'dropout': {
        'variant': 'element',
        'rate': 0.1,
        'block_size': 3,
    },
    'train': {
        'epochs': 60,
        'batch_size': 128,
        'lr': 0.01,
        'momentum': 0.9,
        'weight_decay': 1.e-4,
        'lr_drop_epochs': [30, 45],
        'lr_drop_factor': 10.0,
        'augmentation': True,
    },
    'eval': {
        'mc_samples': DEFAULT_MC_SAMPLES,
        'num_bins': DEFAULT_NUM_BINS,
        'bootstrap_reps': 1000,
        'curve_bootstrap_reps': 100,
        'max_ensemble_size': DEFAULT_MC_SAMPLES,
        'batch_size': 256,
        'positive_class': 0,
        'sweep_rates': [0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5],
        'sweep_variants': ['element'],
        'sweep_repeats': 1,
    },
    'al': {
        'initial_labeled': 500,
        'acquire_per_round': 250,
        'rounds': 4,
        'repeats': 3,
        'mc_samples': DEFAULT_MC_SAMPLES,
        'acquisitions': ['max_entropy', 'bald', 'variation_ratio', 'random'],
        'dropout_rate': 0.1,
    },
    'run': {
        'track': False,
    },
}

PROFILES = {
    'mini': {
        'dataset': {'train_size': 10000, 'valid_size': 2000, 'test_size': 2000},
        'train': {'epochs': 60, 'lr_drop_epochs': [30, 45]},
        'al': {'initial_labeled': 500, 'acquire_per_round': 250, 'rounds': 4, 'repeats': 3},
    },
    'full': {
        'dataset': {'train_size': 45000, 'valid_size': 5000, 'test_size': 10000},
        'train': {'epochs': 250, 'lr_drop_epochs': [125, 190]},
        'al': {'initial_labeled': 2000, 'acquire_per_round': 1000, 'rounds': 9, 'repeats': 5},
    },
}

RunConfig = namedtuple('RunConfig', ['seed', 'profile'] + list(SECTIONS))


def _coerce(section, key, default, value):
    where = '{}.{}'.format(section, key)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigurationError('{} must be true or false, got {!r}'.format(where, value))
        return value
    if isinstance(default, (int, float)):
        try:
            number = float(value)
        except (TypeError, ValueError):
            raise ConfigurationError('{} must be a number, got {!r}'.format(where, value))
        if isinstance(default, int):
            if number != int(number):
                raise ConfigurationError('{} must be an integer, got {!r}'.format(where, value))
            return int(number)
        return number
    if isinstance(default, list):
        if not isinstance(value, (list, tuple)):
            value = [value]
        if default and not isinstance(default[0], str):
            return [_coerce(section, key, default[0], v) for v in value]
        return list(value)
    if value is None:
        return None
    return str(value)


def _merge_section(target, section, values):
    if not isinstance(values, dict):
        raise ConfigurationError('section `{}` must be a mapping'.format(section))
    for key, value in values.items():
        if key not in DEFAULTS[section]:
            raise ConfigurationError('unknown key `{}` in section `{}`'.format(key, section))
        target[section][key] = _coerce(section, key, DEFAULTS[section][key], value)


def load_run_config(path=None, profile=None, seed=None):
    """Load and resolve a run config.

    Args:
        path (str, optional): YAML run config. Built-in defaults are used when omitted.
        profile (str, optional): 'mini' or 'full'; overrides the file's `profile`.
        seed (int, optional): Overrides the file's `seed`.

    Returns:
        run_config (config.RunConfig): Fully resolved config.

    """
    raw = {}
    if path is not None:
        if not os.path.exists(path):
            raise ConfigurationError('config file not found: {}'.format(path))
        with open(path, 'r') as fr:
            try:
                raw = yaml.safe_load(fr) or {}
            except yaml.YAMLError as e:
                raise ConfigurationError('config file is not valid YAML: {}'.format(e))
        if not isinstance(raw, dict):
            raise ConfigurationError('config file must hold a mapping of sections')

    unknown = set(raw) - set(SECTIONS) - {'seed', 'profile'}
    if unknown:
        raise ConfigurationError('unknown config sections: {}'.format(sorted(unknown)))

    profile = profile or raw.get('profile') or 'mini'
    if profile not in PROFILES:
        raise ConfigurationError('unknown profile `{}`'.format(profile))

    resolved = copy.deepcopy(DEFAULTS)
    for section, values in PROFILES[profile].items():
        _merge_section(resolved, section, values)
    for section in SECTIONS:
        if raw.get(section) is not None:
            _merge_section(resolved, section, raw[section])

    if seed is None:
        seed = raw.get('seed', 0)
    try:
        seed = int(seed)
    except (TypeError, ValueError):
        raise ConfigurationError('seed must be an integer, got {!r}'.format(seed))
    if seed < 0:
        raise ConfigurationError('seed must be non-negative')

    return RunConfig(seed=seed, profile=profile, **resolved)


def run_config_to_dict(run_config):
    return {key: copy.deepcopy(value) for key, value in run_config._asdict().items()}


def dump_run_config(run_config):
    return yaml.safe_dump(run_config_to_dict(run_config), default_flow_style=False,
                          sort_keys=True)


def worker_count():
    value = os.environ.get(ENV_THREADS)
    if value is None or value == '':
        return 1
    try:
        count = int(value)
    except ValueError:
        raise ConfigurationError('{} must be an integer, got {!r}'.format(ENV_THREADS, value))
    return max(1, count)
