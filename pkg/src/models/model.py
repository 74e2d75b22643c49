import hashlib
import json
import logging
import math
import os
from abc import ABC, abstractmethod

import numpy as np
from tqdm import tqdm

from dropout import MODES, MaskSampler, apply_mask, mask_factor
from errors import ConfigurationError, DataFormatError, UsageError
from layers.functional import softmax

logging.basicConfig(format='%(asctime)s [%(levelname)s] %(name)s: %(message)s',
                    datefmt='%Y-%m-%d %H:%M:%S',
                    level=logging.WARNING)
logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

CHECKPOINT_NAME = 'checkpoint.npz'
CHECKPOINT_FORMAT_VERSION = 1
PRECISIONS = ('float32', 'float64')


def config_hash(config_dict):
    text = json.dumps(config_dict, sort_keys=True)
    return hashlib.sha256(text.encode('utf8')).hexdigest()


def dropout_site(inputs, mask):
    """Apply a mask if there is one; returns (outputs, factor kept for backward)."""
    if mask is None:
        return inputs, None
    return apply_mask(inputs, mask), mask_factor(mask, inputs.dtype)


def dropout_site_backward(grad, factor):
    return grad if factor is None else grad * factor


class BaseNetwork(ABC):
    """Shared contract of the hand-differentiated networks.

    Subclasses build their parameters in `__init__`, and implement `_forward`/`_backward`
    against a `dropout.MaskSampler`. This class owns mode handling, batched prediction
    and the checkpoint container.

    Args:
        config (namedtuple): Architecture config with at least `num_classes`, `dropout`,
            `final_fc_dropout_rate` and `precision`.
        seed (int): Seed of the parameter initialization, also the default master seed
            of MC sampling.

    """

    architecture = None

    def __init__(self, config, seed):
        if config.num_classes < 2:
            raise ConfigurationError('num_classes must be >= 2, got {}'.format(config.num_classes))
        if config.precision not in PRECISIONS:
            raise ConfigurationError('precision must be one of {}'.format(PRECISIONS))
        self.config = config
        self.seed = int(seed)
        self.batchnorm_frozen = False
        self._train_calls = 0
        self._tape = None

    @property
    def num_classes(self):
        return self.config.num_classes

    @property
    def dtype(self):
        return np.dtype(self.config.precision)

    @abstractmethod
    def parameters(self):
        """Trainable parameters in a fixed order."""

    def buffers(self):
        """Non-trainable arrays kept in checkpoints, keyed by name."""
        return {}

    @abstractmethod
    def config_dict(self):
        """JSON-serializable architecture config."""

    @classmethod
    @abstractmethod
    def from_config_dict(cls, config_dict, seed):
        """Rebuild a freshly initialized network from `config_dict`."""

    @abstractmethod
    def _forward(self, inputs, sampler, bn_mode):
        """Returns (logits, tape)."""

    @abstractmethod
    def _backward(self, grad_logits, tape):
        """Accumulate gradients into every parameter touched by the tape."""

    def config_hash(self):
        return config_hash(self.config_dict())

    def parameter_count(self):
        return int(sum(param.value.size for param in self.parameters()))

    def zero_grad(self):
        for param in self.parameters():
            param.zero_grad()

    def freeze_batchnorm(self, frozen=True):
        """Make train mode normalize with running statistics."""
        self.batchnorm_frozen = frozen

    def _mask_sampler(self, mode, sample_index, master_seed, mask_seed, batch_offset):
        if mode not in MODES:
            raise ConfigurationError('unknown forward mode `{}`, expected one of {}'
                                     .format(mode, MODES))
        if master_seed is None:
            master_seed = self.seed
        pass_id = 0
        if mode == 'mc_sample':
            if sample_index is None:
                raise UsageError('mc_sample mode needs a sample_index')
            pass_id = int(sample_index)
        elif mode == 'train':
            if mask_seed is None:
                mask_seed = 'call{}'.format(self._train_calls)
                self._train_calls += 1
            pass_id = mask_seed
        return MaskSampler(self.config.dropout, self.config.final_fc_dropout_rate, mode,
                           master_seed, pass_id, batch_offset)

    def forward(self, inputs, mode='deterministic', sample_index=None, master_seed=None,
                mask_seed=None, batch_offset=0, record=None):
        """Compute logits of a batch.

        Args:
            inputs (numpy.ndarray): Batch, first axis is the sample axis.
            mode (str): 'train' samples fresh masks and uses batch statistics;
                'mc_sample' derives masks from (master_seed, sample_index) and uses running
                statistics; 'deterministic' disables every dropout site.
            sample_index (int, optional): MC sample index, required in 'mc_sample' mode.
            master_seed (int, optional): Defaults to the initialization seed.
            mask_seed (int or str, optional): Pins train-mode masks; a per-call counter
                otherwise.
            batch_offset (int): Index of the first sample of the batch in its dataset, so
                that per-sample masks do not repeat across batches.
            record (bool, optional): Keep the tape for `backward`. Defaults to train mode.

        Returns:
            logits (numpy.ndarray): Shape (N, K).

        """
        sampler = self._mask_sampler(mode, sample_index, master_seed, mask_seed, batch_offset)
        bn_mode = 'train' if mode == 'train' and not self.batchnorm_frozen else 'eval'
        inputs = np.asarray(inputs, dtype=self.dtype)
        logits, tape = self._forward(inputs, sampler, bn_mode)
        if record is None:
            record = mode == 'train'
        self._tape = tape if record else None
        return logits

    def backward(self, grad_logits):
        """Back-propagate dL/dlogits of the last recorded forward pass into `param.grad`."""
        if self._tape is None:
            raise UsageError('backward called without a recorded forward pass')
        self.zero_grad()
        self._backward(np.asarray(grad_logits, dtype=self.dtype), self._tape)

    def predict_proba(self, inputs, mode='deterministic', sample_index=None, master_seed=None,
                      batch_size=256):
        """Softmax probabilities of a whole dataset, computed batch by batch."""
        num_samples = inputs.shape[0]
        probs = np.empty((num_samples, self.num_classes), dtype=np.float64)
        for i in range(math.ceil(num_samples / batch_size)):
            start, end = i * batch_size, min((i + 1) * batch_size, num_samples)
            logits = self.forward(inputs[start:end], mode=mode, sample_index=sample_index,
                                  master_seed=master_seed, batch_offset=start, record=False)
            probs[start:end] = softmax(logits.astype(np.float64))
        return probs

    def state_arrays(self):
        arrays = {}
        for param in self.parameters():
            arrays['param/{}'.format(param.name)] = param.value
            arrays['velocity/{}'.format(param.name)] = param.velocity
        for name, value in self.buffers().items():
            arrays['buffer/{}'.format(name)] = value
        return arrays

    def snapshot(self):
        return {key: value.copy() for key, value in self.state_arrays().items()}

    def restore(self, arrays):
        """Write saved arrays back into the network, shape-checked."""
        params = {param.name: param for param in self.parameters()}
        buffers = self.buffers()
        expected = set(self.state_arrays())
        if set(arrays) != expected:
            missing = sorted(expected - set(arrays))
            raise DataFormatError('checkpoint arrays do not match the network, missing {}'
                                  .format(missing[:5]))
        for key, value in arrays.items():
            kind, name = key.split('/', 1)
            if kind == 'param':
                params[name].assign(value)
            elif kind == 'velocity':
                params[name].velocity[...] = value
            else:
                if buffers[name].shape != value.shape:
                    raise DataFormatError('buffer `{}` has shape {}, expected {}'
                                          .format(name, value.shape, buffers[name].shape))
                buffers[name][...] = value

    def save(self, local_dir):
        """Save a checkpoint.

        The container is an npz archive of little-endian arrays plus a JSON `header` that
        records the format version, architecture, config, config hash and seed.

        Args:
            local_dir (str): Directory of saving.

        Returns:
            path (str): Path of the checkpoint file.

        """
        os.makedirs(local_dir, exist_ok=True)
        header = {
            'format_version': CHECKPOINT_FORMAT_VERSION,
            'architecture': self.architecture,
            'config': self.config_dict(),
            'config_hash': self.config_hash(),
            'seed': self.seed,
        }
        arrays = {key: value.astype(value.dtype.newbyteorder('<'), copy=False)
                  for key, value in self.state_arrays().items()}
        arrays['header'] = np.frombuffer(json.dumps(header, sort_keys=True).encode('utf8'),
                                         dtype=np.uint8)
        path = os.path.join(local_dir, CHECKPOINT_NAME)
        temp_path = path + '.tmp.npz'
        np.savez(temp_path, **arrays)
        os.replace(temp_path, path)
        return path

    @staticmethod
    def read_checkpoint(local_dir):
        """Returns (header, arrays) of the checkpoint in `local_dir`."""
        path = os.path.join(local_dir, CHECKPOINT_NAME)
        if not os.path.exists(path):
            raise DataFormatError('checkpoint not found: {}'.format(path))
        try:
            with np.load(path, allow_pickle=False) as archive:
                header = json.loads(archive['header'].tobytes().decode('utf8'))
                arrays = {key: archive[key] for key in archive.files if key != 'header'}
        except (ValueError, KeyError, OSError) as e:
            raise DataFormatError('unreadable checkpoint {}: {}'.format(path, e))
        if header.get('format_version') != CHECKPOINT_FORMAT_VERSION:
            raise DataFormatError('unsupported checkpoint version {}'
                                  .format(header.get('format_version')))
        return header, arrays

    @classmethod
    def load(cls, local_dir):
        """Load a checkpoint written by `save`.

        Args:
            local_dir (str): Directory of loading.

        """
        header, arrays = cls.read_checkpoint(local_dir)
        if header['architecture'] != cls.architecture:
            raise DataFormatError('checkpoint holds a `{}` network, not `{}`'
                                  .format(header['architecture'], cls.architecture))
        network = cls.from_config_dict(header['config'], header['seed'])
        if network.config_hash() != header['config_hash']:
            raise DataFormatError('checkpoint config hash does not match its config')
        network.restore(arrays)
        logger.info('loaded {} network ({} parameters) from {}'
                    .format(cls.architecture, network.parameter_count(), local_dir))
        return network


def iterate_batches(num_samples, batch_size, desc=None):
    """Yield (start, end) pairs covering range(num_samples), with a tqdm bar when `desc`."""
    bounds = [(start, min(start + batch_size, num_samples))
              for start in range(0, num_samples, batch_size)]
    if desc is None:
        return iter(bounds)
    return iter(tqdm(bounds, desc=desc, leave=False))
