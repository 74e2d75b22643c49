"""Bernoulli masks at element, block, channel and layer scale.

Every mask is drawn from an `RngStream`, a (master_seed, stream_id) pair mapped onto a
counter-based Philox generator, so any single mask can be reproduced without replaying
the draws that came before it.
"""
import hashlib
from collections import namedtuple

import numpy as np
from scipy.ndimage import maximum_filter

from errors import ConfigurationError

VARIANTS = ('none', 'element', 'block', 'channel', 'layer')
MODES = ('train', 'mc_sample', 'deterministic')


def derive_stream_id(*parts):
    """Hash an ordered tuple of labels into a 64-bit stream id."""
    text = ':'.join(str(part) for part in parts)
    digest = hashlib.sha256(text.encode('utf8')).digest()
    return int.from_bytes(digest[:8], 'little')


class RngStream(namedtuple('RngStream', ['master_seed', 'stream_id'])):
    __slots__ = ()

    @classmethod
    def named(cls, master_seed, *parts):
        return cls(int(master_seed), derive_stream_id(*parts))

    def generator(self):
        sequence = np.random.SeedSequence(entropy=int(self.master_seed),
                                          spawn_key=(int(self.stream_id),))
        return np.random.Generator(np.random.Philox(sequence))


def as_generator(rng):
    if isinstance(rng, RngStream):
        return rng.generator()
    return rng


class DropoutSpec(namedtuple('DropoutSpec', ['variant', 'rate', 'block_size'])):
    """Dropout variant tag, rate p and the block size of the block variant."""

    __slots__ = ()

    def __new__(cls, variant='none', rate=0.0, block_size=3):
        if variant not in VARIANTS:
            raise ConfigurationError('unknown dropout variant `{}`, expected one of {}'
                                     .format(variant, VARIANTS))
        rate = float(rate)
        _check_rate(rate)
        block_size = int(block_size)
        if variant == 'block' and (block_size < 1 or block_size % 2 == 0):
            raise ConfigurationError('block_size must be a positive odd integer, got {}'
                                     .format(block_size))
        return super(DropoutSpec, cls).__new__(cls, variant, rate, block_size)

    @property
    def is_active(self):
        return self.variant != 'none' and self.rate > 0.0

    def to_dict(self):
        return {'variant': self.variant, 'rate': self.rate, 'block_size': self.block_size}


Mask = namedtuple('Mask', ['keep', 'scale'])


def _check_rate(p):
    if not 0.0 <= p < 1.0:
        raise ConfigurationError('dropout rate must lie in [0, 1), got {}'.format(p))


def _scale(p):
    return 1.0 / (1.0 - p)


def sample_element_mask(shape, p, rng):
    _check_rate(p)
    generator = as_generator(rng)
    keep = (generator.random(tuple(shape)) >= p).astype(np.uint8)
    return Mask(keep=keep, scale=_scale(p))


def sample_channel_mask(num_channels, p, rng, batch_size=None):
    """One Bernoulli draw per channel, broadcast over the spatial extent.

    Returns a mask of shape (C, 1, 1), or (N, C, 1, 1) when `batch_size` is given so
    that every sample of a batch gets its own channel draw.
    """
    if num_channels < 1:
        raise ConfigurationError('num_channels must be >= 1')
    _check_rate(p)
    shape = (num_channels, 1, 1) if batch_size is None else (batch_size, num_channels, 1, 1)
    generator = as_generator(rng)
    keep = (generator.random(shape) >= p).astype(np.uint8)
    return Mask(keep=keep, scale=_scale(p))


def block_gamma(p, block_size, height, width):
    """Seed rate that makes block_size x block_size patches drop a fraction p of a map."""
    valid = (height - block_size + 1) * (width - block_size + 1)
    return p / block_size ** 2 * (height * width) / valid


def sample_block_mask(feature_shape, p, block_size, rng):
    """Zero block_size x block_size patches around Bernoulli(gamma) seeds.

    Seeds may fall anywhere on the map; patches are clipped at the borders.
    `feature_shape` is (H, W) or any shape whose last two extents are H, W.
    """
    _check_rate(p)
    feature_shape = tuple(feature_shape)
    if len(feature_shape) < 2:
        raise ConfigurationError('block masks need at least two spatial dims')
    if block_size < 1 or block_size % 2 == 0:
        raise ConfigurationError('block_size must be a positive odd integer, got {}'
                                 .format(block_size))
    height, width = feature_shape[-2:]
    if block_size > min(height, width):
        raise ConfigurationError('block_size {} exceeds feature map {}x{}'
                                 .format(block_size, height, width))
    if p == 0.0:
        return Mask(keep=np.ones(feature_shape, dtype=np.uint8), scale=1.0)

    gamma = block_gamma(p, block_size, height, width)
    generator = as_generator(rng)
    seeds = (generator.random(feature_shape) < gamma).astype(np.uint8)
    footprint = (1,) * (len(feature_shape) - 2) + (block_size, block_size)
    dropped = maximum_filter(seeds, size=footprint, mode='constant', cval=0)
    return Mask(keep=(1 - dropped).astype(np.uint8), scale=_scale(p))


def fitted_block_size(block_size, feature_shape):
    """Largest odd size not above `block_size` that fits the feature map."""
    limit = min(feature_shape[-2:])
    if block_size <= limit:
        return block_size
    return limit if limit % 2 == 1 else limit - 1


def sample_layer_gates(num_blocks, p, is_downsampling, mode, rng):
    """Keep gates for residual blocks; mc_test mode never drops a downsampling block."""
    if num_blocks < 1:
        raise ConfigurationError('num_blocks must be >= 1')
    if mode not in ('train', 'mc_test'):
        raise ConfigurationError('layer gate mode must be `train` or `mc_test`, got `{}`'
                                 .format(mode))
    _check_rate(p)
    flags = np.asarray(is_downsampling, dtype=bool)
    if flags.shape != (num_blocks,):
        raise ConfigurationError('expected {} downsampling flags, got {}'
                                 .format(num_blocks, flags.shape))
    generator = as_generator(rng)
    gates = (generator.random(num_blocks) >= p).astype(np.float64)
    if mode == 'mc_test':
        gates[flags] = 1.0
    return gates


def mask_factor(mask, dtype):
    return mask.keep.astype(dtype) * np.dtype(dtype).type(mask.scale)


def apply_mask(tensor, mask):
    """Inverted dropout: tensor * keep / (1 - p)."""
    try:
        shape = np.broadcast_shapes(mask.keep.shape, tensor.shape)
    except ValueError:
        shape = None
    if shape != tensor.shape:
        raise ConfigurationError('mask of shape {} does not broadcast to tensor of shape {}'
                                 .format(mask.keep.shape, tensor.shape))
    return tensor * mask_factor(mask, tensor.dtype)


class MaskSampler:
    """Hands out the masks of one forward pass.

    Streams are keyed by (master_seed, mode, pass_id, batch_offset, site), where pass_id
    is the MC sample index in mc_sample mode and the mask seed in train mode. Layer gates
    leave the batch offset out: MC sample t is one sub-network over the whole dataset.
    """

    def __init__(self, spec, head_rate, mode, master_seed, pass_id=0, batch_offset=0):
        if mode not in MODES:
            raise ConfigurationError('unknown forward mode `{}`'.format(mode))
        self.spec = spec
        self.head_rate = float(head_rate)
        self.mode = mode
        self.master_seed = int(master_seed)
        self.pass_id = pass_id
        self.batch_offset = int(batch_offset)

    @property
    def enabled(self):
        return self.mode != 'deterministic'

    def _stream(self, *parts):
        return RngStream.named(self.master_seed, self.mode, self.pass_id, *parts)

    def site_mask(self, site, shape):
        """Mask for the dropout site in front of a body layer, or None."""
        spec = self.spec
        if not self.enabled or not spec.is_active or spec.variant == 'layer':
            return None
        rng = self._stream(self.batch_offset, site)
        if len(shape) == 4 and spec.variant == 'block':
            block_size = fitted_block_size(spec.block_size, shape)
            return sample_block_mask(shape, spec.rate, block_size, rng)
        if len(shape) == 4 and spec.variant == 'channel':
            return sample_channel_mask(shape[1], spec.rate, rng, batch_size=shape[0])
        return sample_element_mask(shape, spec.rate, rng)

    def head_mask(self, shape):
        if not self.enabled or self.head_rate == 0.0:
            return None
        return sample_element_mask(shape, self.head_rate, self._stream(self.batch_offset, 'head'))

    def layer_gates(self, is_downsampling):
        num_blocks = len(is_downsampling)
        spec = self.spec
        if not self.enabled or spec.variant != 'layer' or spec.rate == 0.0:
            return np.ones(num_blocks)
        gate_mode = 'train' if self.mode == 'train' else 'mc_test'
        return sample_layer_gates(num_blocks, spec.rate, is_downsampling, gate_mode,
                                  self._stream('layer_gates'))
