"""Monte-Carlo dropout ensembles, deep ensembles and their interchange file."""
import logging
import os
from collections import namedtuple

import numpy as np
import pandas as pd
from tqdm import tqdm

import config
from errors import ConfigurationError, DataFormatError
from process import atomic_write, save_table

logging.basicConfig(format='%(asctime)s [%(levelname)s] %(name)s: %(message)s',
                    datefmt='%Y-%m-%d %H:%M:%S',
                    level=logging.WARNING)
logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

SIMPLEX_TOLERANCE = 1e-6
DEEP_ENSEMBLE = 'deep_ensemble'

ENSEMBLE_MAGIC = b'CDENSEMB'
ENSEMBLE_VERSION = 1
_ENSEMBLE_HEADER = np.dtype([('magic', 'S8'), ('version', '<u4'), ('num_members', '<u8'),
                             ('num_samples', '<u8'), ('num_classes', '<u8'),
                             ('source', 'S32')])


def _check_simplex(probs, what):
    sums = probs.sum(axis=-1)
    if probs.size and (np.any(probs < -SIMPLEX_TOLERANCE)
                       or np.max(np.abs(sums - 1.)) > SIMPLEX_TOLERANCE):
        raise DataFormatError('{} rows must be probability vectors summing to 1'.format(what))


class PredictionSet(namedtuple('PredictionSet', ['probs', 'labels'])):
    """N x K predictive probabilities with the true labels."""

    __slots__ = ()

    def __new__(cls, probs, labels):
        probs = np.asarray(probs, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if probs.ndim != 2 or labels.shape != (probs.shape[0],):
            raise DataFormatError('expected (N, K) probs and (N,) labels, got {} and {}'
                                  .format(probs.shape, labels.shape))
        _check_simplex(probs, 'prediction')
        return super(PredictionSet, cls).__new__(cls, probs, labels)

    @property
    def num_samples(self):
        return self.probs.shape[0]

    def take(self, index):
        return PredictionSet(self.probs[index], self.labels[index])


class EnsemblePredictions(namedtuple('EnsemblePredictions', ['probs', 'labels', 'member_ids',
                                                             'source'])):
    """T x N x K member probabilities.

    `member_ids` are MC sample indices or model ids; `source` is `mc_<variant>` or
    'deep_ensemble'.
    """

    __slots__ = ()

    def __new__(cls, probs, labels, member_ids, source):
        probs = np.asarray(probs, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        member_ids = np.asarray(member_ids, dtype=np.int64)
        if probs.ndim != 3 or probs.shape[0] < 1:
            raise DataFormatError('ensemble probs must be (T, N, K) with T >= 1, got {}'
                                  .format(probs.shape))
        if labels.shape != (probs.shape[1],) or member_ids.shape != (probs.shape[0],):
            raise DataFormatError('labels/member_ids do not match probs of shape {}'
                                  .format(probs.shape))
        _check_simplex(probs, 'member')
        return super(EnsemblePredictions, cls).__new__(cls, probs, labels, member_ids, str(source))

    @property
    def num_members(self):
        return self.probs.shape[0]

    @property
    def num_samples(self):
        return self.probs.shape[1]

    @property
    def num_classes(self):
        return self.probs.shape[2]

    def member(self, t):
        return PredictionSet(self.probs[t], self.labels)

    def take(self, index):
        return self._replace(probs=self.probs[:, index], labels=self.labels[index])


def mc_source(dropout_spec):
    return 'mc_{}'.format(dropout_spec.variant)


def mc_predict(net, data, num_samples=config.DEFAULT_MC_SAMPLES, master_seed=None,
               batch_size=256):
    """Monte-Carlo dropout prediction.

    Member t is `net` run in mc_sample mode with sample_index t, so any member can be
    recomputed on its own.

    Args:
        net (models.BaseNetwork): Trained network.
        data (tuple): (inputs, labels).
        num_samples (int): Number T of stochastic passes.
        master_seed (int, optional): Defaults to the network seed.
        batch_size (int): Inference batch size.

    Returns:
        ensemble (ensemble.EnsemblePredictions)

    """
    if num_samples < 1:
        raise ConfigurationError('MC sampling needs T >= 1, got {}'.format(num_samples))
    spec = net.config.dropout
    if not spec.is_active and net.config.final_fc_dropout_rate == 0.:
        logger.warning('network has no active dropout site; all {} members are identical'
                       .format(num_samples))
    inputs, labels = data
    probs = np.empty((num_samples, inputs.shape[0], net.num_classes))
    for t in tqdm(range(num_samples), desc='mc samples', leave=False):
        probs[t] = net.predict_proba(inputs, mode='mc_sample', sample_index=t,
                                     master_seed=master_seed, batch_size=batch_size)
    return EnsemblePredictions(probs, labels, np.arange(num_samples), mc_source(spec))


def deep_ensemble_predict(nets, data, batch_size=256, member_ids=None):
    """Stack the deterministic predictions of independently trained networks."""
    if not nets:
        raise ConfigurationError('deep ensemble needs at least one network')
    if len(nets) < 2:
        logger.warning('deep ensemble with a single member has no diversity')
    inputs, labels = data
    probs = np.stack([net.predict_proba(inputs, mode='deterministic', batch_size=batch_size)
                      for net in tqdm(nets, desc='ensemble members', leave=False)])
    if member_ids is None:
        member_ids = np.arange(len(nets))
    return EnsemblePredictions(probs, labels, member_ids, DEEP_ENSEMBLE)


def ensemble_average(ens, num_members=None):
    """Average the first `num_members` members (all of them by default)."""
    if num_members is None:
        num_members = ens.num_members
    if not 1 <= num_members <= ens.num_members:
        raise ConfigurationError('prefix size must lie in [1, {}], got {}'
                                 .format(ens.num_members, num_members))
    return PredictionSet(ens.probs[:num_members].mean(axis=0), ens.labels)


def save_ensemble(path, ens):
    """Write the interchange file: header, then little-endian probs, labels and member ids."""
    source = ens.source.encode('ascii')
    if len(source) > _ENSEMBLE_HEADER['source'].itemsize:
        raise ConfigurationError('source tag `{}` is too long'.format(ens.source))
    header = np.array([(ENSEMBLE_MAGIC, ENSEMBLE_VERSION, ens.num_members, ens.num_samples,
                        ens.num_classes, source)], dtype=_ENSEMBLE_HEADER)

    def write(fw):
        fw.write(header.tobytes())
        fw.write(ens.probs.astype('<f8').tobytes())
        fw.write(ens.labels.astype('<i8').tobytes())
        fw.write(ens.member_ids.astype('<i8').tobytes())

    atomic_write(path, write, mode='wb')
    return path


def load_ensemble(path):
    if not os.path.exists(path):
        raise DataFormatError('ensemble file not found: {}'.format(path))
    with open(path, 'rb') as fr:
        raw = fr.read()
    size = _ENSEMBLE_HEADER.itemsize
    if len(raw) < size:
        raise DataFormatError('{}: file shorter than its header'.format(path))
    header = np.frombuffer(raw[:size], dtype=_ENSEMBLE_HEADER)[0]
    if header['magic'] != ENSEMBLE_MAGIC:
        raise DataFormatError('{}: not an ensemble file'.format(path))
    if header['version'] != ENSEMBLE_VERSION:
        raise DataFormatError('{}: unsupported ensemble file version {}'
                              .format(path, header['version']))
    members = int(header['num_members'])
    samples = int(header['num_samples'])
    classes = int(header['num_classes'])
    expected = size + 8 * (members * samples * classes + samples + members)
    if len(raw) != expected:
        raise DataFormatError('{}: expected {} bytes, found {}'.format(path, expected, len(raw)))

    payload = np.frombuffer(raw, dtype=np.uint8, offset=size)
    probs_end = 8 * members * samples * classes
    labels_end = probs_end + 8 * samples
    probs = payload[:probs_end].view('<f8').reshape(members, samples, classes)
    labels = payload[probs_end:labels_end].view('<i8')
    member_ids = payload[labels_end:].view('<i8')
    return EnsemblePredictions(probs.astype(np.float64), labels.astype(np.int64),
                               member_ids.astype(np.int64), header['source'].decode('ascii'))


def ensemble_to_frame(ens):
    """Long format: one row per (member, sample) with columns member, sample, label, p_0.."""
    members, samples, classes = ens.probs.shape
    df = pd.DataFrame(ens.probs.reshape(members * samples, classes),
                      columns=['p_{}'.format(c) for c in range(classes)])
    df.insert(0, 'label', np.tile(ens.labels, members))
    df.insert(0, 'sample', np.tile(np.arange(samples), members))
    df.insert(0, 'member', np.repeat(ens.member_ids, samples))
    return df


def export_ensemble_csv(ens, path):
    return save_table(ensemble_to_frame(ens), path)
