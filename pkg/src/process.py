import logging
import os
from collections import namedtuple

import numpy as np
import pandas as pd
import yaml
from scipy.special import expit
from sklearn.model_selection import train_test_split

import config
from errors import ConfigurationError, DataFormatError

logging.basicConfig(format='%(asctime)s [%(levelname)s] %(name)s: %(message)s',
                    datefmt='%Y-%m-%d %H:%M:%S',
                    level=logging.WARNING)
logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

CIFAR10_RECORD_BYTES = 3073
CIFAR10_IMAGE_SHAPE = (3, 32, 32)
CIFAR10_NUM_CLASSES = 10
CIFAR10_TRAIN_FILES = ['data_batch_{}.bin'.format(i) for i in range(1, 6)]
CIFAR10_TEST_FILE = 'test_batch.bin'

SYNTHETIC_MAGIC = b'CDSYNBIN'
SYNTHETIC_VERSION = 1
_SYNTHETIC_HEADER = np.dtype([('magic', 'S8'), ('version', '<u4'), ('num_samples', '<u8'),
                              ('num_features', '<u8'), ('num_classes', '<u8')])


class ImageDataset(namedtuple('ImageDataset', ['images', 'labels', 'splits', 'mean_image'])):
    """Samples, labels and named index splits (train, val, test, pool).

    `images` is (N, C, H, W) for image data and (N, D) for feature data. `mean_image` is
    whatever per-pixel mean has been subtracted so far, or None.
    """

    __slots__ = ()

    @property
    def num_samples(self):
        return self.labels.shape[0]

    @property
    def num_classes(self):
        return int(self.labels.max()) + 1 if self.labels.size else 0

    def indices(self, tag):
        return self.splits.get(tag, np.zeros(0, dtype=np.int64))

    def arrays(self, tag):
        """Returns (images, labels) of one split."""
        index = self.indices(tag)
        return self.images[index], self.labels[index]

    def with_splits(self, splits):
        return self._replace(splits={tag: np.sort(np.asarray(index, dtype=np.int64))
                                     for tag, index in splits.items()})


_SyntheticBinarySpec = namedtuple('SyntheticBinarySpec', ['num_features', 'conditional',
                                                          'num_samples', 'seed', 'constant'])


class SyntheticBinarySpec(_SyntheticBinarySpec):
    """Binary task with an exactly known p(y=1|x).

    `conditional` is 'logistic' (expit of a random linear score of standard-normal
    features) or 'constant' (p(y=1|x) = `constant` everywhere).
    """

    __slots__ = ()

    def __new__(cls, num_features=2, conditional='logistic', num_samples=1000, seed=0,
                constant=0.5):
        if conditional not in ('logistic', 'constant'):
            raise ConfigurationError('unknown conditional family `{}`'.format(conditional))
        if num_features < 1 or num_samples < 0:
            raise ConfigurationError('num_features must be >= 1 and num_samples >= 0')
        if not 0. <= constant <= 1.:
            raise ConfigurationError('constant conditional must lie in [0, 1]')
        return super(SyntheticBinarySpec, cls).__new__(cls, int(num_features), conditional,
                                                       int(num_samples), int(seed),
                                                       float(constant))


def _read_cifar10_file(path):
    raw = np.fromfile(path, dtype=np.uint8)
    full_records = raw.size // CIFAR10_RECORD_BYTES
    if raw.size % CIFAR10_RECORD_BYTES:
        raise DataFormatError('{}: truncated record at byte offset {} ({} trailing bytes)'
                              .format(path, full_records * CIFAR10_RECORD_BYTES,
                                      raw.size % CIFAR10_RECORD_BYTES))
    records = raw.reshape(full_records, CIFAR10_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.size and labels.max() >= CIFAR10_NUM_CLASSES:
        raise DataFormatError('{}: label {} out of range'.format(path, labels.max()))
    images = records[:, 1:].reshape((full_records,) + CIFAR10_IMAGE_SHAPE)
    return images.astype(np.float32) / np.float32(255.), labels


def load_cifar10_binary(path):
    """Load CIFAR-10 binary batches.

    Every record is 1 label byte followed by 3072 pixel bytes (R, G, B planes of a
    row-major 32x32 image). Pixels are scaled to [0, 1].

    Args:
        path (str): A directory holding `data_batch_{1..5}.bin` and/or `test_batch.bin`,
            or a single batch file, whose records are all tagged 'train'.

    Returns:
        dataset (process.ImageDataset): Splits 'train' and 'test'.

    """
    if os.path.isfile(path):
        groups = {'train': [path]}
    elif os.path.isdir(path):
        groups = {'train': [os.path.join(path, name) for name in CIFAR10_TRAIN_FILES
                            if os.path.exists(os.path.join(path, name))],
                  'test': [os.path.join(path, CIFAR10_TEST_FILE)]
                  if os.path.exists(os.path.join(path, CIFAR10_TEST_FILE)) else []}
        if not groups['train'] and not groups['test']:
            raise DataFormatError('no CIFAR-10 batch files in {}'.format(path))
    else:
        raise DataFormatError('dataset path not found: {}'.format(path))

    images, labels, splits = [], [], {}
    offset = 0
    for tag in ('train', 'test'):
        tag_size = 0
        for file_path in groups.get(tag, []):
            file_images, file_labels = _read_cifar10_file(file_path)
            images.append(file_images)
            labels.append(file_labels)
            tag_size += file_labels.size
        splits[tag] = np.arange(offset, offset + tag_size)
        offset += tag_size

    if images:
        images = np.concatenate(images)
        labels = np.concatenate(labels)
    else:
        images = np.zeros((0,) + CIFAR10_IMAGE_SHAPE, dtype=np.float32)
        labels = np.zeros(0, dtype=np.int64)
    logger.info('loaded {} CIFAR-10 records from {}'.format(labels.size, path))
    return ImageDataset(images=images, labels=labels, splits=splits, mean_image=None)


def per_pixel_mean_subtract(dataset, tag='train'):
    """Subtract the per-pixel mean of one split from every split.

    The subtracted mean is added onto `mean_image`, so `images + mean_image` always gives
    back the raw pixels.
    """
    index = dataset.indices(tag)
    if index.size == 0:
        raise ConfigurationError('per-pixel mean needs a non-empty `{}` split'.format(tag))
    mean = dataset.images[index].mean(axis=0, dtype=np.float64).astype(dataset.images.dtype)
    previous = dataset.mean_image if dataset.mean_image is not None else np.zeros_like(mean)
    return dataset._replace(images=dataset.images - mean, mean_image=previous + mean)


def split_indices(labels, sizes, seed, stratified=False):
    """Partition a shuffled index range into consecutive parts of the given sizes.

    Args:
        labels (numpy.ndarray): Labels of the samples to split.
        sizes (list of int): Size of each part; must sum to at most len(labels).
        seed (int): Shuffle seed.
        stratified (bool): Keep the class balance of every part.

    Returns:
        parts (list of numpy.ndarray): Sorted index arrays, one per size.

    """
    labels = np.asarray(labels)
    sizes = [int(size) for size in sizes]
    if min(sizes, default=0) < 0 or sum(sizes) > labels.size:
        raise ConfigurationError('split sizes {} do not fit {} samples'.format(sizes, labels.size))

    parts = []
    if not stratified:
        order = np.random.default_rng(seed).permutation(labels.size)
        start = 0
        for size in sizes:
            parts.append(np.sort(order[start:start + size]))
            start += size
        return parts

    remaining = np.arange(labels.size)
    for size in sizes:
        if size == 0:
            parts.append(np.zeros(0, dtype=np.int64))
            continue
        if size == remaining.size:
            parts.append(np.sort(remaining))
            remaining = remaining[:0]
            continue
        try:
            taken, remaining = train_test_split(remaining, train_size=size,
                                                stratify=labels[remaining], random_state=seed)
        except ValueError as e:
            raise ConfigurationError('stratified split failed: {}'.format(e))
        parts.append(np.sort(taken))
    return parts


def split(dataset, sizes, seed, stratified=False, tags=('train', 'val', 'test'), source=None):
    """Retag the samples of `source` split (all samples when None) into `tags`."""
    if len(sizes) != len(tags):
        raise ConfigurationError('got {} sizes for {} tags'.format(len(sizes), len(tags)))
    base = np.arange(dataset.num_samples) if source is None else dataset.indices(source)
    parts = split_indices(dataset.labels[base], sizes, seed, stratified)
    splits = {tag: base[part] for tag, part in zip(tags, parts)}
    return dataset.with_splits(splits)


def subsample(dataset, num_samples, seed, stratified=False):
    """Keep `num_samples` samples; splits are restricted and re-indexed accordingly."""
    keep = split_indices(dataset.labels, [num_samples], seed, stratified)[0]
    return subsample_indices(dataset, keep)


def prepare_cifar10(path, train_size, valid_size, test_size, seed, stratified=True):
    """Desk-scale CIFAR-10: train/val drawn from the training batches, test from the test batch."""
    dataset = load_cifar10_binary(path)
    train_pool = dataset.indices('train')
    test_pool = dataset.indices('test')
    if train_size + valid_size > train_pool.size or test_size > test_pool.size:
        raise ConfigurationError('requested {}/{}/{} samples, have {} train and {} test'
                                 .format(train_size, valid_size, test_size,
                                         train_pool.size, test_pool.size))
    train_part, valid_part = split_indices(dataset.labels[train_pool], [train_size, valid_size],
                                           seed, stratified)
    test_part, = split_indices(dataset.labels[test_pool], [test_size], seed, stratified)
    dataset = dataset.with_splits({'train': train_pool[train_part],
                                   'val': train_pool[valid_part],
                                   'test': test_pool[test_part]})
    keep = np.concatenate([dataset.indices(tag) for tag in ('train', 'val', 'test')])
    dataset = subsample_indices(dataset, keep)
    return per_pixel_mean_subtract(dataset)


def subsample_indices(dataset, keep):
    keep = np.sort(keep)
    position = np.full(dataset.num_samples, -1, dtype=np.int64)
    position[keep] = np.arange(keep.size)
    splits = {tag: position[index][position[index] >= 0] for tag, index in dataset.splits.items()}
    return ImageDataset(images=dataset.images[keep], labels=dataset.labels[keep],
                        splits=splits, mean_image=dataset.mean_image)


def generate_synthetic_binary(spec):
    """Sample features, exact conditionals p(y=1|x) and labels drawn from them.

    Returns:
        dataset (process.ImageDataset): (N, D) features tagged 'train'.
        conditionals (numpy.ndarray): Shape (N,), p(y=1|x) of every sample.

    """
    rng = np.random.default_rng(spec.seed)
    features = rng.standard_normal((spec.num_samples, spec.num_features))
    if spec.conditional == 'logistic':
        coefficients = rng.standard_normal(spec.num_features)
        intercept = rng.standard_normal()
        conditionals = expit(features @ coefficients + intercept)
    else:
        conditionals = np.full(spec.num_samples, spec.constant)
    labels = (rng.random(spec.num_samples) < conditionals).astype(np.int64)
    dataset = ImageDataset(images=features, labels=labels,
                           splits={'train': np.arange(spec.num_samples)}, mean_image=None)
    return dataset, conditionals


def class_centers(num_classes, num_features, radius=3.):
    """Class centers spread on a circle in the first two feature dims."""
    angles = 2. * np.pi * np.arange(num_classes) / num_classes
    centers = np.zeros((num_classes, num_features))
    centers[:, 0] = radius * np.cos(angles)
    if num_features > 1:
        centers[:, 1] = radius * np.sin(angles)
    return centers


def nearest_center_labels(features, centers):
    """Ground-truth rule of the toy task: index of the nearest class center."""
    distances = ((features[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(distances, axis=1)


def generate_toy_classification(num_samples, num_classes, num_features, seed, spread=0.6):
    """Clustered toy task: Gaussian blobs around class centers, labelled by nearest center."""
    if num_classes < 2 or num_features < 1:
        raise ConfigurationError('toy task needs num_classes >= 2 and num_features >= 1')
    rng = np.random.default_rng(seed)
    centers = class_centers(num_classes, num_features)
    assigned = rng.integers(0, num_classes, size=num_samples)
    features = centers[assigned] + spread * rng.standard_normal((num_samples, num_features))
    labels = nearest_center_labels(features, centers)
    return ImageDataset(images=features, labels=labels,
                        splits={'train': np.arange(num_samples)}, mean_image=None)


def save_synthetic_binary(path, dataset, conditionals):
    """Write a synthetic binary task to a little-endian container.

    Layout: header (magic, version, N, D, K), then N*D float64 features, N int64 labels
    and N float64 conditionals.
    """
    features = np.asarray(dataset.images, dtype='<f8')
    num_samples = features.shape[0]
    features = features.reshape(num_samples, -1)
    header = np.array([(SYNTHETIC_MAGIC, SYNTHETIC_VERSION, num_samples, features.shape[1], 2)],
                      dtype=_SYNTHETIC_HEADER)

    def write(fw):
        fw.write(header.tobytes())
        fw.write(features.tobytes())
        fw.write(np.asarray(dataset.labels, dtype='<i8').tobytes())
        fw.write(np.asarray(conditionals, dtype='<f8').tobytes())

    atomic_write(path, write, mode='wb')
    return path


def load_synthetic_binary(path):
    if not os.path.exists(path):
        raise DataFormatError('synthetic dataset not found: {}'.format(path))
    with open(path, 'rb') as fr:
        raw = fr.read()
    if len(raw) < _SYNTHETIC_HEADER.itemsize:
        raise DataFormatError('{}: file shorter than its header'.format(path))
    header = np.frombuffer(raw[:_SYNTHETIC_HEADER.itemsize], dtype=_SYNTHETIC_HEADER)[0]
    if header['magic'] != SYNTHETIC_MAGIC or header['version'] != SYNTHETIC_VERSION:
        raise DataFormatError('{}: not a synthetic dataset container'.format(path))
    num_samples, num_features = int(header['num_samples']), int(header['num_features'])
    expected = _SYNTHETIC_HEADER.itemsize + 8 * num_samples * (num_features + 2)
    if len(raw) != expected:
        raise DataFormatError('{}: expected {} bytes, found {}'.format(path, expected, len(raw)))
    payload = np.frombuffer(raw, dtype=np.uint8, offset=_SYNTHETIC_HEADER.itemsize)
    feature_bytes = 8 * num_samples * num_features
    features = payload[:feature_bytes].view('<f8').reshape(num_samples, num_features)
    labels = payload[feature_bytes:feature_bytes + 8 * num_samples].view('<i8')
    conditionals = payload[feature_bytes + 8 * num_samples:].view('<f8')
    dataset = ImageDataset(images=features.astype(np.float64), labels=labels.astype(np.int64),
                           splits={'train': np.arange(num_samples)}, mean_image=None)
    return dataset, conditionals.astype(np.float64)


def atomic_write(path, write, mode='w'):
    """Write through a temporary sibling file, then rename it over `path`."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    temp_path = '{}.tmp{}'.format(path, os.getpid())
    with open(temp_path, mode) as fw:
        write(fw)
    os.replace(temp_path, path)


def save_table(df, path):
    """Write a delimited table with a fixed float format."""
    def write(fw):
        df.to_csv(fw, index=False, float_format=config.TABLE_FLOAT_FORMAT, lineterminator='\n')

    atomic_write(path, write)
    return path


def load_table(path):
    if not os.path.exists(path):
        raise DataFormatError('table not found: {}'.format(path))
    return pd.read_csv(path)


def save_report(report, path):
    """Write a key/value report as YAML."""
    atomic_write(path, lambda fw: yaml.safe_dump(to_builtin(report), fw,
                                                 default_flow_style=False, sort_keys=True))
    return path


def to_builtin(value):
    """Convert numpy scalars/arrays nested in dicts and lists into plain Python values."""
    if isinstance(value, dict):
        return {str(key): to_builtin(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_builtin(item) for item in value]
    if isinstance(value, np.ndarray):
        return to_builtin(value.tolist())
    if isinstance(value, np.generic):
        return value.item()
    return value
