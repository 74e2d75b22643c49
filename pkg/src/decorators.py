import logging
from abc import ABC, abstractmethod

import numpy as np

from errors import ConfigurationError
from process import ImageDataset, class_centers, nearest_center_labels

logging.basicConfig(format='%(asctime)s [%(levelname)s] %(name)s: %(message)s',
                    datefmt='%Y-%m-%d %H:%M:%S',
                    level=logging.WARNING)
logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

CROP_PADDING = 4
MAX_EMPTY_DRAWS = 50


class BaseDecorator(ABC):

    @abstractmethod
    def decorate(self, data, rng):
        """Decorate data.

        Args:
            data: What the decorator works on, a batch of images or a dataset.
            rng (numpy.random.Generator): Source of every random choice.

        Returns:
            decorated data of the same kind.

        """


def crop_and_flip(image, top, left, flip, pad=CROP_PADDING):
    """Zero-pad a (C, H, W) image by `pad`, crop H x W at (top, left), optionally mirror.

    Zero is the dataset mean once the per-pixel mean has been subtracted.
    """
    height, width = image.shape[-2:]
    padded = np.pad(image, ((0, 0), (pad, pad), (pad, pad)))
    cropped = padded[:, top:top + height, left:left + width]
    if flip:
        cropped = cropped[:, :, ::-1]
    return np.ascontiguousarray(cropped)


def augment(image, rng, pad=CROP_PADDING):
    """Random crop from the padded image and a horizontal flip with probability 0.5."""
    top, left = rng.integers(0, 2 * pad + 1, size=2)
    flip = rng.random() < 0.5
    return crop_and_flip(image, int(top), int(left), bool(flip), pad)


class RandomCropFlipDecorator(BaseDecorator):
    """Applies `augment` to every image of an NCHW batch."""

    def __init__(self, pad=CROP_PADDING):
        self.pad = pad

    def decorate(self, data, rng):
        if data.ndim != 4:
            return data
        return np.stack([augment(image, rng, self.pad) for image in data]).astype(data.dtype)


class AmbiguousSampleDecorator(BaseDecorator):
    """Replace a fraction of a toy dataset with samples close to the class boundaries.

    Candidates are drawn uniformly over the bounding box of the data and kept when the gap
    between their two nearest class centers is below `margin`; they are labelled by the
    nearest-center rule like every other sample.
    """

    def __init__(self, fraction=0.2, margin=0.5, num_classes=None):
        if not 0. <= fraction <= 1.:
            raise ConfigurationError('ambiguous fraction must lie in [0, 1]')
        if margin <= 0.:
            raise ConfigurationError('ambiguous margin must be positive, got {}'.format(margin))
        self.fraction = fraction
        self.margin = margin
        self.num_classes = num_classes

    def decorate(self, data, rng):
        num_samples = data.num_samples
        count = int(round(self.fraction * num_samples))
        if count == 0:
            return data
        num_classes = self.num_classes or data.num_classes
        features = data.images
        centers = class_centers(num_classes, features.shape[1])
        low, high = features.min(axis=0), features.max(axis=0)

        accepted = []
        total = empty_draws = 0
        while total < count:
            candidates = rng.uniform(low, high, size=(4 * count, features.shape[1]))
            distances = np.sqrt(((candidates[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2))
            nearest_two = np.sort(distances, axis=1)[:, :2]
            keep = candidates[nearest_two[:, 1] - nearest_two[:, 0] < self.margin]
            if keep.shape[0] == 0:
                empty_draws += 1
                if empty_draws >= MAX_EMPTY_DRAWS:
                    raise ConfigurationError('no boundary samples within margin {} after {} draws'
                                             .format(self.margin, empty_draws))
                continue
            empty_draws = 0
            accepted.append(keep)
            total += keep.shape[0]
        ambiguous = np.concatenate(accepted)[:count]

        replaced = rng.choice(num_samples, size=count, replace=False)
        images = features.copy()
        labels = data.labels.copy()
        images[replaced] = ambiguous
        labels[replaced] = nearest_center_labels(ambiguous, centers)
        logger.info('replaced {} of {} samples with boundary samples'.format(count, num_samples))
        return ImageDataset(images=images, labels=labels, splits=data.splits,
                            mean_image=data.mean_image)
