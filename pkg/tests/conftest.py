import sys

import pytest
import numpy as np

sys.path.insert(0, 'src')

from dropout import DropoutSpec  # noqa: E402
from ensemble import EnsemblePredictions, PredictionSet  # noqa: E402
from models import DenseConfig, ResNetConfig  # noqa: E402
from process import ImageDataset, generate_toy_classification, split  # noqa: E402


@pytest.fixture
def tiny_resnet_config():
    return ResNetConfig(stage_channels=(2, 4), blocks_per_stage=1, num_classes=3,
                        input_shape=(3, 6, 6), dropout=DropoutSpec('element', 0.2),
                        final_fc_dropout_rate=0.1, precision='float64')


@pytest.fixture
def tiny_images():
    rng = np.random.default_rng(7)
    return rng.standard_normal((4, 3, 6, 6)), np.array([0, 1, 2, 1])


@pytest.fixture
def dense_config():
    return DenseConfig(input_dim=2, hidden_sizes=(8,), num_classes=3,
                       dropout=DropoutSpec('element', 0.1), final_fc_dropout_rate=0.1,
                       precision='float64')


@pytest.fixture
def toy_dataset():
    dataset = generate_toy_classification(num_samples=600, num_classes=3, num_features=2, seed=3)
    return split(dataset, [300, 100, 200], seed=3)


@pytest.fixture
def separable_dataset():
    # two well separated blobs, linearly separable by x0 = 0
    rng = np.random.default_rng(11)
    features = np.concatenate([rng.normal(-2., 0.3, size=(40, 2)),
                               rng.normal(2., 0.3, size=(40, 2))])
    labels = np.repeat([0, 1], 40)
    return ImageDataset(images=features, labels=labels,
                        splits={'train': np.arange(80), 'val': np.zeros(0, dtype=np.int64)},
                        mean_image=None)


# preds_1: rows and the class each row predicts
#   sample  p_0  p_1   label  predicted
#   0       0.9  0.1   0      0
#   1       0.2  0.8   1      1
#   2       0.6  0.4   1      0
#   3       0.3  0.7   1      1
@pytest.fixture
def preds_1():
    return PredictionSet(np.array([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4], [0.3, 0.7]]),
                         np.array([0, 1, 1, 1]))


@pytest.fixture
def random_ensemble():
    rng = np.random.default_rng(5)
    logits = rng.normal(size=(6, 50, 3))
    probs = np.exp(logits) / np.exp(logits).sum(axis=2, keepdims=True)
    labels = rng.integers(0, 3, size=50)
    return EnsemblePredictions(probs, labels, np.arange(6), 'mc_element')
