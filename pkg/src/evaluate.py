import logging
from collections import namedtuple
from functools import partial

import numpy as np
import pandas as pd
from tqdm import tqdm

import config
from dropout import RngStream
from errors import ConfigurationError, NumericalError

logging.basicConfig(format='%(asctime)s [%(levelname)s] %(name)s: %(message)s',
                    datefmt='%Y-%m-%d %H:%M:%S',
                    level=logging.WARNING)
logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

ReliabilityBins = namedtuple('ReliabilityBins', ['num_bins', 'lower', 'upper', 'counts',
                                                 'mean_confidence', 'accuracy', 'weights'])
BootstrapResult = namedtuple('BootstrapResult', ['mean', 'std', 'ci_low', 'ci_high'])
CalibrationReport = namedtuple('CalibrationReport', ['accuracy', 'nll', 'brier', 'ece', 'bins',
                                                     'intervals'])

RELIABILITY_COLUMNS = ['conf_mid', 'acc_minus_conf', 'weight']
TABLE1_SCALES = {'accuracy': ('accuracy', 1.), 'nll': ('nll', 1.),
                 'brier': ('brier_x1e3', 1e3), 'ece': ('ece_x1e2', 1e2)}


def predicted_class(probs):
    """Argmax over classes; ties go to the lowest class index."""
    return np.argmax(probs, axis=1)


def accuracy(preds):
    if preds.probs.shape[0] == 0:
        return 0.
    return float(np.mean(predicted_class(preds.probs) == preds.labels))


def nll(preds):
    """Mean -log p(true class), with probabilities floored at `config.PROB_FLOOR`."""
    if preds.probs.shape[0] == 0:
        return 0.
    true_probs = preds.probs[np.arange(preds.probs.shape[0]), preds.labels]
    return float(-np.mean(np.log(np.maximum(true_probs, config.PROB_FLOOR))))


def brier(preds):
    """Squared error against the one-hot label, averaged over samples and classes."""
    if preds.probs.shape[0] == 0:
        return 0.
    onehot = np.zeros_like(preds.probs)
    onehot[np.arange(preds.probs.shape[0]), preds.labels] = 1.
    return float(np.mean((preds.probs - onehot) ** 2))


def bin_index(confidences, num_bins):
    """Bin of each confidence: floor(c * B), with c = 1 in the last bin."""
    return np.minimum(np.floor(confidences * num_bins).astype(np.int64), num_bins - 1)


def ece_binned(preds, num_bins=config.DEFAULT_NUM_BINS):
    """Top-label expected calibration error over equal-width confidence bins.

    Returns:
        ece (float): sum over bins of weight_b * |acc_b - conf_b|.
        bins (evaluate.ReliabilityBins)

    """
    if num_bins < 1:
        raise ConfigurationError('num_bins must be >= 1')
    num_samples = preds.probs.shape[0]
    confidences = preds.probs.max(axis=1) if num_samples else np.zeros(0)
    correct = (predicted_class(preds.probs) == preds.labels).astype(np.float64) \
        if num_samples else np.zeros(0)
    index = bin_index(confidences, num_bins)

    counts = np.bincount(index, minlength=num_bins).astype(np.float64)
    conf_sums = np.bincount(index, weights=confidences, minlength=num_bins)
    correct_sums = np.bincount(index, weights=correct, minlength=num_bins)
    occupied = counts > 0
    mean_confidence = np.zeros(num_bins)
    bin_accuracy = np.zeros(num_bins)
    mean_confidence[occupied] = conf_sums[occupied] / counts[occupied]
    bin_accuracy[occupied] = correct_sums[occupied] / counts[occupied]
    weights = counts / num_samples if num_samples else np.zeros(num_bins)

    edges = np.linspace(0., 1., num_bins + 1)
    bins = ReliabilityBins(num_bins, edges[:-1], edges[1:], counts.astype(np.int64),
                           mean_confidence, bin_accuracy, weights)
    ece = float(np.sum(weights * np.abs(bin_accuracy - mean_confidence)))
    return ece, bins


def reliability_data(bins):
    """One row per non-empty bin: bin midpoint, accuracy - confidence, bin weight."""
    occupied = bins.counts > 0
    return pd.DataFrame({
        'conf_mid': ((bins.lower + bins.upper) / 2.)[occupied],
        'acc_minus_conf': (bins.accuracy - bins.mean_confidence)[occupied],
        'weight': bins.weights[occupied],
    }, columns=RELIABILITY_COLUMNS)


def ece(preds, num_bins=config.DEFAULT_NUM_BINS):
    return ece_binned(preds, num_bins)[0]


METRICS = {
    'accuracy': accuracy,
    'nll': nll,
    'brier': brier,
    'ece': ece,
}


def bootstrap(metric, preds, reps=1000, seed=0, confidence=0.95, progress=False):
    """Bootstrap a metric over resampled test sets.

    Rep r resamples N indices with replacement from its own stream, so results depend
    only on (seed, r).

    Args:
        metric (callable or str): Function of a PredictionSet, or a name in METRICS.
        preds (ensemble.PredictionSet): Predictions to resample.
        reps (int): Number of resamples, at least 2.
        seed (int): Master seed of the resampling streams.
        confidence (float): Mass of the percentile interval.
        progress (bool): Show a progress bar.

    Returns:
        result (evaluate.BootstrapResult): mean, std and percentile interval.

    """
    if reps < 2:
        raise ConfigurationError('bootstrap needs reps >= 2, got {}'.format(reps))
    if isinstance(metric, str):
        metric = METRICS[metric]
    num_samples = preds.probs.shape[0]
    values = np.empty(reps)
    iterator = tqdm(range(reps), desc='bootstrap', leave=False) if progress else range(reps)
    for rep in iterator:
        rng = RngStream.named(seed, 'bootstrap', rep).generator()
        index = rng.integers(0, max(num_samples, 1), size=num_samples)
        values[rep] = metric(preds.take(index))
    tail = (1. - confidence) / 2. * 100.
    low, high = np.percentile(values, [tail, 100. - tail])
    return BootstrapResult(float(values.mean()), float(values.std()), float(low), float(high))


def jensen_check(ens, tolerance=1e-9):
    """Ensemble NLL against the mean member NLL; the gap is non-negative by Jensen.

    Member probabilities are floored at `config.PROB_FLOOR` before both the member logs and
    the average, so the inequality holds exactly for the numbers compared. A gap below
    `-tolerance` raises NumericalError; rounding noise above it is reported as 0.
    """
    index = np.arange(ens.num_samples)
    true_probs = np.maximum(ens.probs[:, index, ens.labels], config.PROB_FLOOR)
    ensemble_nll = float(-np.mean(np.log(true_probs.mean(axis=0))))
    mean_member_nll = float(-np.mean(np.log(true_probs)))
    gap = mean_member_nll - ensemble_nll
    if gap < -tolerance:
        raise NumericalError('ensemble NLL {:.6g} exceeds mean member NLL {:.6g}'
                             .format(ensemble_nll, mean_member_nll))
    return {'ensemble_nll': ensemble_nll, 'mean_member_nll': mean_member_nll,
            'jensen_gap': max(gap, 0.)}


class CalibrationEvaluator:
    """Accuracy, NLL, Brier and binned ECE of one PredictionSet, with bootstrap bars."""

    def __init__(self, preds, num_bins=config.DEFAULT_NUM_BINS):
        self._preds = preds
        self._num_bins = num_bins
        self._ece, self._bins = ece_binned(preds, num_bins)

    def get_accuracy(self):
        return accuracy(self._preds)

    def get_nll(self):
        return nll(self._preds)

    def get_brier(self):
        return brier(self._preds)

    def get_ece(self):
        return self._ece

    def get_bins(self):
        return self._bins

    def get_reliability_table(self):
        return reliability_data(self._bins)

    def get_report(self, bootstrap_reps=1000, seed=0):
        intervals = {}
        for name in METRICS:
            metric = partial(ece, num_bins=self._num_bins) if name == 'ece' else METRICS[name]
            intervals[name] = bootstrap(metric, self._preds, bootstrap_reps, seed)
        return CalibrationReport(accuracy=self.get_accuracy(), nll=self.get_nll(),
                                 brier=self.get_brier(), ece=self._ece, bins=self._bins,
                                 intervals=intervals)


def report_to_dict(report):
    """Table-1-shaped key/value view: every metric with its bootstrap mean, std and CI."""
    result = {}
    for name, (key, scale) in TABLE1_SCALES.items():
        interval = report.intervals[name]
        result[key] = {
            'value': getattr(report, name) * scale,
            'mean': interval.mean * scale,
            'std': interval.std * scale,
            'ci_low': interval.ci_low * scale,
            'ci_high': interval.ci_high * scale,
        }
    result['num_bins'] = int(report.bins.num_bins)
    return result
