"""Ensemble diversity: error-ambiguity and calibration decompositions, interrater agreement."""
import logging
from collections import namedtuple

import numpy as np
import pandas as pd
from tqdm import tqdm

import config
from ensemble import ensemble_average
from errors import ConfigurationError, DataFormatError, UnsupportedOperationError
from evaluate import accuracy, bin_index, bootstrap, ece, nll

logging.basicConfig(format='%(asctime)s [%(levelname)s] %(name)s: %(message)s',
                    datefmt='%Y-%m-%d %H:%M:%S',
                    level=logging.WARNING)
logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

ESTIMATORS = ('generator', 'bins')
CURVE_COLUMNS = ['m', 'accuracy', 'accuracy_std', 'ece', 'ece_std', 'nll']

DecompositionReport = namedtuple('DecompositionReport', ['ensemble_mse', 'avg_member_mse',
                                                         'avg_ambiguity', 'residual'])
EceDecompositionReport = namedtuple('EceDecompositionReport', [
    'mse_H', 'ece_H', 'sharpness', 'label_variance', 'refinement', 'avg_member_mse',
    'avg_ambiguity', 'refinement_residual', 'diversity_residual', 'num_bins', 'estimator'])


class BinaryEnsembleView(namedtuple('BinaryEnsembleView', ['h', 'y', 'H'])):
    """Binary ensemble: member probabilities h (T x N) of class 1, labels y and mean H."""

    __slots__ = ()

    def __new__(cls, h, y, H=None):
        h = np.atleast_2d(np.asarray(h, dtype=np.float64))
        y = np.asarray(y, dtype=np.float64)
        if y.shape != (h.shape[1],):
            raise DataFormatError('labels of shape {} do not match members of shape {}'
                                  .format(y.shape, h.shape))
        if np.any((h < 0.) | (h > 1.)) or np.any((y != 0.) & (y != 1.)):
            raise DataFormatError('member probabilities must lie in [0, 1] and labels in {0, 1}')
        if H is None:
            H = h.mean(axis=0)
        return super(BinaryEnsembleView, cls).__new__(cls, h, y, np.asarray(H, dtype=np.float64))

    @property
    def num_members(self):
        return self.h.shape[0]


def binary_view_from_ensemble(ens, positive_class=1):
    """One-vs-rest view of a multiclass ensemble on `positive_class`."""
    if not 0 <= positive_class < ens.num_classes:
        raise ConfigurationError('positive class {} outside [0, {})'
                                 .format(positive_class, ens.num_classes))
    h = np.clip(ens.probs[:, :, positive_class], 0., 1.)
    return BinaryEnsembleView(h, (ens.labels == positive_class).astype(np.float64))


def ambiguity(h_t, H):
    """Squared deviation of a member prediction from the ensemble mean."""
    return (np.asarray(h_t, dtype=np.float64) - H) ** 2


def decompose_mse(view):
    """Error-ambiguity decomposition: MSE(H) = mean member MSE - mean ambiguity.

    Args:
        view (diversity.BinaryEnsembleView)

    Returns:
        report (diversity.DecompositionReport): `residual` is the absolute gap between the
            two sides, zero up to rounding.

    """
    ensemble_mse = float(np.mean((view.H - view.y) ** 2))
    avg_member_mse = float(np.mean((view.h - view.y) ** 2))
    avg_ambiguity = float(np.mean(ambiguity(view.h, view.H)))
    residual = abs(ensemble_mse - (avg_member_mse - avg_ambiguity))
    return DecompositionReport(ensemble_mse, avg_member_mse, avg_ambiguity, residual)


def conditional_on_prediction(H, targets, num_bins=config.DEFAULT_NUM_BINS):
    """Estimate E[y | H(x)] per sample by averaging `targets` over equal-width bins of H.

    `targets` are labels for the empirical estimator or the known p(y=1|x) of a
    synthetic generator.
    """
    index = bin_index(H, num_bins)
    counts = np.bincount(index, minlength=num_bins)
    sums = np.bincount(index, weights=targets, minlength=num_bins)
    means = np.divide(sums, counts, out=np.zeros(num_bins), where=counts > 0)
    return means[index]


def binary_ece(view, true_conditional=None, num_bins=config.DEFAULT_NUM_BINS):
    """Squared-gap calibration error E_x[(E[y|H(x)] - H(x))^2] of a binary ensemble."""
    targets = view.y if true_conditional is None else np.asarray(true_conditional, np.float64)
    if targets.shape != view.H.shape:
        raise DataFormatError('conditionals of shape {} do not match {} samples'
                              .format(targets.shape, view.H.size))
    conditional = conditional_on_prediction(view.H, targets, num_bins)
    return float(np.mean((conditional - view.H) ** 2))


def ece_decomposition(view, conditionals=None, num_bins=config.DEFAULT_NUM_BINS,
                      estimator='generator'):
    """Split the ensemble MSE into refinement and calibration, and tie it to diversity.

    Checks two identities, reporting the absolute residual of each:
        MSE(H) = refinement + ECE
        ECE = mean member MSE - mean ambiguity + Var[E[y|H]] - Var[y]

    With `estimator='bins'` E[y|H] is the per-bin label mean, and both identities hold up
    to rounding whenever H is constant within every bin. With `estimator='generator'`
    E[y|H] is binned from the known p(y=1|x), and the identities hold within sampling
    error.

    Args:
        view (diversity.BinaryEnsembleView): Ensemble under study.
        conditionals (numpy.ndarray, optional): Known p(y=1|x), required by 'generator'.
        num_bins (int): Equal-width bins on H.
        estimator (str): 'generator' or 'bins'.

    Returns:
        report (diversity.EceDecompositionReport)

    """
    if estimator not in ESTIMATORS:
        raise ConfigurationError('unknown estimator `{}`, expected one of {}'
                                 .format(estimator, ESTIMATORS))
    if estimator == 'generator' and conditionals is None:
        raise UnsupportedOperationError('generator estimator needs the known p(y=1|x); '
                                        'it is only available for synthetic data')
    targets = view.y if estimator == 'bins' else np.asarray(conditionals, dtype=np.float64)
    if targets.shape != view.H.shape:
        raise DataFormatError('conditionals of shape {} do not match {} samples'
                              .format(targets.shape, view.H.size))

    conditional = conditional_on_prediction(view.H, targets, num_bins)
    mse_report = decompose_mse(view)
    ece_H = float(np.mean((conditional - view.H) ** 2))
    refinement = float(np.mean((view.y - conditional) ** 2))
    sharpness = float(np.var(conditional))
    label_variance = float(np.var(view.y))

    refinement_gap = abs(mse_report.ensemble_mse - (refinement + ece_H))
    diversity_gap = abs(ece_H - (mse_report.avg_member_mse - mse_report.avg_ambiguity
                                 + sharpness - label_variance))
    return EceDecompositionReport(mse_H=mse_report.ensemble_mse, ece_H=ece_H,
                                  sharpness=sharpness, label_variance=label_variance,
                                  refinement=refinement,
                                  avg_member_mse=mse_report.avg_member_mse,
                                  avg_ambiguity=mse_report.avg_ambiguity,
                                  refinement_residual=refinement_gap,
                                  diversity_residual=diversity_gap, num_bins=num_bins,
                                  estimator=estimator)


class CorrectnessMatrix(namedtuple('CorrectnessMatrix', ['correct'])):
    """T x n booleans, entry (t, k) set when member t classifies sample k correctly."""

    __slots__ = ()

    def __new__(cls, correct):
        correct = np.atleast_2d(np.asarray(correct, dtype=bool))
        return super(CorrectnessMatrix, cls).__new__(cls, correct)

    @property
    def num_members(self):
        return self.correct.shape[0]

    @property
    def num_samples(self):
        return self.correct.shape[1]

    @property
    def rho(self):
        return self.correct.sum(axis=0)

    @property
    def mean_accuracy(self):
        return float(self.correct.mean()) if self.correct.size else 0.


def correctness_matrix(ens):
    return CorrectnessMatrix(np.argmax(ens.probs, axis=2) == ens.labels[None, :])


def interrater_agreement(matrix):
    """Interrater agreement kappa of the members; 1 when all members agree on every sample.

    Returns None when kappa is undefined: a single member, or mean member accuracy of
    exactly 0 or 1.
    """
    members, samples = matrix.num_members, matrix.num_samples
    p_bar = matrix.mean_accuracy
    if members < 2 or samples == 0 or p_bar in (0., 1.):
        logger.warning('interrater agreement undefined (T={}, mean accuracy {})'
                       .format(members, p_bar))
        return None
    rho = matrix.rho.astype(np.float64)
    disagreement = np.sum(rho * (members - rho)) / members
    return float(1. - disagreement / (samples * (members - 1) * p_bar * (1. - p_bar)))


def ensemble_size_curves(ens, max_m=None, num_bins=config.DEFAULT_NUM_BINS, bootstrap_reps=0,
                         seed=0):
    """Accuracy, ECE and NLL of the average of the first m members, for m = 1..max_m.

    Bootstrap standard deviations are filled in when `bootstrap_reps` >= 2 and left NaN
    otherwise.
    """
    if max_m is None:
        max_m = ens.num_members
    if not 1 <= max_m <= ens.num_members:
        raise ConfigurationError('max_m must lie in [1, {}], got {}'
                                 .format(ens.num_members, max_m))

    def binned_ece(preds):
        return ece(preds, num_bins)

    rows = []
    for m in tqdm(range(1, max_m + 1), desc='ensemble sizes', leave=False):
        preds = ensemble_average(ens, m)
        accuracy_std = ece_std = np.nan
        if bootstrap_reps >= 2:
            accuracy_std = bootstrap(accuracy, preds, bootstrap_reps, seed).std
            ece_std = bootstrap(binned_ece, preds, bootstrap_reps, seed).std
        rows.append([m, accuracy(preds), accuracy_std, ece(preds, num_bins), ece_std, nll(preds)])
    return pd.DataFrame(rows, columns=CURVE_COLUMNS)
