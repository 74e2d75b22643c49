from itertools import combinations

import numpy as np
import pytest
from scipy.special import expit, logit

from diversity import (CURVE_COLUMNS, BinaryEnsembleView, CorrectnessMatrix, ambiguity,
                       binary_ece, binary_view_from_ensemble, correctness_matrix,
                       decompose_mse, ece_decomposition, ensemble_size_curves,
                       interrater_agreement)
from ensemble import EnsemblePredictions
from errors import ConfigurationError, DataFormatError, UnsupportedOperationError
from evaluate import accuracy, nll


@pytest.fixture
def binned_view():
    # ensemble mean takes a single value inside each of 4 bins
    rng = np.random.default_rng(0)
    levels = np.array([0.125, 0.375, 0.625, 0.875])
    H = levels[rng.integers(0, 4, size=400)]
    h = np.stack([H - 0.1, H, H + 0.1])
    y = (rng.random(400) < H).astype(np.float64)
    return BinaryEnsembleView(h, y)


def _generator_view(seed, num_samples=10 ** 5, num_members=5):
    rng = np.random.default_rng(seed)
    conditionals = 1. / (1. + np.exp(-2. * rng.standard_normal(num_samples)))
    h = np.clip(conditionals + 0.1 * rng.standard_normal((num_members, num_samples)), 0., 1.)
    y = (rng.random(num_samples) < conditionals).astype(np.float64)
    return BinaryEnsembleView(h, y), conditionals


def _brute_force_kappa(correct):
    members, samples = correct.shape
    p_bar = correct.mean()
    pairs = list(combinations(range(members), 2))
    disagreement = np.mean([np.mean(correct[i] != correct[j]) for i, j in pairs])
    return 1. - disagreement / (2. * p_bar * (1. - p_bar))


class TestBinaryEnsembleView:

    def test_new__probability_above_one__data_format_error(self):
        with pytest.raises(DataFormatError):
            BinaryEnsembleView([[1.2, 0.3]], [0, 1])

    def test_new__non_binary_label__data_format_error(self):
        with pytest.raises(DataFormatError):
            BinaryEnsembleView([[0.2, 0.3]], [0, 2])

    def test_binary_view_from_ensemble__one_vs_rest(self, random_ensemble):
        view = binary_view_from_ensemble(random_ensemble, positive_class=2)
        np.testing.assert_array_equal(view.h, random_ensemble.probs[:, :, 2])
        np.testing.assert_array_equal(view.y, random_ensemble.labels == 2)
        assert view.num_members == 6

    def test_binary_view_from_ensemble__bad_class__configuration_error(self, random_ensemble):
        with pytest.raises(ConfigurationError):
            binary_view_from_ensemble(random_ensemble, positive_class=3)


class TestErrorAmbiguity:

    def test_ambiguity__examples(self):
        np.testing.assert_allclose(ambiguity([0.2, 0.9], 0.5), [0.09, 0.16])

    def test_decompose_mse__three_members__known_terms(self):
        report = decompose_mse(BinaryEnsembleView([[0.2], [0.4], [0.9]], [1]))
        assert report.ensemble_mse == pytest.approx(0.25)
        assert report.avg_member_mse == pytest.approx(0.336667, abs=1e-6)
        assert report.avg_ambiguity == pytest.approx(0.086667, abs=1e-6)
        assert report.residual < 1e-12

    def test_decompose_mse__random_ensembles__identity_holds(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            members, samples = rng.integers(1, 8), rng.integers(1, 20)
            view = BinaryEnsembleView(rng.random((members, samples)),
                                      rng.integers(0, 2, size=samples))
            assert decompose_mse(view).residual < 1e-12


class TestEceDecomposition:

    def test_binary_ece__constant_prediction__squared_gap(self):
        view = BinaryEnsembleView(np.full((1, 10), 0.6), np.ones(10))
        assert binary_ece(view) == pytest.approx(0.16)
        assert binary_ece(view, true_conditional=np.ones(10)) == pytest.approx(0.16)

    def test_binary_ece__conditional_shape_mismatch__data_format_error(self):
        view = BinaryEnsembleView(np.full((1, 10), 0.6), np.ones(10))
        with pytest.raises(DataFormatError):
            binary_ece(view, true_conditional=np.ones(9))

    def test_ece_decomposition__bins_estimator__identities_exact(self, binned_view):
        report = ece_decomposition(binned_view, num_bins=4, estimator='bins')
        assert report.refinement_residual < 1e-12
        assert report.diversity_residual < 1e-12
        assert report.mse_H == pytest.approx(report.refinement + report.ece_H)
        assert report.label_variance == pytest.approx(np.var(binned_view.y))

    def test_ece_decomposition__generator_estimator__diversity_residual_small(self):
        residuals = []
        for seed in range(5):
            view, conditionals = _generator_view(seed)
            report = ece_decomposition(view, conditionals, num_bins=20, estimator='generator')
            residuals.append(report.diversity_residual)
        assert np.mean(residuals) < 0.02

    def test_ece_decomposition__generator_estimator__refinement_residual_small(self):
        residuals = [ece_decomposition(*_generator_view(seed), num_bins=20).refinement_residual
                     for seed in range(5)]
        assert np.mean(residuals) < 0.01

    def test_ece_decomposition__generator_without_conditionals__unsupported(self, binned_view):
        with pytest.raises(UnsupportedOperationError):
            ece_decomposition(binned_view, estimator='generator')

    def test_ece_decomposition__unknown_estimator__configuration_error(self, binned_view):
        with pytest.raises(ConfigurationError):
            ece_decomposition(binned_view, estimator='isotonic')


class TestInterraterAgreement:

    def test_interrater_agreement__identical_members__one(self):
        correct = np.array([[1, 0, 1, 1], [1, 0, 1, 1], [1, 0, 1, 1]])
        assert interrater_agreement(CorrectnessMatrix(correct)) == pytest.approx(1.)

    def test_interrater_agreement__two_members__minus_one_third(self):
        correct = np.array([[1, 1, 1, 0], [1, 0, 1, 1]])
        assert interrater_agreement(CorrectnessMatrix(correct)) == pytest.approx(-1. / 3.)

    def test_interrater_agreement__random_matrices__matches_pairwise_disagreement(self):
        rng = np.random.default_rng(2)
        checked = 0
        for _ in range(100):
            correct = rng.random((rng.integers(2, 7), rng.integers(5, 30))) < 0.6
            if correct.all() or not correct.any():
                continue
            kappa = interrater_agreement(CorrectnessMatrix(correct))
            assert kappa == pytest.approx(_brute_force_kappa(correct), abs=1e-12)
            checked += 1
        assert checked > 90

    @pytest.mark.parametrize('correct', [[[1, 0, 1]], [[1, 1], [1, 1]], [[0, 0], [0, 0]]])
    def test_interrater_agreement__undefined__none(self, correct):
        assert interrater_agreement(CorrectnessMatrix(correct)) is None

    def test_correctness_matrix__argmax_against_labels(self, preds_1):
        ens = EnsemblePredictions(preds_1.probs[None], preds_1.labels, [0], 'mc_element')
        matrix = correctness_matrix(ens)
        assert matrix.correct.tolist() == [[True, True, False, True]]
        assert matrix.rho.tolist() == [1, 1, 0, 1]


class TestEnsembleSizeCurves:

    def test_ensemble_size_curves__first_row_is_first_member(self, random_ensemble):
        curves = ensemble_size_curves(random_ensemble)
        assert list(curves.columns) == CURVE_COLUMNS
        assert curves['m'].tolist() == list(range(1, 7))
        assert curves['accuracy'].iloc[0] == pytest.approx(accuracy(random_ensemble.member(0)))
        assert curves['nll'].iloc[0] == pytest.approx(nll(random_ensemble.member(0)))
        assert curves['accuracy_std'].isna().all()

    def test_ensemble_size_curves__identical_members__flat(self, preds_1):
        ens = EnsemblePredictions(np.repeat(preds_1.probs[None], 4, axis=0), preds_1.labels,
                                  np.arange(4), 'deep_ensemble')
        curves = ensemble_size_curves(ens)
        np.testing.assert_allclose(curves['nll'], curves['nll'].iloc[0])
        np.testing.assert_allclose(curves['ece'], curves['ece'].iloc[0])

    def test_ensemble_size_curves__bootstrap__std_filled(self, random_ensemble):
        curves = ensemble_size_curves(random_ensemble, max_m=2, bootstrap_reps=10, seed=1)
        assert (curves['accuracy_std'] > 0.).all()

    def test_ensemble_size_curves__noisy_calibrated_members__accuracy_non_decreasing(self):
        # members perturb the true log-odds with independent noise
        curves = []
        for seed in range(5):
            rng = np.random.default_rng(seed)
            conditionals = expit(2. * rng.standard_normal(50000))
            labels = (rng.random(50000) < conditionals).astype(np.int64)
            p1 = expit(logit(conditionals) + 1.5 * rng.standard_normal((5, 50000)))
            ens = EnsemblePredictions(np.stack([1. - p1, p1], axis=2), labels, np.arange(5),
                                      'deep_ensemble')
            curves.append(ensemble_size_curves(ens)['accuracy'].to_numpy())
        mean_accuracy = np.mean(curves, axis=0)
        assert np.all(np.diff(mean_accuracy) >= 0.)

    def test_ensemble_size_curves__max_m_too_large__configuration_error(self, random_ensemble):
        with pytest.raises(ConfigurationError):
            ensemble_size_curves(random_ensemble, max_m=7)
