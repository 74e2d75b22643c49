import numpy as np
import pytest

import active
from active import (ACCURACY_COLUMNS, ALConfig, PoolState, acquire, acquisition_scores,
                    bald_scores, max_entropy_scores, run_al_loop, variation_ratio_scores)
from decorators import AmbiguousSampleDecorator
from dropout import DropoutSpec
from ensemble import EnsemblePredictions, PredictionSet
from errors import ConfigurationError, NumericalError
from models import DenseConfig
from process import generate_toy_classification, split
from trainer import TrainConfig


@pytest.fixture
def al_dataset(toy_dataset):
    pool = np.concatenate([toy_dataset.indices('train'), toy_dataset.indices('val')])
    return toy_dataset.with_splits({'pool': pool, 'test': toy_dataset.indices('test')})


@pytest.fixture
def al_train_config():
    return TrainConfig(epochs=2, batch_size=16, lr=0.05, lr_drop_epochs=(), augmentation=False)


@pytest.fixture
def small_al_config():
    return ALConfig(initial_labeled=10, acquire_per_round=5, rounds=2, repeats=2, mc_samples=3)


class TestScores:

    def test_max_entropy_scores__binary_example(self):
        preds = PredictionSet([[0.7, 0.3]], [0])
        assert max_entropy_scores(preds)[0] == pytest.approx(0.610864, abs=1e-6)

    def test_max_entropy_scores__uniform__log_k(self):
        preds = PredictionSet(np.full((1, 10), 0.1), [0])
        assert max_entropy_scores(preds)[0] == pytest.approx(np.log(10.))

    def test_max_entropy_scores__one_hot__zero(self):
        assert max_entropy_scores(PredictionSet([[1., 0.]], [0]))[0] == 0.

    def test_bald_scores__two_members__example(self):
        ens = EnsemblePredictions([[[0.9, 0.1]], [[0.5, 0.5]]], [0], [0, 1], 'mc_element')
        assert bald_scores(ens)[0] == pytest.approx(0.101749, abs=1e-6)

    def test_bald_scores__never_above_entropy(self, random_ensemble):
        bald = bald_scores(random_ensemble)
        entropy = acquisition_scores('max_entropy', random_ensemble)
        assert np.all(bald >= -1e-12)
        assert np.all(bald <= entropy + 1e-12)

    def test_bald_scores__identical_members__zero(self, preds_1):
        ens = EnsemblePredictions(np.repeat(preds_1.probs[None], 3, axis=0), preds_1.labels,
                                  np.arange(3), 'mc_element')
        np.testing.assert_allclose(bald_scores(ens), 0., atol=1e-12)

    def test_bald_scores__single_member__zeros_and_warning(self, mocker, preds_1):
        warning = mocker.patch.object(active.logger, 'warning')
        ens = EnsemblePredictions(preds_1.probs[None], preds_1.labels, [0], 'mc_element')
        np.testing.assert_array_equal(bald_scores(ens), np.zeros(4))
        warning.assert_called_once()

    def test_variation_ratio_scores__example(self):
        preds = PredictionSet([[0.5, 0.3, 0.2]], [0])
        assert variation_ratio_scores(preds)[0] == pytest.approx(0.5)

    def test_acquisition_scores__random__seeded(self, random_ensemble):
        a = acquisition_scores('random', random_ensemble, np.random.default_rng(1))
        b = acquisition_scores('random', random_ensemble, np.random.default_rng(1))
        np.testing.assert_array_equal(a, b)

    def test_acquisition_scores__unknown__configuration_error(self, random_ensemble):
        with pytest.raises(ConfigurationError):
            acquisition_scores('margin', random_ensemble)


class TestAcquire:

    def test_acquire__top_k_moved_to_labeled(self):
        state = PoolState(labeled=[0], pool=[10, 11, 12])

        state = acquire(state, [3., 1., 2.], 2)

        assert state.labeled.tolist() == [0, 10, 12]
        assert state.pool.tolist() == [11]
        assert state.round == 1

    def test_acquire__ties__lower_index_first(self):
        state = acquire(PoolState(labeled=[], pool=[5, 3, 7]), [1., 1., 1.], 1)
        assert state.labeled.tolist() == [3]

    def test_acquire__k_zero__pool_unchanged(self):
        state = acquire(PoolState(labeled=[1], pool=[2, 3]), [0.5, 0.1], 0)
        assert state.pool.tolist() == [2, 3]

    def test_acquire__k_above_pool__configuration_error(self):
        with pytest.raises(ConfigurationError):
            acquire(PoolState(labeled=[], pool=[1, 2]), [0.1, 0.2], 3)

    def test_pool_state__overlap__configuration_error(self):
        with pytest.raises(ConfigurationError):
            PoolState(labeled=[1, 2], pool=[2, 3])

    def test_record__appends_accuracy__kept_by_acquire(self):
        state = PoolState(labeled=[0], pool=[1, 2]).record(0.5)

        state = acquire(state, [0.1, 0.9], 1).record(0.7)

        assert state.history == (0.5, 0.7)
        assert state.labeled.tolist() == [0, 2]


class TestALConfig:

    def test_labeled_counts__initial_plus_acquired(self):
        cfg = ALConfig(initial_labeled=20, acquire_per_round=10, rounds=3)
        assert cfg.labeled_counts == [20, 30, 40, 50]

    def test_new__unknown_acquisition__configuration_error(self):
        with pytest.raises(ConfigurationError):
            ALConfig(acquisition='margin')


class TestRunAlLoop:

    def test_run_al_loop__tables_follow_labeled_counts(self, al_dataset, dense_config,
                                                       al_train_config, small_al_config):
        result = run_al_loop(small_al_config, al_dataset, dense_config, al_train_config, seed=0,
                             workers=1)

        assert list(result.accuracy_table.columns) == ACCURACY_COLUMNS
        assert result.accuracy_table['labeled_count'].tolist() == [10, 15, 20]
        assert len(result.histories) == 2
        assert result.failures == []
        np.testing.assert_allclose(result.improvement_table['mean_rel_improvement'].iloc[0], 0.)

    def test_run_al_loop__zero_rounds__single_row(self, al_dataset, dense_config,
                                                  al_train_config, small_al_config):
        cfg = small_al_config._replace(rounds=0, repeats=1)
        result = run_al_loop(cfg, al_dataset, dense_config, al_train_config, seed=0, workers=1)
        assert len(result.accuracy_table) == 1
        assert 0. <= result.accuracy_table['mean_acc'].iloc[0] <= 1.

    def test_run_al_loop__same_seed__same_histories(self, al_dataset, dense_config,
                                                    al_train_config, small_al_config):
        cfg = small_al_config._replace(repeats=1, acquisition='bald')
        a = run_al_loop(cfg, al_dataset, dense_config, al_train_config, seed=4, workers=1)
        b = run_al_loop(cfg, al_dataset, dense_config, al_train_config, seed=4, workers=1)
        assert a.histories == b.histories

    def test_run_al_loop__failing_repeat__recorded_and_skipped(self, mocker, al_dataset,
                                                               dense_config, al_train_config,
                                                               small_al_config):
        def repeat(al_config, dataset, network_config, train_config, seed):
            if seed == 1:
                raise NumericalError('diverged')
            return [0.5, 0.6, 0.75]

        mocker.patch('active._run_repeat', side_effect=repeat)

        result = run_al_loop(small_al_config, al_dataset, dense_config, al_train_config, seed=0,
                             workers=1)

        assert len(result.failures) == 1
        assert result.accuracy_table['mean_acc'].tolist() == [0.5, 0.6, 0.75]
        np.testing.assert_allclose(result.improvement_table['mean_rel_improvement'],
                                   [0., 0.2, 0.5])

    def test_run_al_loop__zero_baseline_repeat__left_out_of_improvements(self, mocker,
                                                                         al_dataset, dense_config,
                                                                         al_train_config,
                                                                         small_al_config):
        def repeat(al_config, dataset, network_config, train_config, seed):
            return [0., 0.5, 0.6] if seed == 0 else [0.5, 0.6, 0.75]

        mocker.patch('active._run_repeat', side_effect=repeat)

        result = run_al_loop(small_al_config, al_dataset, dense_config, al_train_config, seed=0,
                             workers=1)

        improvements = result.improvement_table['mean_rel_improvement']
        assert np.all(np.isfinite(improvements))
        np.testing.assert_allclose(improvements, [0., 0.2, 0.5])
        assert len(result.histories) == 2

    def test_run_al_loop__all_zero_baselines__nan_improvements(self, mocker, al_dataset,
                                                               dense_config, al_train_config,
                                                               small_al_config):
        mocker.patch('active._run_repeat', return_value=[0., 0.2, 0.4])
        result = run_al_loop(small_al_config, al_dataset, dense_config, al_train_config, seed=0,
                             workers=1)
        assert result.improvement_table['mean_rel_improvement'].isna().all()

    def test_run_al_loop__pool_too_small__repeat_fails(self, al_dataset, dense_config,
                                                       al_train_config):
        cfg = ALConfig(initial_labeled=390, acquire_per_round=20, rounds=1, repeats=1,
                       mc_samples=2)
        result = run_al_loop(cfg, al_dataset, dense_config, al_train_config, seed=0, workers=1)
        assert result.histories == []
        assert len(result.failures) == 1

    def test_run_al_loop__test_overlaps_pool__configuration_error(self, toy_dataset,
                                                                  dense_config, al_train_config,
                                                                  small_al_config):
        dataset = toy_dataset.with_splits({'pool': np.arange(400), 'test': np.arange(390, 600)})
        with pytest.raises(ConfigurationError):
            run_al_loop(small_al_config, dataset, dense_config, al_train_config, seed=0)


class TestUncertaintyAgainstRandom:

    @pytest.fixture
    def ambiguous_toy(self):
        dataset = generate_toy_classification(num_samples=800, num_classes=3, num_features=2,
                                              seed=21)
        dataset = AmbiguousSampleDecorator(fraction=0.2, margin=0.5).decorate(
            dataset, np.random.default_rng(22))
        return split(dataset, [600, 200], seed=23, tags=('pool', 'test'))

    @pytest.mark.parametrize('acquisition', ['max_entropy', 'bald'])
    def test_run_al_loop__five_seeds__final_accuracy_not_below_random(self, ambiguous_toy,
                                                                      acquisition):
        net_config = DenseConfig(input_dim=2, hidden_sizes=(16,), num_classes=3,
                                 dropout=DropoutSpec('element', 0.1), final_fc_dropout_rate=0.1,
                                 precision='float64')
        train_config = TrainConfig(epochs=30, batch_size=16, lr=0.05, lr_drop_epochs=(),
                                   augmentation=False)
        al_config = ALConfig(initial_labeled=10, acquire_per_round=10, rounds=3, repeats=5,
                             mc_samples=10, acquisition=acquisition)

        final = {}
        for name in (acquisition, 'random'):
            result = run_al_loop(al_config._replace(acquisition=name), ambiguous_toy,
                                 net_config, train_config, seed=0, workers=1)
            assert len(result.histories) == 5
            final[name] = result.accuracy_table['mean_acc'].iloc[-1]

        assert final[acquisition] >= final['random']
