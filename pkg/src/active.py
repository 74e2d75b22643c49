"""Pool-based active learning with MC-dropout acquisition functions."""
import logging
from collections import namedtuple
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pandas as pd
from scipy.stats import entropy
from tqdm import tqdm

import config
from dropout import DropoutSpec, RngStream
from ensemble import ensemble_average, mc_predict
from errors import CalidropError, ConfigurationError
from evaluate import accuracy
from models import build_network
from trainer import fit

logging.basicConfig(format='%(asctime)s [%(levelname)s] %(name)s: %(message)s',
                    datefmt='%Y-%m-%d %H:%M:%S',
                    level=logging.WARNING)
logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

ACCURACY_COLUMNS = ['round', 'labeled_count', 'mean_acc', 'std_acc']
IMPROVEMENT_COLUMNS = ['round', 'labeled_count', 'mean_rel_improvement', 'std_rel_improvement']

ALResult = namedtuple('ALResult', ['accuracy_table', 'improvement_table', 'histories',
                                   'failures'])


def max_entropy_scores(preds):
    """Predictive entropy in nats, 0 log 0 taken as 0."""
    return entropy(preds.probs, axis=1)


def bald_scores(ens):
    """Mutual information between label and weights: H[mean_t p_t] - mean_t H[p_t]."""
    if ens.num_members < 2:
        logger.warning('BALD with a single MC sample is identically zero')
        return np.zeros(ens.num_samples)
    marginal = entropy(ens.probs.mean(axis=0), axis=1)
    expected = entropy(ens.probs, axis=2).mean(axis=0)
    return marginal - expected


def variation_ratio_scores(preds):
    return 1. - preds.probs.max(axis=1)


def random_scores(num_samples, rng):
    return rng.random(num_samples)


ACQUISITIONS = ('max_entropy', 'bald', 'variation_ratio', 'random')


def acquisition_scores(acquisition, ens, rng=None):
    """Score every sample of an MC ensemble; higher is more informative."""
    if acquisition == 'max_entropy':
        return max_entropy_scores(ensemble_average(ens))
    if acquisition == 'bald':
        return bald_scores(ens)
    if acquisition == 'variation_ratio':
        return variation_ratio_scores(ensemble_average(ens))
    if acquisition == 'random':
        return random_scores(ens.num_samples, rng)
    raise ConfigurationError('unknown acquisition `{}`, expected one of {}'
                             .format(acquisition, ACQUISITIONS))


class PoolState(namedtuple('PoolState', ['labeled', 'pool', 'round', 'history'])):
    """Labeled and unlabeled dataset indices, kept sorted and disjoint.

    `history` holds the test accuracy recorded after each round's training.
    """

    __slots__ = ()

    def __new__(cls, labeled, pool, round=0, history=()):
        labeled = np.sort(np.asarray(labeled, dtype=np.int64))
        pool = np.sort(np.asarray(pool, dtype=np.int64))
        if np.intersect1d(labeled, pool).size or np.unique(labeled).size != labeled.size \
                or np.unique(pool).size != pool.size:
            raise ConfigurationError('labeled and pool indices must be distinct and disjoint')
        return super(PoolState, cls).__new__(cls, labeled, pool, int(round), tuple(history))

    def record(self, test_accuracy):
        return self._replace(history=self.history + (float(test_accuracy),))


def acquire(pool_state, scores, k):
    """Move the k best-scoring pool samples to the labeled set.

    Args:
        pool_state (active.PoolState): Current partition.
        scores (numpy.ndarray): One score per entry of `pool_state.pool`, in its order.
        k (int): Number of samples to acquire.

    Returns:
        pool_state (active.PoolState): Next round's partition; ties go to the lower index.

    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != pool_state.pool.shape:
        raise ConfigurationError('expected {} scores, got {}'
                                 .format(pool_state.pool.size, scores.size))
    if not 0 <= k <= pool_state.pool.size:
        raise ConfigurationError('cannot acquire {} samples from a pool of {}'
                                 .format(k, pool_state.pool.size))
    order = np.lexsort((pool_state.pool, -scores))
    chosen = pool_state.pool[order[:k]]
    return PoolState(labeled=np.concatenate([pool_state.labeled, chosen]),
                     pool=pool_state.pool[np.sort(order[k:])],
                     round=pool_state.round + 1,
                     history=pool_state.history)


_ALConfig = namedtuple('ALConfig', ['initial_labeled', 'acquire_per_round', 'rounds',
                                    'repeats', 'mc_samples', 'acquisition', 'dropout'])


class ALConfig(_ALConfig):
    __slots__ = ()

    def __new__(cls, initial_labeled=500, acquire_per_round=250, rounds=4, repeats=3,
                mc_samples=config.DEFAULT_MC_SAMPLES, acquisition='max_entropy', dropout=None):
        if acquisition not in ACQUISITIONS:
            raise ConfigurationError('unknown acquisition `{}`, expected one of {}'
                                     .format(acquisition, ACQUISITIONS))
        if initial_labeled < 1 or acquire_per_round < 1 or rounds < 0 or repeats < 1 \
                or mc_samples < 1:
            raise ConfigurationError('active-learning sizes must be positive')
        if dropout is None:
            dropout = DropoutSpec('element', 0.1)
        elif isinstance(dropout, dict):
            dropout = DropoutSpec(**dropout)
        return super(ALConfig, cls).__new__(cls, int(initial_labeled), int(acquire_per_round),
                                            int(rounds), int(repeats), int(mc_samples),
                                            acquisition, dropout)

    @classmethod
    def from_run(cls, run_config, acquisition):
        al = run_config.al
        variant = run_config.dropout['variant']
        if variant == 'none':
            variant = 'element'
        dropout = DropoutSpec(variant, al['dropout_rate'], run_config.dropout['block_size'])
        return cls(initial_labeled=al['initial_labeled'],
                   acquire_per_round=al['acquire_per_round'], rounds=al['rounds'],
                   repeats=al['repeats'], mc_samples=al['mc_samples'],
                   acquisition=acquisition, dropout=dropout)

    @property
    def labeled_counts(self):
        return [self.initial_labeled + r * self.acquire_per_round for r in range(self.rounds + 1)]


def _run_repeat(al_config, dataset, network_config, train_config, seed):
    pool = dataset.indices('pool')
    needed = al_config.labeled_counts[-1]
    if needed > pool.size:
        raise ConfigurationError('{} rounds need {} pool samples, only {} available'
                                 .format(al_config.rounds, needed, pool.size))
    test_data = dataset.arrays('test')
    network_config = network_config._replace(dropout=al_config.dropout)
    train_config = train_config._replace(seed=seed)

    rng = RngStream.named(seed, 'al', 'initial').generator()
    initial = rng.choice(pool, size=al_config.initial_labeled, replace=False)
    state = PoolState(labeled=initial, pool=np.setdiff1d(pool, initial))

    for r in range(al_config.rounds + 1):
        round_data = dataset.with_splits({'train': state.labeled, 'val': []})
        net = build_network(network_config, seed)
        fit(net, round_data, train_config)
        test_ens = mc_predict(net, test_data, al_config.mc_samples, master_seed=seed)
        state = state.record(accuracy(ensemble_average(test_ens)))
        logger.debug('seed {} round {}: {} labeled, test accuracy {:.4f}'
                     .format(seed, r, state.labeled.size, state.history[-1]))
        if r == al_config.rounds:
            break
        pool_data = dataset.images[state.pool], dataset.labels[state.pool]
        pool_ens = mc_predict(net, pool_data, al_config.mc_samples, master_seed=seed)
        rng = RngStream.named(seed, 'al', 'random', r).generator()
        scores = acquisition_scores(al_config.acquisition, pool_ens, rng)
        state = acquire(state, scores, al_config.acquire_per_round)
    return list(state.history)


def run_al_loop(al_config, dataset, network_config, train_config, seed, workers=None):
    """Active-learning experiment: train, score the pool, acquire, retrain from scratch.

    Round 0 trains on a random `initial_labeled` subset of the 'pool' split. Every round
    records the MC-averaged test accuracy of the last-epoch model. Repeat r runs with seed
    `seed + r`; a repeat that fails is logged, listed in `failures` and left out of the
    tables.

    Args:
        al_config (active.ALConfig): Loop sizes, acquisition and dropout.
        dataset (process.ImageDataset): Needs disjoint 'pool' and 'test' splits.
        network_config (namedtuple): ResNetConfig or DenseConfig; its dropout is replaced.
        train_config (trainer.TrainConfig): Per-round training recipe.
        seed (int): Seed of the first repeat.
        workers (int, optional): Concurrent repeats; `config.worker_count()` when None.

    Returns:
        result (active.ALResult)

    """
    pool, test = dataset.indices('pool'), dataset.indices('test')
    if test.size == 0 or np.intersect1d(pool, test).size:
        raise ConfigurationError('active learning needs a non-empty test split disjoint '
                                 'from the pool')
    seeds = [seed + r for r in range(al_config.repeats)]

    def run(repeat_seed):
        try:
            return _run_repeat(al_config, dataset, network_config, train_config, repeat_seed), None
        except (CalidropError, ArithmeticError) as e:
            logger.warning('active-learning repeat with seed {} failed: {}'.format(repeat_seed, e))
            return None, '{}: {}'.format(repeat_seed, e)

    workers = workers or config.worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            outcomes = list(executor.map(run, seeds))
    else:
        outcomes = [run(s) for s in tqdm(seeds, desc=al_config.acquisition, leave=False)]

    histories = [history for history, _ in outcomes if history is not None]
    failures = [failure for _, failure in outcomes if failure is not None]
    counts = al_config.labeled_counts
    if histories:
        accuracies = np.array(histories)
        baseline = accuracies[:, :1]
        usable = baseline[:, 0] > 0.
        if not usable.all():
            logger.warning('{} repeats with zero round-0 accuracy left out of the improvement '
                           'table'.format(int((~usable).sum())))
        if usable.any():
            improvements = accuracies[usable] / baseline[usable] - 1.
        else:
            improvements = np.full((1, len(counts)), np.nan)
    else:
        accuracies = improvements = np.full((1, len(counts)), np.nan)

    rounds = np.arange(len(counts))
    accuracy_table = pd.DataFrame({'round': rounds, 'labeled_count': counts,
                                   'mean_acc': accuracies.mean(axis=0),
                                   'std_acc': accuracies.std(axis=0)},
                                  columns=ACCURACY_COLUMNS)
    improvement_table = pd.DataFrame({'round': rounds, 'labeled_count': counts,
                                      'mean_rel_improvement': improvements.mean(axis=0),
                                      'std_rel_improvement': improvements.std(axis=0)},
                                     columns=IMPROVEMENT_COLUMNS)
    logger.info('{}: {} of {} repeats completed'.format(al_config.acquisition, len(histories),
                                                        len(seeds)))
    return ALResult(accuracy_table, improvement_table, histories, failures)
