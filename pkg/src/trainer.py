import logging
from collections import namedtuple
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pandas as pd
from tqdm import tqdm

import config
from decorators import RandomCropFlipDecorator
from dropout import DropoutSpec, RngStream
from ensemble import PredictionSet, ensemble_average, mc_predict
from errors import CalidropError, ConfigurationError, NumericalError
from evaluate import accuracy, nll
from layers import sgd_step
from layers.functional import softmax_cross_entropy
from models import build_network
from models.model import iterate_batches

logging.basicConfig(format='%(asctime)s [%(levelname)s] %(name)s: %(message)s',
                    datefmt='%Y-%m-%d %H:%M:%S',
                    level=logging.WARNING)
logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

CURVE_COLUMNS = ['epoch', 'lr', 'train_loss', 'train_acc', 'val_acc', 'val_nll']
SWEEP_COLUMNS = ['variant', 'rate', 'repeats', 'nll_mean', 'nll_std', 'accuracy_mean',
                 'accuracy_std', 'failures', 'error']

_TrainConfig = namedtuple('TrainConfig', ['epochs', 'batch_size', 'lr', 'momentum',
                                          'weight_decay', 'lr_drop_epochs', 'lr_drop_factor',
                                          'seed', 'augmentation'])

FitResult = namedtuple('FitResult', ['best_checkpoint', 'curves', 'selected_epoch'])


class TrainConfig(_TrainConfig):
    __slots__ = ()

    def __new__(cls, epochs=60, batch_size=128, lr=0.01, momentum=0.9, weight_decay=1e-4,
                lr_drop_epochs=(30, 45), lr_drop_factor=10., seed=0, augmentation=True):
        lr_drop_epochs = tuple(int(e) for e in lr_drop_epochs)
        if epochs < 0 or batch_size < 1 or lr < 0.:
            raise ConfigurationError('epochs >= 0, batch_size >= 1 and lr >= 0 are required')
        if any(b <= a for a, b in zip(lr_drop_epochs, lr_drop_epochs[1:])):
            raise ConfigurationError('lr_drop_epochs must be strictly increasing, got {}'
                                     .format(list(lr_drop_epochs)))
        if lr_drop_epochs and (lr_drop_epochs[0] < 1 or lr_drop_epochs[-1] >= epochs):
            raise ConfigurationError('lr_drop_epochs must lie in [1, epochs), got {}'
                                     .format(list(lr_drop_epochs)))
        if lr_drop_factor <= 0.:
            raise ConfigurationError('lr_drop_factor must be positive')
        return super(TrainConfig, cls).__new__(cls, int(epochs), int(batch_size), float(lr),
                                               float(momentum), float(weight_decay),
                                               lr_drop_epochs, float(lr_drop_factor),
                                               int(seed), bool(augmentation))

    @classmethod
    def from_run(cls, run_config, seed=None, **overrides):
        values = dict(run_config.train)
        values['seed'] = run_config.seed if seed is None else seed
        values.update(overrides)
        return cls(**values)


def learning_rate(train_config, epoch):
    """Step schedule: lr divided by lr_drop_factor at every drop epoch already reached."""
    passed = sum(1 for drop in train_config.lr_drop_epochs if epoch >= drop)
    return train_config.lr / train_config.lr_drop_factor ** passed


def _evaluate_split(net, inputs, labels, batch_size):
    if labels.size == 0:
        return np.nan, np.nan
    preds = PredictionSet(net.predict_proba(inputs, mode='deterministic', batch_size=batch_size),
                          labels)
    return accuracy(preds), nll(preds)


def fit(net, dataset, train_config, train_tag='train', valid_tag='val', eval_batch_size=256):
    """Train `net` in place with SGD, momentum and a step learning-rate schedule.

    The returned checkpoint, also restored into `net`, is the epoch of best validation
    accuracy (earliest on ties), or the last epoch when the validation split is empty.

    Args:
        net (models.BaseNetwork): Freshly built network.
        dataset (process.ImageDataset): Holds the `train_tag` and `valid_tag` splits.
        train_config (trainer.TrainConfig): Schedule and optimizer settings.
        train_tag (str): Split trained on.
        valid_tag (str): Split used for model selection, may be empty.
        eval_batch_size (int): Batch size of validation inference.

    Returns:
        result (trainer.FitResult)

    """
    train_inputs, train_labels = dataset.arrays(train_tag)
    valid_inputs, valid_labels = dataset.arrays(valid_tag)
    if train_labels.size == 0 and train_config.epochs > 0:
        raise ConfigurationError('training split `{}` is empty'.format(train_tag))
    augmenter = RandomCropFlipDecorator() if train_config.augmentation else None

    rows = []
    best_checkpoint, selected_epoch, best_acc = net.snapshot(), None, -np.inf
    for epoch in tqdm(range(train_config.epochs), desc='epochs', leave=False):
        lr = learning_rate(train_config, epoch)
        rng = RngStream.named(train_config.seed, 'epoch', epoch).generator()
        order = rng.permutation(train_labels.size)
        loss_sum, correct, seen = 0., 0, 0
        for step, (start, end) in enumerate(iterate_batches(order.size, train_config.batch_size)):
            index = order[start:end]
            inputs = train_inputs[index]
            if augmenter is not None:
                inputs = augmenter.decorate(inputs, rng)
            logits = net.forward(inputs, mode='train', master_seed=train_config.seed,
                                 mask_seed='{}:{}'.format(epoch, step))
            loss, grad = softmax_cross_entropy(logits.astype(np.float64), train_labels[index])
            if not np.isfinite(loss):
                raise NumericalError('training diverged at epoch {} step {} (loss {})'
                                     .format(epoch, step, loss))
            net.backward(grad)
            sgd_step(net.parameters(), lr, train_config.momentum, train_config.weight_decay)
            loss_sum += loss * index.size
            correct += int(np.sum(np.argmax(logits, axis=1) == train_labels[index]))
            seen += index.size

        val_acc, val_nll = _evaluate_split(net, valid_inputs, valid_labels, eval_batch_size)
        rows.append([epoch, lr, loss_sum / seen, correct / seen, val_acc, val_nll])
        logger.debug('epoch {}: lr {:.4g} loss {:.4f} val acc {:.4f}'
                     .format(epoch, lr, loss_sum / seen, val_acc))

        if valid_labels.size == 0 or val_acc > best_acc:
            best_acc = val_acc
            best_checkpoint, selected_epoch = net.snapshot(), epoch

    net.restore(best_checkpoint)
    if train_config.epochs:
        logger.info('trained {} epochs, selected epoch {}'.format(train_config.epochs,
                                                                   selected_epoch))
    curves = pd.DataFrame(rows, columns=CURVE_COLUMNS)
    return FitResult(best_checkpoint=best_checkpoint, curves=curves, selected_epoch=selected_epoch)


def _sweep_cell(network_config, train_config, dataset, spec, repeat, mc_samples, valid_tag):
    seed = train_config.seed + repeat
    net = build_network(network_config._replace(dropout=spec), seed)
    fit(net, dataset, train_config._replace(seed=seed))
    data = dataset.arrays(valid_tag)
    preds = ensemble_average(mc_predict(net, data, mc_samples, master_seed=seed))
    return nll(preds), accuracy(preds)


def grid_search_dropout_rate(network_config, train_config, rates, dataset, variant=None,
                             mc_samples=config.DEFAULT_MC_SAMPLES, repeats=1, valid_tag='val',
                             workers=None):
    """Train one model per (rate, repeat) and pick the rate of lowest MC validation NLL.

    A failing cell is recorded in the `error` column and does not stop the search.

    Args:
        network_config (namedtuple): ResNetConfig or DenseConfig; its dropout is replaced.
        train_config (trainer.TrainConfig): Repeat r trains with seed `seed + r`.
        rates (list of float): Dropout rates; duplicates are dropped and rows sorted by rate.
        dataset (process.ImageDataset): Needs a non-empty `valid_tag` split.
        variant (str, optional): Dropout variant, defaults to the config's variant.
        mc_samples (int): MC samples used for the validation prediction.
        repeats (int): Models per rate.
        valid_tag (str): Split evaluated.
        workers (int, optional): Concurrent cells; `config.worker_count()` when None.

    Returns:
        best_rate (float or None): None when every cell failed.
        table (pandas.DataFrame): One row per rate.

    """
    rates = sorted(set(float(rate) for rate in rates))
    if not rates:
        raise ConfigurationError('grid search needs at least one rate')
    if repeats < 1:
        raise ConfigurationError('repeats must be >= 1')
    if dataset.indices(valid_tag).size == 0:
        raise ConfigurationError('grid search needs a non-empty `{}` split'.format(valid_tag))
    base = network_config.dropout
    variant = variant or base.variant
    specs = [DropoutSpec(variant, rate, base.block_size) for rate in rates]
    cells = [(spec, repeat) for spec in specs for repeat in range(repeats)]

    def run(cell):
        spec, repeat = cell
        try:
            return _sweep_cell(network_config, train_config, dataset, spec, repeat, mc_samples,
                               valid_tag) + (None,)
        except (CalidropError, ArithmeticError) as e:
            logger.warning('sweep cell {} rate {} repeat {} failed: {}'
                           .format(spec.variant, spec.rate, repeat, e))
            return np.nan, np.nan, str(e)

    workers = workers or config.worker_count()
    logger.info('grid search over {} cells with {} worker(s)'.format(len(cells), workers))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            outcomes = list(executor.map(run, cells))
    else:
        outcomes = [run(cell) for cell in cells]

    rows = []
    for i, spec in enumerate(specs):
        results = outcomes[i * repeats:(i + 1) * repeats]
        nlls = np.array([r[0] for r in results])
        accs = np.array([r[1] for r in results])
        errors = [r[2] for r in results if r[2] is not None]
        ok = np.isfinite(nlls)
        rows.append([variant, spec.rate, repeats,
                     nlls[ok].mean() if ok.any() else np.nan,
                     nlls[ok].std() if ok.any() else np.nan,
                     accs[ok].mean() if ok.any() else np.nan,
                     accs[ok].std() if ok.any() else np.nan,
                     len(errors), '; '.join(errors)])
    table = pd.DataFrame(rows, columns=SWEEP_COLUMNS)

    finite = table[np.isfinite(table['nll_mean'])]
    best_rate = None if finite.empty else float(finite.loc[finite['nll_mean'].idxmin(), 'rate'])
    return best_rate, table
