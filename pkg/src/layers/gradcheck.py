import logging

import numpy as np

from errors import ConfigurationError, UsageError
from layers.functional import softmax_cross_entropy

logging.basicConfig(format='%(asctime)s [%(levelname)s] %(name)s: %(message)s',
                    datefmt='%Y-%m-%d %H:%M:%S',
                    level=logging.WARNING)
logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

LOSSES = ('cross_entropy', 'projection')


def _scalar_loss(network, inputs, labels, loss, projection, forward_kwargs):
    logits = network.forward(inputs, **forward_kwargs)
    if loss == 'cross_entropy':
        return softmax_cross_entropy(logits, labels)
    return float(np.sum(logits * projection)), projection


def gradient_check(network, batch, epsilon=1e-6, num_samples=100, seed=0,
                   loss='cross_entropy', denominator_floor=1e-8, absolute_tolerance=0.,
                   **forward_kwargs):
    """Compare analytic gradients with central differences on sampled parameter entries.

    The relative error of one entry is |a - n| / max(|a| + |n|, denominator_floor). Entries
    whose absolute discrepancy |a - n| is at most `absolute_tolerance` count as agreeing;
    a true gradient of zero (e.g. a bias followed by batch norm in train mode) leaves
    only finite-difference round-off, which no relative measure can judge. The
    `projection` loss is a fixed random linear functional of the logits, which makes the
    loss exactly linear in the parameters of a linear network.

    Args:
        network (models.model.BaseNetwork): Network in float64 precision.
        batch (tuple): (inputs, labels).
        epsilon (float): Finite-difference step.
        num_samples (int): Parameter entries to compare; all of them when fewer exist.
        seed (int): Seed for choosing entries and the projection.
        loss (str): 'cross_entropy' or 'projection'.
        denominator_floor (float): Lower bound of the error denominator.
        absolute_tolerance (float): Discrepancy below which an entry is not scored.
        **forward_kwargs: Passed to every `network.forward` call. Dropout must be frozen,
            i.e. deterministic mode or a fixed `mask_seed`.

    Returns:
        max_relative_error (float)

    """
    if loss not in LOSSES:
        raise ConfigurationError('unknown gradient-check loss `{}`'.format(loss))
    parameters = network.parameters()
    if any(param.value.dtype != np.float64 for param in parameters):
        raise UsageError('gradient checks need a float64 network')
    forward_kwargs.setdefault('mode', 'deterministic')
    forward_kwargs.setdefault('record', True)
    if forward_kwargs['mode'] == 'train' and forward_kwargs.get('mask_seed') is None:
        raise UsageError('train-mode gradient checks need a fixed mask_seed')

    inputs, labels = batch
    inputs = np.asarray(inputs, dtype=np.float64)
    rng = np.random.default_rng(seed)
    projection = None
    if loss == 'projection':
        projection = rng.normal(size=(inputs.shape[0], network.num_classes))

    for param in parameters:
        param.zero_grad()
    _, grad_logits = _scalar_loss(network, inputs, labels, loss, projection, forward_kwargs)
    network.backward(grad_logits)
    analytic = [param.grad.copy() for param in parameters]

    sizes = np.array([param.value.size for param in parameters])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    chosen = rng.choice(total, size=min(num_samples, total), replace=False)

    max_error = max_absolute = 0.
    for flat_index in np.sort(chosen):
        which = int(np.searchsorted(offsets, flat_index, side='right') - 1)
        param = parameters[which]
        entry = int(flat_index - offsets[which])
        original = param.value.flat[entry]

        param.value.flat[entry] = original + epsilon
        loss_plus, _ = _scalar_loss(network, inputs, labels, loss, projection, forward_kwargs)
        param.value.flat[entry] = original - epsilon
        loss_minus, _ = _scalar_loss(network, inputs, labels, loss, projection, forward_kwargs)
        param.value.flat[entry] = original

        numeric = (loss_plus - loss_minus) / (2. * epsilon)
        exact = analytic[which].flat[entry]
        absolute = abs(exact - numeric)
        max_absolute = max(max_absolute, absolute)
        if absolute <= absolute_tolerance:
            continue
        error = absolute / max(abs(exact) + abs(numeric), denominator_floor)
        if error > max_error:
            max_error = error
            logger.debug('new worst entry {}[{}]: analytic {:.6e}, numeric {:.6e}'
                         .format(param.name, entry, exact, numeric))
    logger.debug('max absolute discrepancy {:.3e} over {} entries'
                 .format(max_absolute, chosen.size))
    return float(max_error)
