import logging
import os
from contextlib import contextmanager

import numpy as np
import pandas as pd

import config
import process
import tracer
from active import ALConfig, run_al_loop
from decorators import AmbiguousSampleDecorator
from diversity import (binary_ece, binary_view_from_ensemble, correctness_matrix,
                       decompose_mse, ece_decomposition, ensemble_size_curves,
                       interrater_agreement)
from dropout import DropoutSpec, RngStream
from ensemble import (PredictionSet, deep_ensemble_predict, ensemble_average,
                      export_ensemble_csv, load_ensemble, mc_predict, save_ensemble)
from errors import ConfigurationError
from evaluate import CalibrationEvaluator, accuracy, ece, jensen_check, nll, report_to_dict
from models import build_network, load_network, network_config_from_run
from models.model import config_hash
from trainer import TrainConfig, fit, grid_search_dropout_rate

logging.basicConfig(format='%(asctime)s [%(levelname)s] %(name)s: %(message)s',
                    datefmt='%Y-%m-%d %H:%M:%S',
                    level=logging.WARNING)
logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

RUN_LOG = 'run.log'
RESOLVED_CONFIG = 'resolved_config.yaml'
CHECKPOINT_DIR = 'checkpoint'
UNDEFINED = 'undefined'


@contextmanager
def _command(name, out_dir, run_config):
    """Output directory, run log, resolved-config echo and optional tracking of one command."""
    os.makedirs(out_dir, exist_ok=True)
    handler = logging.FileHandler(os.path.join(out_dir, RUN_LOG))
    handler.setFormatter(logging.Formatter('%(asctime)s [%(levelname)s] %(name)s: %(message)s',
                                           datefmt='%Y-%m-%d %H:%M:%S'))
    root = logging.getLogger()
    root.addHandler(handler)
    process.atomic_write(os.path.join(out_dir, RESOLVED_CONFIG),
                         lambda fw: fw.write(config.dump_run_config(run_config)))
    logger.info('[{}] seed={}, profile={}, out={}'.format(name, run_config.seed,
                                                          run_config.profile, out_dir))
    if run_config.run['track']:
        tracer.enable(os.path.join(out_dir, 'mlruns'))
    tracer.start_trace(name)
    tracer.log_params(config.run_config_to_dict(run_config))
    tracer.log_artifact(os.path.join(out_dir, RESOLVED_CONFIG))
    try:
        yield
    finally:
        tracer.end_trace()
        tracer.disable()
        root.removeHandler(handler)
        handler.close()


def load_dataset(run_config):
    """Build the dataset a run config describes, with 'train', 'val' and 'test' splits.

    Returns:
        dataset (process.ImageDataset)
        conditionals (numpy.ndarray or None): Known p(y=1|x) of synthetic sources.

    """
    ds = run_config.dataset
    source = ds['source']
    if source not in config.DATASET_SOURCES:
        raise ConfigurationError('unknown dataset source `{}`, expected one of {}'
                                 .format(source, config.DATASET_SOURCES))
    sizes = [ds['train_size'], ds['valid_size'], ds['test_size']]
    if source == 'cifar10':
        dataset = process.prepare_cifar10(ds['path'], *sizes, seed=run_config.seed,
                                          stratified=ds['stratified'])
        return dataset, None

    conditionals = None
    if source == 'toy':
        dataset = process.generate_toy_classification(ds['num_samples'], ds['num_classes'],
                                                      ds['num_features'], run_config.seed)
        rng = RngStream.named(run_config.seed, 'dataset', 'ambiguous').generator()
        dataset = AmbiguousSampleDecorator(ds['ambiguous_fraction'],
                                           num_classes=ds['num_classes']).decorate(dataset, rng)
    elif source == 'synthetic':
        spec = process.SyntheticBinarySpec(ds['num_features'], ds['conditional'],
                                           ds['num_samples'], run_config.seed, ds['constant'])
        dataset, conditionals = process.generate_synthetic_binary(spec)
    else:
        dataset, conditionals = process.load_synthetic_binary(ds['path'])
    dataset = process.split(dataset, sizes, run_config.seed, stratified=ds['stratified'])
    return dataset, conditionals


def _num_classes(run_config):
    source = run_config.dataset['source']
    if source == 'toy':
        return run_config.dataset['num_classes']
    if source in ('synthetic', 'synthetic_file'):
        return 2
    return run_config.model['num_classes']


def _network_config(run_config, dataset, dropout=None):
    return network_config_from_run(run_config, dropout=dropout,
                                   input_shape=dataset.images.shape[1:],
                                   num_classes=_num_classes(run_config))


def cmd_train(run_config, out_dir):
    """Train one network and write its checkpoint, curves and summary.

    Args:
        run_config (config.RunConfig): Resolved run config.
        out_dir (str): Output directory.

    Returns:
        checkpoint_dir (str)

    """
    with _command('train', out_dir, run_config):
        dataset, _ = load_dataset(run_config)
        network_config = _network_config(run_config, dataset)
        net = build_network(network_config, run_config.seed)
        result = fit(net, dataset, TrainConfig.from_run(run_config),
                     eval_batch_size=run_config.eval['batch_size'])

        checkpoint_dir = os.path.join(out_dir, CHECKPOINT_DIR)
        net.save(checkpoint_dir)
        process.save_table(result.curves, os.path.join(out_dir, 'curves.csv'))
        test_data = dataset.arrays('test')
        summary = {
            'selected_epoch': result.selected_epoch,
            'parameter_count': net.parameter_count(),
            'config_hash': net.config_hash(),
        }
        if test_data[1].size:
            probs = net.predict_proba(test_data[0], batch_size=run_config.eval['batch_size'])
            summary['test_accuracy_deterministic'] = accuracy(PredictionSet(probs, test_data[1]))
        process.save_report(summary, os.path.join(out_dir, 'train_summary.yaml'))
        tracer.log_metric('selected_epoch', summary['selected_epoch'] or 0)
        logger.info('checkpoint written to {}'.format(checkpoint_dir))
        return checkpoint_dir


def _load_checkpoints(run_config, dataset, checkpoints):
    expected = config_hash(_network_config(run_config, dataset).to_dict())
    nets = []
    for checkpoint in checkpoints:
        net = load_network(checkpoint)
        if net.config_hash() != expected:
            raise ConfigurationError('checkpoint {} was built from a different network config '
                                     'than the run config describes'.format(checkpoint))
        nets.append(net)
    return nets


def cmd_mc_eval(run_config, out_dir, checkpoints):
    """Evaluate MC dropout on one checkpoint, or a deep ensemble of several, on the test split.

    Writes the ensemble interchange file and its CSV export, the reliability table and a
    report with every metric, its bootstrap bars, the single-pass metrics and the Jensen
    check.
    """
    if not checkpoints:
        raise ConfigurationError('mc-eval needs at least one checkpoint')
    with _command('mc-eval', out_dir, run_config):
        dataset, _ = load_dataset(run_config)
        nets = _load_checkpoints(run_config, dataset, checkpoints)
        test_data = dataset.arrays('test')
        ev = run_config.eval
        if len(nets) == 1:
            ens = mc_predict(nets[0], test_data, ev['mc_samples'], master_seed=run_config.seed,
                             batch_size=ev['batch_size'])
        else:
            ens = deep_ensemble_predict(nets, test_data, ev['batch_size'])
        save_ensemble(os.path.join(out_dir, 'ensemble.bin'), ens)
        export_ensemble_csv(ens, os.path.join(out_dir, 'ensemble.csv'))

        evaluator = CalibrationEvaluator(ensemble_average(ens), ev['num_bins'])
        report = report_to_dict(evaluator.get_report(ev['bootstrap_reps'], run_config.seed))
        single = ens.member(0)
        report['single_pass'] = {'accuracy': accuracy(single), 'nll': nll(single),
                                 'ece_x1e2': ece(single, ev['num_bins']) * 1e2}
        report['jensen'] = jensen_check(ens)
        report['num_members'] = ens.num_members
        report['source'] = ens.source
        process.save_table(evaluator.get_reliability_table(),
                           os.path.join(out_dir, 'reliability.csv'))
        process.save_report(report, os.path.join(out_dir, 'report.yaml'))

        for key in ('accuracy', 'nll', 'brier_x1e3', 'ece_x1e2'):
            tracer.log_metric(key, report[key]['value'])
        logger.info('{} members: accuracy {:.4f}, nll {:.4f}, ece {:.4f}'
                    .format(ens.num_members, report['accuracy']['value'],
                            report['nll']['value'], report['ece_x1e2']['value'] / 1e2))
        return report


def cmd_diversity(run_config, out_dir, ensemble_path):
    """Diversity analysis of an ensemble file: decompositions, agreement and size curves."""
    with _command('diversity', out_dir, run_config):
        ens = load_ensemble(ensemble_path)
        ev = run_config.eval
        view = binary_view_from_ensemble(ens, ev['positive_class'])
        decomposition = decompose_mse(view)
        calibration = ece_decomposition(view, num_bins=ev['num_bins'], estimator='bins')
        kappa = interrater_agreement(correctness_matrix(ens))
        max_m = min(ev['max_ensemble_size'], ens.num_members)
        curves = ensemble_size_curves(ens, max_m, ev['num_bins'], ev['curve_bootstrap_reps'],
                                      run_config.seed)

        report = {
            'num_members': ens.num_members,
            'source': ens.source,
            'positive_class': ev['positive_class'],
            'mse_decomposition': decomposition._asdict(),
            'ece_decomposition': calibration._asdict(),
            'binary_ece': binary_ece(view, num_bins=ev['num_bins']),
            'interrater_agreement': UNDEFINED if kappa is None else kappa,
        }
        process.save_report(report, os.path.join(out_dir, 'diversity.yaml'))
        process.save_table(curves, os.path.join(out_dir, 'ensemble_size.csv'))
        if kappa is not None:
            tracer.log_metric('interrater_agreement', kappa)
        return report


def cmd_sweep(run_config, out_dir, rates=None):
    """Dropout-rate sweep over every configured variant; one table row per (variant, rate)."""
    ev = run_config.eval
    rates = list(rates) if rates else ev['sweep_rates']
    with _command('sweep', out_dir, run_config):
        dataset, _ = load_dataset(run_config)
        base = DropoutSpec(**run_config.dropout)
        network_config = _network_config(run_config, dataset, dropout=base)
        train_config = TrainConfig.from_run(run_config)

        tables, best = [], {}
        for variant in ev['sweep_variants']:
            best_rate, table = grid_search_dropout_rate(network_config, train_config, rates,
                                                        dataset, variant=variant,
                                                        mc_samples=ev['mc_samples'],
                                                        repeats=ev['sweep_repeats'])
            best[variant] = UNDEFINED if best_rate is None else best_rate
            tables.append(table)
        table = pd.concat(tables, ignore_index=True)
        process.save_table(table, os.path.join(out_dir, 'sweep.csv'))
        process.save_report({'best_rate': best}, os.path.join(out_dir, 'sweep.yaml'))
        logger.info('best rates: {}'.format(best))
        return best, table


def cmd_active_learn(run_config, out_dir):
    """Active-learning curves, one pair of tables per acquisition function.

    The union of the train and val splits is the unlabeled pool.
    """
    with _command('active-learn', out_dir, run_config):
        dataset, _ = load_dataset(run_config)
        pool = np.concatenate([dataset.indices('train'), dataset.indices('val')])
        dataset = dataset.with_splits({'pool': pool, 'test': dataset.indices('test')})
        network_config = _network_config(run_config, dataset)
        train_config = TrainConfig.from_run(run_config)

        summary = {}
        for acquisition in run_config.al['acquisitions']:
            al_config = ALConfig.from_run(run_config, acquisition)
            result = run_al_loop(al_config, dataset, network_config, train_config,
                                 run_config.seed)
            process.save_table(result.accuracy_table,
                               os.path.join(out_dir, 'al_{}.csv'.format(acquisition)))
            process.save_table(result.improvement_table,
                               os.path.join(out_dir, 'al_{}_improvement.csv'.format(acquisition)))
            final = result.accuracy_table['mean_acc'].iloc[-1]
            summary[acquisition] = {'completed_repeats': len(result.histories),
                                    'failures': result.failures,
                                    'final_mean_acc': final}
            tracer.log_metric('{}.final_mean_acc'.format(acquisition), final)
        process.save_report(summary, os.path.join(out_dir, 'al_summary.yaml'))
        return summary
