import logging
import sys

import click

import config
import flow
from errors import CalidropError

logging.basicConfig(format='%(asctime)s [%(levelname)s] %(name)s: %(message)s',
                    datefmt='%Y-%m-%d %H:%M:%S',
                    level=logging.WARNING)
logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)


def _run(command, ctx, *args):
    options = ctx.obj
    try:
        run_config = config.load_run_config(options['config'], options['profile'],
                                            options['seed'])
        command(run_config, options['out'], *args)
    except CalidropError as e:
        logger.error(str(e))
        sys.exit(e.exit_code)
    except (FileNotFoundError, IsADirectoryError) as e:
        logger.error(str(e))
        sys.exit(config.EXIT_DATA_ERROR)


@click.group()
@click.option('--config', 'config_path', type=click.Path(), default=None,
              help='YAML run config.')
@click.option('--seed', type=int, default=None, help='Overrides the config seed.')
@click.option('--out', type=click.Path(file_okay=False), default='out', show_default=True,
              help='Output directory.')
@click.option('--profile', type=click.Choice(sorted(config.PROFILES)), default=None,
              help='Scale profile.')
@click.pass_context
def cli(ctx, config_path, seed, out, profile):
    """MC dropout calibration, diversity and active-learning experiments."""
    ctx.obj = {'config': config_path, 'seed': seed, 'out': out, 'profile': profile}


@cli.command()
@click.pass_context
def train(ctx):
    """Train one network; writes checkpoint/, curves.csv and train_summary.yaml."""
    _run(flow.cmd_train, ctx)


@cli.command('mc-eval')
@click.option('--checkpoint', 'checkpoints', multiple=True, required=True,
              type=click.Path(), help='Checkpoint directory; repeat for a deep ensemble.')
@click.pass_context
def mc_eval(ctx, checkpoints):
    """MC dropout (or deep ensemble) evaluation on the test split."""
    _run(flow.cmd_mc_eval, ctx, list(checkpoints))


@cli.command()
@click.option('--ensemble', 'ensemble_path', required=True, type=click.Path(),
              help='Ensemble file written by mc-eval.')
@click.pass_context
def diversity(ctx, ensemble_path):
    """Decompositions, interrater agreement and ensemble-size curves of an ensemble file."""
    _run(flow.cmd_diversity, ctx, ensemble_path)


@cli.command()
@click.option('--rates', type=float, multiple=True,
              help='Dropout rate to try; repeatable. Defaults to eval.sweep_rates.')
@click.pass_context
def sweep(ctx, rates):
    """Dropout-rate sweep scored by MC validation NLL."""
    _run(flow.cmd_sweep, ctx, list(rates))


@cli.command('active-learn')
@click.pass_context
def active_learn(ctx):
    """Active-learning curves for every configured acquisition function."""
    _run(flow.cmd_active_learn, ctx)


def main():
    cli()


if __name__ == '__main__':
    main()
