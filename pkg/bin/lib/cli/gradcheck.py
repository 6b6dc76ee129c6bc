import logging

import click
import numpy as np

from lib.cli import cli
from lib.cli.cli import SHAPE, command_config
from lib.csv_table import write_csv
from lib.env import Config
from lib.lf_autodiff import CHECK_INPUT, checked_ops, grad_check
from lib.lf_tensor import LfShape

logger = logging.getLogger(__name__)

GRADCHECK_CSV = 'gradcheck.csv'


@cli.command(name='gradcheck')
@click.option('--ops', default='all', show_default=True, help='Comma separated operators, or "all"')
@click.option('--seeds', type=click.IntRange(min=1), default=5, show_default=True,
              help='Random draws of input and parameters per operator')
@click.option('--eps', type=click.FloatRange(min=0, min_open=True), default=1e-5, show_default=True,
              help='Central difference step')
@click.option('--tolerance', type=click.FloatRange(min=0, min_open=True), default=1e-4, show_default=True,
              help='Largest accepted relative error')
@click.option('--input', 'input_shape', type=SHAPE, default=CHECK_INPUT, show_default=True,
              help='Light field shape the operators run on')
@command_config
def gradcheck_cmd(cfg: Config, ops: str, seeds: int, eps: float, tolerance: float, input_shape: LfShape):
    """Compares backward gradients with central differences; writes gradcheck.csv, exits 1 on any failure."""
    available = checked_ops(input_shape)
    names = list(available) if ops == 'all' else [name.strip() for name in ops.split(',') if name.strip()]
    unknown = [name for name in names if name not in available]
    if unknown:
        raise click.BadParameter(f"Unknown operators {', '.join(unknown)} (known: {', '.join(available)})",
                                 param_hint='--ops')
    rows = []
    for name in names:
        worst = 0.0
        for offset in range(seeds):
            seed = cfg.seed + offset
            x = np.random.default_rng(seed).standard_normal(input_shape.dims)
            worst = max(worst, grad_check(available[name], x, eps, seed))
        passed = worst <= tolerance
        logger.info('%s: max relative error %.3e over %d seeds', name, worst, seeds)
        click.echo(f'{name:14} {worst:.3e} {"ok" if passed else "FAILED"}')
        rows.append((name, seeds, worst, passed))
    write_csv(cfg.out / GRADCHECK_CSV, ('op', 'seeds', 'max_rel_error', 'passed'), rows)
    failed = [row[0] for row in rows if not row[3]]
    if failed:
        click.echo(f'Gradient check failed for {", ".join(failed)}', err=True)
        raise click.exceptions.Exit(1)
