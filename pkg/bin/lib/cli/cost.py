import logging
from pathlib import Path
from typing import List, Optional

import click

from lib.cli import cli
from lib.cli.cli import SHAPE, command_config
from lib.config_safe_loader import load_config
from lib.csv_table import write_csv
from lib.env import Config, Scale
from lib.lf_cost import CostKind, SavingsKind, compare_ablations, cost_report, savings_summary
from lib.lf_data import load_dataset, split
from lib.lf_model import FULL_INPUT, TINY_INPUT, AblationKind, build_ablation, build_alas_dads
from lib.lf_tensor import LfShape
from lib.lf_train import TrainConfig, evaluate, timed_train

logger = logging.getLogger(__name__)

COST_REPORT_CSV = 'cost_report.csv'
COST_SUMMARY_CSV = 'cost_summary.csv'
ABLATION_CSV = 'ablation.csv'


def default_input(scale: Scale, input_shape: Optional[LfShape]) -> LfShape:
    if input_shape is not None:
        return input_shape
    return FULL_INPUT if scale == Scale.FULL else TINY_INPUT


@cli.command(name='cost-report')
@click.option('--input', 'input_shape', type=SHAPE, default=None,
              help='Input light field shape (default: 7,7,434,434,3 at full scale, 3,3,32,32,3 at tiny)')
@command_config
def cost_report_cmd(cfg: Config, input_shape: Optional[LfShape]):
    """Per-layer analytic versus counted multiply-accumulates of the quality network.

    Writes cost_report.csv and cost_summary.csv (every closed form at the dims of each
    convolution row). Exits 1 if any layer's count differs from its closed form.
    """
    model = build_alas_dads(default_input(cfg.scale, input_shape), cfg.scale, cfg.seed)
    report = cost_report(model)
    write_csv(cfg.out / COST_REPORT_CSV, ('layer_index', 'kind', 'analytic_macs', 'measured_macs', 'params'),
              ((row.layer_index, row.kind.value, row.analytic_macs, row.measured_macs, row.params)
               for row in report.rows))
    header = ['row', 'u', 'v', 'x', 'y', 'ci', 'cj', 'k', 'a'] + [kind.value for kind in CostKind] \
        + [kind.value for kind in SavingsKind]
    write_csv(cfg.out / COST_SUMMARY_CSV, header,
              ([row.row, row.dims.u, row.dims.v, row.dims.x, row.dims.y, row.dims.ci, row.dims.cj, row.dims.k,
                row.dims.a] + [row.costs[kind] for kind in CostKind] + [row.savings[kind] for kind in SavingsKind]
               for row in savings_summary(model)))
    click.echo(f'{len(report.rows)} layers: {report.total_analytic} MACs analytic, '
               f'{report.total_measured} measured, {report.total_params} parameters')
    if not report.exact:
        mismatched = [row.layer_index for row in report.rows if row.analytic_macs != row.measured_macs]
        click.echo(f'Counted MACs differ from the closed form at layers {mismatched}', err=True)
        raise click.exceptions.Exit(1)


@cli.command(name='ablation')
@click.option('--input', 'input_shape', type=SHAPE, default=None, help='Input light field shape')
@click.option('--channels', type=click.IntRange(min=1), default=None, help='Channels of every block')
@click.option('--k', type=click.IntRange(min=1), default=None, help='Spatial kernel size')
@click.option('--a', type=click.IntRange(min=1), default=None, help='Angular kernel size')
@click.option('--kinds', default=','.join(kind.value for kind in AblationKind), show_default=True,
              help='Comma separated backbones to compare')
@click.option('--data', type=click.Path(exists=True, file_okay=False, path_type=Path), default=None,
              help='Dataset directory; when given every backbone is also trained and evaluated')
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False, path_type=Path),
              default=None, help='YAML file overriding bin/yaml/train.yaml')
@click.option('--batches', type=click.IntRange(min=1), default=None, help='Overrides the configured batch count')
@command_config
def ablation_cmd(cfg: Config, input_shape: Optional[LfShape], channels: Optional[int], k: Optional[int],
                 a: Optional[int], kinds: str, data: Optional[Path], config_path: Optional[Path],
                 batches: Optional[int]):
    """Compares the four ablation backbones at equal settings; writes ablation.csv."""
    settings = load_config(config_path)
    ablation = settings['ablation']
    channels = channels or ablation['channels']
    k = k or ablation['k']
    a = a or ablation['a']
    try:
        selected = [AblationKind(kind.strip()) for kind in kinds.split(',') if kind.strip()]
    except ValueError as e:
        raise click.BadParameter(str(e), param_hint='--kinds') from e
    entries = load_dataset(data) if data is not None else None
    shape = entries[0].lfi.shape if entries else default_input(Scale.TINY, input_shape)
    header: List[str] = ['model', 'params', 'macs', 'conv_blocks']
    rows = [[row.kind.value, row.params, row.macs, row.conv_blocks]
            for row in compare_ablations(shape, channels, k, a, cfg.seed, selected)]
    if entries:
        train_set, test_set = split(entries, settings['data']['ratio'], cfg.seed)
        overrides = {'seed': cfg.seed, 'workers': cfg.workers}
        if batches is not None:
            overrides['batches'] = batches
        config = TrainConfig.from_mapping({**settings['train'], **overrides})
        header += ['train_loss', 'val_loss', 'test_loss', 'rmse', 'srocc', 'plcc']
        for row, kind in zip(rows, selected):
            model = build_ablation(kind, shape, channels, k, a, cfg.seed, config.lam, settings['model']['dropout'])
            trained, _, summary = timed_train(model, train_set, test_set, config)
            metrics = evaluate(trained, test_set, cfg.workers)
            logger.info('%s trained in %.1fs', kind.value, summary.seconds)
            row += [summary.train_loss, summary.val_loss, summary.test_loss, metrics.rmse,
                    '' if metrics.srocc is None else metrics.srocc, '' if metrics.plcc is None else metrics.plcc]
    write_csv(cfg.out / ABLATION_CSV, header, rows)
    for row in rows:
        click.echo(f'{row[0]}: {row[1]} parameters, {row[2]} MACs')
