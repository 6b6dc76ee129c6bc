import logging
from pathlib import Path
from typing import Optional

import click

from lib.checkpoint import load_checkpoint, save_checkpoint
from lib.cli import cli
from lib.cli.cli import command_config
from lib.cli.features import read_lfi
from lib.config_safe_loader import load_config
from lib.csv_table import write_csv
from lib.env import Config
from lib.lf_data import augment_entries, load_dataset, split
from lib.lf_model import build_alas_dads, predict
from lib.lf_train import TrainConfig, evaluate, evaluate_by_distortion, timed_train
from lib.metrics import Metrics

logger = logging.getLogger(__name__)

CHECKPOINT = 'checkpoint.alas'
HISTORY_CSV = 'history.csv'
SUMMARY_CSV = 'summary.csv'
METRICS_CSV = 'metrics.csv'
METRICS_BY_DISTORTION_CSV = 'metrics_by_distortion.csv'
PREDICTION_CSV = 'prediction.csv'

METRIC_COLUMNS = ('rmse', 'srocc', 'plcc')


def metric_values(metrics: Metrics) -> list:
    """Undefined correlations are written as empty cells."""
    return [metrics.rmse] + ['' if value is None else value for value in (metrics.srocc, metrics.plcc)]


_DATA = click.option('--data', type=click.Path(exists=True, file_okay=False, path_type=Path), required=True,
                     help='Dataset directory holding labels.csv')
_CONFIG = click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False, path_type=Path),
                       default=None, help='YAML file overriding bin/yaml/train.yaml')
_RATIO = click.option('--ratio', type=click.FloatRange(0, 1, min_open=True, max_open=True), default=None,
                      help='Fraction of sources used for training (default from the configuration)')


@cli.command(name='train')
@_DATA
@_CONFIG
@_RATIO
@click.option('--batches', type=click.IntRange(min=1), default=None, help='Overrides train.batches')
@click.option('--lam', type=click.FloatRange(min=0), default=None, help='Overrides train.lam')
@click.option('--replicas', type=click.IntRange(min=1), default=None, help='Overrides train.replicas')
@click.option('--augment/--no-augment', default=True, show_default=True,
              help='Train on the eight rotated and flipped variants of every training light field')
@command_config
def train_cmd(cfg: Config, data: Path, config_path: Optional[Path], ratio: Optional[float], batches: Optional[int],
              lam: Optional[float], replicas: Optional[int], augment: bool):
    """Trains the quality network; writes checkpoint.alas, history.csv and summary.csv."""
    settings = load_config(config_path)
    overrides = {name: value for name, value in (('batches', batches), ('lam', lam), ('replicas', replicas))
                 if value is not None}
    config = TrainConfig.from_mapping({**settings['train'], **overrides, 'seed': cfg.seed, 'workers': cfg.workers})
    train_set, test_set = split(load_dataset(data), ratio or settings['data']['ratio'], cfg.seed)
    if augment:
        train_set = augment_entries(train_set)
    model = build_alas_dads(train_set[0].lfi.shape, cfg.scale, cfg.seed, config.lam, settings['model']['dropout'])
    trained, history, summary = timed_train(model, train_set, test_set, config)
    metrics = evaluate(trained, test_set, cfg.workers)
    cfg.out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(trained, cfg.out / CHECKPOINT)
    write_csv(cfg.out / HISTORY_CSV, ('batch', 'epoch', 'replica', 'train_loss', 'val_loss'),
              ((row.batch, row.epoch, row.replica, row.train_loss, row.val_loss) for row in history))
    write_csv(cfg.out / SUMMARY_CSV, ('batches', 'epochs', 'train_loss', 'val_loss', 'test_loss') + METRIC_COLUMNS,
              [[summary.batches, summary.epochs, summary.train_loss, summary.val_loss, summary.test_loss]
               + metric_values(metrics)])
    click.echo(f'Trained {summary.batches} batches over {len(train_set)} entries; test RMSE {metrics.rmse:.4f}')


@cli.command(name='eval')
@click.option('--checkpoint', type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True,
              help='Checkpoint written by train')
@_DATA
@_CONFIG
@_RATIO
@click.option('--all/--test-split', 'use_all', default=False, show_default=True,
              help='Evaluate every entry instead of the held-out split train used')
@click.option('--by-distortion/--no-by-distortion', default=False, show_default=True,
              help='Also write metrics per distortion type')
@command_config
def eval_cmd(cfg: Config, checkpoint: Path, data: Path, config_path: Optional[Path], ratio: Optional[float],
             use_all: bool, by_distortion: bool):
    """RMSE, SROCC and PLCC of a checkpoint on a dataset; writes metrics.csv."""
    model = load_checkpoint(checkpoint)
    entries = load_dataset(data)
    if not use_all:
        _, entries = split(entries, ratio or load_config(config_path)['data']['ratio'], cfg.seed)
    metrics = evaluate(model, entries, cfg.workers)
    write_csv(cfg.out / METRICS_CSV, ('entries',) + METRIC_COLUMNS, [[len(entries)] + metric_values(metrics)])
    if by_distortion:
        groups = evaluate_by_distortion(model, entries, cfg.workers)
        write_csv(cfg.out / METRICS_BY_DISTORTION_CSV, ('distortion', 'entries') + METRIC_COLUMNS,
                  ([name, count] + metric_values(group) for name, (count, group) in groups.items()))
    click.echo(f'{len(entries)} entries: RMSE {metrics.rmse:.4f}, SROCC {metrics.srocc}, PLCC {metrics.plcc}')


@cli.command(name='predict')
@click.option('--checkpoint', type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True,
              help='Checkpoint written by train')
@click.option('--in', 'source', type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True,
              help='Light field to score (.lft or .json)')
@command_config
def predict_cmd(cfg: Config, checkpoint: Path, source: Path):
    """Quality score plus the estimated spatial and angular features of one light field."""
    prediction = predict(load_checkpoint(checkpoint), read_lfi(source))
    write_csv(cfg.out / PREDICTION_CSV, ('output', 'index', 'value'),
              [['score', 0, prediction.score]]
              + [['spatial', i, float(value)] for i, value in enumerate(prediction.spatial)]
              + [['angular', i, float(value)] for i, value in enumerate(prediction.angular)])
    click.echo(f'{source}: score {prediction.score:.4f}')
