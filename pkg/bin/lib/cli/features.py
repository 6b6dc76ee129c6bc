import logging
from pathlib import Path
from typing import Tuple

import click
import yaml

from lib.cli import cli
from lib.cli.cli import command_config
from lib.csv_table import write_csv
from lib.env import Config
from lib.lf_data import FEATURE_HEADER, feature_rows, load_lfi
from lib.lf_features import ANGULAR_DIM, SPATIAL_DIM, extract_features
from lib.lf_tensor import LfTensor, read_lft

logger = logging.getLogger(__name__)

FEATURES_CSV = 'features.csv'
FEATURES_META = 'features_meta.yaml'


def read_lfi(path: Path) -> LfTensor:
    """A subview manifest (.json) or an LFT1 tensor file."""
    return load_lfi(path) if path.suffix == '.json' else read_lft(path)


@cli.command(name='features')
@click.argument('inputs', nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@command_config
def features_cmd(cfg: Config, inputs: Tuple[Path, ...]):
    """Spatial (36) and angular (8) quality features of each INPUTS light field; writes features.csv."""
    rows = []
    for path in inputs:
        spatial, angular = extract_features(read_lfi(path))
        rows += feature_rows(str(path), spatial.tolist(), angular.tolist())
        click.echo(f'{path}: {SPATIAL_DIM} spatial, {ANGULAR_DIM} angular features')
    write_csv(cfg.out / FEATURES_CSV, FEATURE_HEADER, rows)
    meta = {'inputs': len(inputs), 'spatial_dim': SPATIAL_DIM, 'angular_dim': ANGULAR_DIM,
            'angular_extractor': 'epi-gradient-direction', 'surrogate': True}
    with (cfg.out / FEATURES_META).open('w', encoding='utf-8') as f:
        yaml.safe_dump(meta, f, sort_keys=False)
    logger.info('Wrote features of %d light fields to %s', len(inputs), cfg.out)
