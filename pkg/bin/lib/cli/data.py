import logging
from pathlib import Path
from typing import Optional

import click

from lib.cli import cli
from lib.cli.cli import SHAPE, command_config
from lib.cli.features import read_lfi
from lib.env import Config
from lib.lf_data import Distortion, augment, save_dataset, save_subviews, synth_dataset, trim_reshape
from lib.lf_model import TINY_INPUT
from lib.lf_tensor import LfShape, write_lft

logger = logging.getLogger(__name__)

AUGMENT_NAMES = ('rot0', 'rot90', 'rot180', 'rot270', 'flip-rot0', 'flip-rot90', 'flip-rot180', 'flip-rot270')


@cli.command(name='synth')
@click.option('--count', type=click.IntRange(min=4), default=24, show_default=True,
              help='Number of light fields')
@click.option('--shape', type=SHAPE, default=TINY_INPUT, show_default=True, help='Shape of every light field')
@click.option('--distortions', default=Distortion.BLUR.value, show_default=True,
              help=f'Comma separated distortions, cycled over the entries ({", ".join(d.value for d in Distortion)})')
@command_config
def synth_cmd(cfg: Config, count: int, shape: LfShape, distortions: str):
    """Generates a labelled synthetic dataset (LFT1 tensors, labels.csv, features.csv) in --out."""
    try:
        chosen = [Distortion(name.strip()) for name in distortions.split(',') if name.strip()]
    except ValueError as e:
        raise click.BadParameter(str(e), param_hint='--distortions') from e
    entries = synth_dataset(count, shape, cfg.seed, chosen)
    labels = save_dataset(entries, cfg.out)
    click.echo(f'Wrote {len(entries)} light fields of shape {shape} to {labels.parent}')


@cli.command(name='augment')
@click.option('--in', 'source', type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True,
              help='Light field to augment (.lft, or a .json subview manifest)')
@command_config
def augment_cmd(cfg: Config, source: Path):
    """Writes the eight rotated and flipped variants of a light field as LFT1 files."""
    cfg.out.mkdir(parents=True, exist_ok=True)
    for name, variant in zip(AUGMENT_NAMES, augment(read_lfi(source))):
        path = cfg.out / f'{source.stem}.{name}.lft'
        write_lft(variant, path)
        logger.debug('Wrote %s', path)
    click.echo(f'Wrote {len(AUGMENT_NAMES)} variants of {source} to {cfg.out}')


@cli.command(name='subviews')
@click.option('--in', 'source', type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True,
              help='Light field to export (.lft or .json)')
@click.option('--crop', type=SHAPE, default=None, help='Center crop to this shape first')
@command_config
def subviews_cmd(cfg: Config, source: Path, crop: Optional[LfShape]):
    """Exports a light field as one PNG per subview plus a manifest.json that reads it back."""
    lfi = read_lfi(source)
    if crop is not None:
        lfi = trim_reshape(lfi, crop)
    manifest = save_subviews(lfi, cfg.out, source.stem)
    click.echo(f'Wrote {lfi.shape.u * lfi.shape.v} subviews and {manifest}')
