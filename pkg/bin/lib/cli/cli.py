import dataclasses
import functools
import logging
from pathlib import Path
from typing import Callable, Optional

import click

from lib.env import Config, Scale
from lib.lf_autodiff import AutodiffError
from lib.lf_cost import CostError
from lib.lf_data import DataError
from lib.lf_features import FeatureError
from lib.lf_model import ModelError
from lib.lf_ops import LfOpError
from lib.lf_tensor import LfShape, LfTensorError
from lib.lf_train import TrainError
from lib.metrics import MetricError

LIBRARY_ERRORS = (LfTensorError, LfOpError, AutodiffError, CostError, FeatureError, ModelError,
                  DataError, TrainError, MetricError)


@click.group()
@click.option('--seed', type=int, default=0, show_default=True, help='Seed for every random choice')
@click.option('--scale', type=click.Choice([scale.value for scale in Scale]), default=Scale.TINY.value,
              show_default=True, help='Model scale: the published layout (full) or the desk-scale shrink (tiny)')
@click.option('--out', type=click.Path(file_okay=False, path_type=Path), default=Path('out'), show_default=True,
              help='Directory receiving the output files')
@click.option('--threads', type=click.IntRange(min=0), default=0, envvar='LF_THREADS', show_envvar=True,
              help='Cap on worker threads; 0 uses every CPU')
@click.option("--debug/--no-debug", help='Turn on debugging')
@click.pass_context
def cli(ctx: click.Context, seed: int, scale: str, out: Path, threads: int, debug: bool):
    ctx.obj = Config(seed=seed, scale=Scale(scale), out=out, threads=threads)
    logging.basicConfig(level=logging.DEBUG if debug else logging.INFO,
                        format='%(asctime)s %(name)s %(levelname)s %(message)s')


_COMMON_OPTIONS = (
    click.option('--seed', 'seed_override', type=int, default=None, help='Overrides the global --seed'),
    click.option('--scale', 'scale_override', type=click.Choice([scale.value for scale in Scale]), default=None,
                 help='Overrides the global --scale'),
    click.option('--out', 'out_override', type=click.Path(file_okay=False, path_type=Path), default=None,
                 help='Overrides the global --out'),
    click.option('--threads', 'threads_override', type=click.IntRange(min=0), default=None,
                 help='Overrides the global --threads'),
)


def command_config(fn: Callable) -> Callable:
    """Accepts the global options after the command name too, passes the merged Config first
    and turns library errors into exit status 1."""

    @functools.wraps(fn)
    def wrapper(*args, seed_override: Optional[int], scale_override: Optional[str], out_override: Optional[Path],
                threads_override: Optional[int], **kwargs):
        cfg: Config = click.get_current_context().find_object(Config)
        overrides = {'seed': seed_override, 'out': out_override, 'threads': threads_override,
                     'scale': Scale(scale_override) if scale_override else None}
        cfg = dataclasses.replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
        try:
            return fn(cfg, *args, **kwargs)
        except LIBRARY_ERRORS as e:
            raise click.ClickException(f'{type(e).__name__}: {e}') from e

    for option in reversed(_COMMON_OPTIONS):
        wrapper = option(wrapper)
    return wrapper


class ShapeParam(click.ParamType):
    name = 'U,V,X,Y,C'

    def convert(self, value, param, ctx):
        if isinstance(value, LfShape):
            return value
        try:
            return LfShape.parse(value)
        except LfTensorError as e:
            self.fail(str(e), param, ctx)


SHAPE = ShapeParam()
