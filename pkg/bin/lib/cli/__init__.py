"""Importing a sibling module registers its commands on `cli`."""
import importlib
from pathlib import Path

from .cli import cli

COMMAND_MODULES = sorted(path.stem for path in Path(__file__).parent.glob('*.py')
                         if path.stem not in ('__init__', 'cli'))

for module in COMMAND_MODULES:
    importlib.import_module(f'.{module}', __name__)
