import logging
from pathlib import Path
from typing import Any, Dict, Optional, Union

import yaml

from lib.lf_train import BadConfig

logger = logging.getLogger(__name__)

DEFAULTS = Path(__file__).resolve().parent.parent / 'yaml' / 'train.yaml'

Settings = Dict[str, Dict[str, Any]]


class ConfigSafeLoader(yaml.SafeLoader):
    """SafeLoader that leaves date-like scalars as strings."""

    @classmethod
    def remove_implicit_resolver(cls, tag_to_remove):
        if 'yaml_implicit_resolvers' not in cls.__dict__:
            cls.yaml_implicit_resolvers = cls.yaml_implicit_resolvers.copy()

        for first_letter, mappings in cls.yaml_implicit_resolvers.items():
            cls.yaml_implicit_resolvers[first_letter] = [(tag, regexp)
                                                         for tag, regexp in mappings
                                                         if tag != tag_to_remove]


ConfigSafeLoader.remove_implicit_resolver('tag:yaml.org,2002:timestamp')


def load_yaml(path: Union[str, Path]) -> Settings:
    path = Path(path)
    try:
        with path.open(encoding='utf-8') as f:
            loaded = yaml.load(f, Loader=ConfigSafeLoader)
    except (OSError, yaml.YAMLError) as e:
        raise BadConfig(f"Unable to read configuration {path}: {e}") from e
    if loaded is None:
        return {}
    if not isinstance(loaded, dict) or not all(isinstance(v, dict) for v in loaded.values()):
        raise BadConfig(f"{path} must map section names to mappings")
    return loaded


def load_config(overlay: Optional[Union[str, Path]] = None, defaults: Union[str, Path] = DEFAULTS) -> Settings:
    """Defaults from train.yaml, overlaid key by key by the optional user file."""
    settings = {section: dict(values) for section, values in load_yaml(defaults).items()}
    if overlay is None:
        return settings
    for section, values in load_yaml(overlay).items():
        if section not in settings:
            raise BadConfig(f"{overlay}: unknown section '{section}' (known: {', '.join(sorted(settings))})")
        unknown = sorted(set(values) - set(settings[section]))
        if unknown:
            raise BadConfig(f"{overlay}: unknown keys in '{section}': {', '.join(unknown)}")
        settings[section].update(values)
    logger.debug('Configuration after overlaying %s: %s', overlay, settings)
    return settings
