import pytest
import yaml

from lib.config_safe_loader import ConfigSafeLoader, load_config
from lib.lf_train import BadConfig, TrainConfig


def test_defaults_build_a_training_config():
    settings = load_config()
    assert set(settings) == {'train', 'model', 'data', 'ablation'}
    assert TrainConfig.from_mapping(settings['train']) == TrainConfig()
    assert settings['data']['ratio'] == 0.8


def test_overlay_replaces_single_keys(tmp_path):
    overlay = tmp_path / 'quick.yaml'
    overlay.write_text('train:\n  batches: 3\nmodel:\n  dropout: 0.0\n')
    settings = load_config(overlay)
    assert settings['train']['batches'] == 3
    assert settings['train']['m'] == 2
    assert settings['model']['dropout'] == 0.0


def test_overlay_rejects_unknown_names(tmp_path):
    section = tmp_path / 'section.yaml'
    section.write_text('optimizer:\n  lr: 0.1\n')
    with pytest.raises(BadConfig, match=r"unknown section 'optimizer'"):
        load_config(section)
    key = tmp_path / 'key.yaml'
    key.write_text('train:\n  momentum: 0.9\n')
    with pytest.raises(BadConfig):
        load_config(key)
    flat = tmp_path / 'flat.yaml'
    flat.write_text('- 1\n- 2\n')
    with pytest.raises(BadConfig):
        load_config(flat)


def test_empty_overlay_keeps_defaults(tmp_path):
    empty = tmp_path / 'empty.yaml'
    empty.write_text('')
    assert load_config(empty) == load_config()


def test_loader_leaves_dates_as_strings():
    assert yaml.load('when: 2021-03-04', Loader=ConfigSafeLoader) == {'when': '2021-03-04'}
