from unittest.mock import patch

import pytest
from click.testing import CliRunner

from lib.alas import main
from lib.cli import cli
from lib.csv_table import read_csv
from lib.lf_tensor import LfShape, read_lft


def run(*args):
    result = CliRunner().invoke(cli, [str(arg) for arg in args])
    return result


@pytest.fixture(name='synth_dir', scope='module')
def synth_dir_fixture(tmp_path_factory):
    out = tmp_path_factory.mktemp('synth')
    result = run('--seed', 3, 'synth', '--count', 6, '--shape', '3,3,16,16,3', '--distortions', 'blur,noise',
                 '--out', out)
    assert result.exit_code == 0, result.output
    return out


def test_synth_writes_a_dataset(synth_dir):
    rows = read_csv(synth_dir / 'labels.csv')
    assert len(rows) == 6
    assert {row['distortion'] for row in rows} == {'blur', 'noise'}
    assert read_lft(synth_dir / rows[0]['path']).shape == LfShape(3, 3, 16, 16, 3)


def test_cost_report_is_exact(tmp_path):
    result = run('--out', tmp_path, 'cost-report')
    assert result.exit_code == 0, result.output
    rows = read_csv(tmp_path / 'cost_report.csv')
    assert rows and all(row['analytic_macs'] == row['measured_macs'] for row in rows)
    summary = read_csv(tmp_path / 'cost_summary.csv')
    assert summary[0]['row'].endswith(':conv2d')


def test_ablation_without_data_compares_costs(tmp_path):
    result = run('ablation', '--out', tmp_path, '--channels', 4)
    assert result.exit_code == 0, result.output
    rows = read_csv(tmp_path / 'ablation.csv')
    assert [row['model'] for row in rows] == ['10-4D-Conv', '10-LF-DSC', '10-LF-ASC', '10-LF-DSC-ASC']
    assert [row['conv_blocks'] for row in rows] == ['10', '10', '10', '20']
    assert 'seconds' not in rows[0]


def test_gradcheck_passes_and_rejects_unknown_ops(tmp_path):
    result = run('--out', tmp_path, '--seed', 7, 'gradcheck', '--ops', 'gap,pointwise,maxpool', '--seeds', 2)
    assert result.exit_code == 0, result.output
    rows = read_csv(tmp_path / 'gradcheck.csv')
    assert [row['op'] for row in rows] == ['gap', 'pointwise', 'maxpool']
    assert all(row['passed'] == 'True' for row in rows)
    assert run('gradcheck', '--ops', 'conv9d').exit_code == 2


def test_features_and_augment(synth_dir, tmp_path):
    source = synth_dir / 'synth-0000.lft'
    result = run('features', source, '--out', tmp_path)
    assert result.exit_code == 0, result.output
    assert (tmp_path / 'features_meta.yaml').is_file()
    rows = (tmp_path / 'features.csv').read_text().splitlines()
    assert len(rows) == 3
    assert all(len(row.split(',')) == 2 + 36 for row in rows)
    angular = rows[2].split(',')
    assert angular[1] == 'angular'
    assert all(angular[2:10]) and not any(angular[10:])

    result = run('augment', '--in', source, '--out', tmp_path / 'aug')
    assert result.exit_code == 0, result.output
    assert len(list((tmp_path / 'aug').glob('*.lft'))) == 8


def test_subviews_export(synth_dir, tmp_path):
    result = run('subviews', '--in', synth_dir / 'synth-0001.lft', '--out', tmp_path)
    assert result.exit_code == 0, result.output
    assert len(list(tmp_path.glob('*.png'))) == 9
    assert (tmp_path / 'manifest.json').is_file()


def test_train_eval_predict(synth_dir, tmp_path):
    config = tmp_path / 'quick.yaml'
    config.write_text('train:\n  l: 1\n')
    result = run('train', '--data', synth_dir, '--config', config, '--batches', 1, '--ratio', 0.5, '--no-augment',
                 '--out', tmp_path)
    assert result.exit_code == 0, result.output
    assert (tmp_path / 'checkpoint.alas').is_file()
    history = read_csv(tmp_path / 'history.csv')
    assert [row['batch'] for row in history] == ['1']
    [summary] = read_csv(tmp_path / 'summary.csv')
    assert 'seconds' not in summary

    result = run('eval', '--checkpoint', tmp_path / 'checkpoint.alas', '--data', synth_dir, '--all',
                 '--by-distortion', '--out', tmp_path)
    assert result.exit_code == 0, result.output
    [metrics] = read_csv(tmp_path / 'metrics.csv')
    assert metrics['entries'] == '6'
    groups = read_csv(tmp_path / 'metrics_by_distortion.csv')
    assert [row['distortion'] for row in groups] == ['blur', 'noise']

    result = run('predict', '--checkpoint', tmp_path / 'checkpoint.alas', '--in', synth_dir / 'synth-0002.lft',
                 '--out', tmp_path)
    assert result.exit_code == 0, result.output
    assert len(read_csv(tmp_path / 'prediction.csv')) == 1 + 36 + 8


def test_library_errors_exit_with_status_one(synth_dir, tmp_path):
    bogus = tmp_path / 'bogus.alas'
    bogus.write_bytes(b'not a checkpoint')
    result = run('predict', '--checkpoint', bogus, '--in', synth_dir / 'synth-0000.lft', '--out', tmp_path)
    assert result.exit_code == 1
    assert 'BadCheckpoint' in result.output


def test_interrupt_ends_quietly(capsys):
    with patch('lib.alas.cli', side_effect=KeyboardInterrupt) as fake_cli:
        main()
    fake_cli.assert_called_once_with(prog_name='alas', auto_envvar_prefix='ALAS')
    assert capsys.readouterr().out == '\n'


def test_threads_come_from_the_environment(tmp_path):
    result = CliRunner().invoke(cli, ['--out', str(tmp_path), 'gradcheck', '--ops', 'gap', '--seeds', '1'],
                                env={'LF_THREADS': '2'})
    assert result.exit_code == 0, result.output
    assert CliRunner().invoke(cli, ['gradcheck', '--ops', 'gap'], env={'LF_THREADS': '-1'}).exit_code == 2


def test_help_lists_every_command():
    result = run('--help')
    assert result.exit_code == 0
    for command in ('cost-report', 'ablation', 'gradcheck', 'features', 'synth', 'augment', 'subviews', 'train',
                    'eval', 'predict'):
        assert command in result.output


def test_same_seed_gives_identical_files(tmp_path):
    config = tmp_path / 'quick.yaml'
    config.write_text('train:\n  l: 2\n')
    outputs = []
    for attempt in ('first', 'second'):
        data, out = tmp_path / attempt / 'data', tmp_path / attempt / 'out'
        result = run('--seed', 5, 'synth', '--count', 4, '--shape', '3,3,16,16,3', '--out', data)
        assert result.exit_code == 0, result.output
        result = run('--seed', 5, 'train', '--data', data, '--config', config, '--batches', 2, '--ratio', 0.5,
                     '--no-augment', '--out', out)
        assert result.exit_code == 0, result.output
        outputs.append({path.relative_to(tmp_path / attempt): path.read_bytes()
                        for path in sorted((tmp_path / attempt).rglob('*')) if path.is_file()})
    first, second = outputs
    assert set(first) == set(second)
    assert {path.name for path in first} >= {'labels.csv', 'features.csv', 'checkpoint.alas', 'history.csv',
                                              'summary.csv'}
    for path, content in first.items():
        assert second[path] == content, path
