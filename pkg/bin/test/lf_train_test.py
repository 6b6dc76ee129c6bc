import numpy as np
import pytest

from lib.checkpoint import decode, encode
from lib.env import Scale
from lib.lf_autodiff import INPUT, backward, forward_record
from lib.lf_data import EmptyDataset, augment_entries, split, synth_dataset
from lib.lf_model import PRIMARY, TINY_INPUT, build_alas_dads, prepare_input
from lib.lf_tensor import LfShape
from lib.lf_train import (IMPROVEMENT, AdamHyper, BadConfig, OptimizerState, ShapeMismatch, TrainConfig, _Draws,
                          _Targets, adam_amsgrad_step, batch_loss, evaluate, evaluate_by_distortion, summarize, train)

SMALL = LfShape(3, 3, 16, 16, 3)


@pytest.fixture(scope='module')
def dataset():
    return synth_dataset(6, SMALL, seed=1)


def test_first_adam_step_moves_by_the_learning_rate():
    params = {'w': np.array([1.0, -2.0, 0.5])}
    grads = {'w': np.array([0.3, -4.0, 0.0])}
    hyper = AdamHyper(lr=0.1)
    updated, state = adam_amsgrad_step(params, grads, OptimizerState(), hyper)
    expected = params['w'] - 0.1 * grads['w'] / (np.abs(grads['w']) + hyper.eps)
    assert np.allclose(updated['w'], expected, rtol=1e-12)
    assert state.step == 1


def test_amsgrad_keeps_the_largest_second_moment():
    params = {'w': np.array([0.0])}
    hyper = AdamHyper(lr=0.01)
    _, state = adam_amsgrad_step(params, {'w': np.array([10.0])}, OptimizerState(), hyper)
    peak = state.v_max['w'].copy()
    _, state = adam_amsgrad_step(params, {'w': np.array([0.1])}, state, hyper)
    assert state.v['w'][0] < peak[0]
    assert state.v_max['w'][0] == peak[0]
    assert state.step == 2


def test_adam_needs_matching_gradients():
    with pytest.raises(ShapeMismatch):
        adam_amsgrad_step({'w': np.zeros(2)}, {'w': np.zeros(3)}, OptimizerState(), AdamHyper())
    with pytest.raises(ShapeMismatch):
        adam_amsgrad_step({'w': np.zeros(2)}, {}, OptimizerState(), AdamHyper())


def test_train_config_validation():
    assert TrainConfig().hyper == AdamHyper(1e-4, 0.9, 0.999, 1e-8)
    assert TrainConfig.from_mapping({'m': '3', 'lr': '0.001'}) == TrainConfig(m=3, lr=0.001)
    with pytest.raises(BadConfig, match='Unknown training settings: momentum'):
        TrainConfig.from_mapping({'momentum': 0.9})
    with pytest.raises(BadConfig):
        TrainConfig(m=0)
    with pytest.raises(BadConfig):
        TrainConfig(beta1=1.0)
    with pytest.raises(BadConfig):
        TrainConfig(lam=-0.1)


def test_batch_loss_without_auxiliary_weight_only_uses_the_primary_head(dataset):
    model = build_alas_dads(SMALL, Scale.TINY, seed=2)
    targets = _Targets(dataset, None)
    _, grads = batch_loss(model, targets, [0], 0.0, with_grads=True)
    outputs, tape = forward_record(model, prepare_input(dataset[0].lfi))
    primary_only = backward(tape, {PRIMARY: 2.0 * (outputs[PRIMARY] - dataset[0].label.score)})
    primary_only.pop(INPUT)
    for key, value in primary_only.items():
        assert np.allclose(grads[key], value, rtol=1e-12, atol=1e-15)
    _, weighted = batch_loss(model, targets, [0], 0.5, with_grads=True)
    assert not np.allclose(weighted['trunk.0.weight'], grads['trunk.0.weight'])


def test_training_is_deterministic_and_records_history(dataset):
    model = build_alas_dads(SMALL, Scale.TINY, seed=3)
    config = TrainConfig(m=2, n=2, p=2, l=3, batches=2, lr=1e-3, seed=5)
    first, history = train(model, dataset, config)
    second, again = train(model, dataset, config)
    assert history == again
    for key, value in first.parameters().items():
        assert np.array_equal(value, second.parameters()[key])
    assert {row.batch for row in history} == {1, 2}
    assert all(1 <= row.epoch <= 3 for row in history)
    assert first.label_stats is not None
    assert any(not np.array_equal(value, model.parameters()[key]) for key, value in first.parameters().items())


def test_trained_models_reload_bitwise(dataset):
    model = build_alas_dads(SMALL, Scale.TINY, seed=4)
    trained, _ = train(model, dataset, TrainConfig(m=2, n=2, l=2, batches=1, lr=1e-3))
    reloaded = decode(encode(trained))
    for key, value in trained.parameters().items():
        assert np.array_equal(reloaded.parameters()[key], value)


def test_replicas_synchronise(dataset):
    model = build_alas_dads(SMALL, Scale.TINY, seed=6)
    config = TrainConfig(m=2, n=2, l=2, batches=2, replicas=2, sync_every=1, workers=2, lr=1e-3)
    trained, history = train(model, dataset, config)
    assert {row.replica for row in history} == {0, 1}
    summary = summarize(trained, history, dataset[:2], seconds=0.0)
    assert summary.batches == 2
    assert summary.test_loss is not None and summary.test_loss >= 0


def test_evaluation(dataset):
    model = build_alas_dads(SMALL, Scale.TINY, seed=7)
    metrics = evaluate(model, dataset)
    assert metrics.rmse >= 0
    groups = evaluate_by_distortion(model, dataset)
    assert list(groups) == ['blur']
    assert groups['blur'][0] == len(dataset)
    with pytest.raises(EmptyDataset):
        evaluate(model, [])


def test_training_rejects_mismatched_inputs(dataset):
    model = build_alas_dads(LfShape(3, 3, 32, 32, 3), Scale.TINY)
    with pytest.raises(ShapeMismatch):
        train(model, dataset, TrainConfig(batches=1))


@pytest.mark.slow
def test_training_smoke_on_blurred_scenes():
    entries = synth_dataset(64, TINY_INPUT, seed=11)
    train_set, test_set = split(entries, 0.8, seed=11)
    model = build_alas_dads(TINY_INPUT, Scale.TINY, seed=11)
    trained, history = train(model, augment_entries(train_set), TrainConfig(seed=11))
    first = np.mean([row.train_loss for row in history if row.batch <= 5])
    last = np.mean([row.train_loss for row in history if row.batch > 95])
    assert last <= 0.5 * first
    assert evaluate(trained, test_set).srocc >= 0.8


@pytest.mark.slow
def test_auxiliary_labels_help_validation():
    entries = synth_dataset(64, TINY_INPUT, seed=12)
    train_set, _ = split(entries, 0.8, seed=12)
    wins = 0
    for seed in range(3):
        model = build_alas_dads(TINY_INPUT, Scale.TINY, seed=seed)
        _, with_aux = train(model, train_set, TrainConfig(seed=seed, lam=0.01))
        _, without = train(model, train_set, TrainConfig(seed=seed, lam=0.0))
        wins += with_aux[-1].val_loss <= without[-1].val_loss
    assert wins >= 2


@pytest.mark.parametrize('size,count', [(3, 2), (5, 2), (7, 3), (4, 4), (2, 5)])
def test_batches_never_repeat_an_entry(size, count):
    for seed in range(50):
        draws = _Draws(size, np.random.default_rng(seed))
        seen = []
        for _ in range(6):
            batch = draws.take(count)
            assert len(batch) == min(count, size)
            assert len(set(batch)) == len(batch)
            assert all(0 <= i < size for i in batch)
            seen.extend(batch)
        assert set(seen) == set(range(size))


def expected_epochs(val_losses, patience):
    best, stale = float('inf'), 0
    for epoch, loss in enumerate(val_losses, start=1):
        if loss < best - IMPROVEMENT:
            best, stale = loss, 0
        else:
            stale += 1
            if stale >= patience:
                return epoch
    return len(val_losses)


@pytest.mark.parametrize('patience', [1, 2])
def test_early_stopping_follows_the_validation_loss(dataset, patience):
    model = build_alas_dads(SMALL, Scale.TINY, seed=8)
    config = TrainConfig(m=2, n=2, p=patience, l=6, batches=3, lr=5e-2, seed=2)
    _, history = train(model, dataset, config)
    for batch in range(1, 4):
        rows = [row for row in history if row.batch == batch]
        assert [row.epoch for row in rows] == list(range(1, len(rows) + 1))
        assert len(rows) <= config.l
        assert len(rows) == expected_epochs([row.val_loss for row in rows], patience)
