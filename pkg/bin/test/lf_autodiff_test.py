import numpy as np
import pytest

from lib.lf_autodiff import (CHECK_INPUT, INPUT, SeedShapeMismatch, backward, check_model, checked_ops, forward_record,
                             grad_check, relative_error)
from lib.lf_model import HEAD_NAMES, TRUNK, AblationKind, build_ablation, run_model
from lib.lf_ops import LayerKind, LayerSpec
from lib.lf_tensor import LfShape

TOLERANCE = 1e-4


@pytest.mark.parametrize('name', sorted(checked_ops()))
def test_backward_matches_central_differences(name):
    op = checked_ops()[name]
    for seed in range(5):
        x = np.random.default_rng(seed).standard_normal(CHECK_INPUT.dims)
        assert grad_check(op, x, eps=1e-5, seed=seed) <= TOLERANCE


def test_forward_record_matches_inference():
    model = build_ablation(AblationKind.LF_DSC_ASC, LfShape(3, 3, 16, 16, 3), channels=4, blocks=2, seed=3)
    x = np.random.default_rng(0).standard_normal(model.input_shape.dims)
    recorded, tape = forward_record(model, x)
    expected = run_model(model, x)
    assert set(recorded) == set(HEAD_NAMES)
    for name in HEAD_NAMES:
        assert np.array_equal(recorded[name], expected[name])
    assert len(tape) == len(list(model.layers()))


def test_whole_network_directional_derivative():
    model = build_ablation(AblationKind.LF_DSC_ASC, LfShape(3, 3, 16, 16, 3), channels=4, blocks=2, seed=4)
    rng = np.random.default_rng(1)
    x = rng.standard_normal(model.input_shape.dims)
    outputs, tape = forward_record(model, x)
    seeds = {name: rng.standard_normal(outputs[name].shape) for name in HEAD_NAMES}
    grads = backward(tape, seeds)
    params = model.parameters()
    direction = {key: rng.standard_normal(value.shape) for key, value in params.items()}

    def loss(eps):
        shifted = model.with_parameters({key: params[key] + eps * direction[key] for key in params})
        out = run_model(shifted, x)
        return sum(float(np.sum(out[name] * seeds[name])) for name in HEAD_NAMES)

    eps = 1e-6
    numeric = (loss(eps) - loss(-eps)) / (2 * eps)
    analytic = sum(float(np.sum(grads[key] * direction[key])) for key in params)
    assert analytic == pytest.approx(numeric, rel=1e-5)
    assert grads[INPUT].shape == x.shape


def test_dropout_mask_scales_kept_units_in_training():
    model = check_model(LayerSpec(LayerKind.DROPOUT, rate=0.5), CHECK_INPUT, np.random.default_rng(0))
    x = np.ones(CHECK_INPUT.dims)
    inference, _ = forward_record(model, x)
    assert np.array_equal(inference[TRUNK], x)
    training, tape = forward_record(model, x, training=True, rng=np.random.default_rng(2))
    assert set(np.unique(training[TRUNK])) <= {0.0, 2.0}
    grads = backward(tape, {TRUNK: np.ones(CHECK_INPUT.dims)})
    assert np.array_equal(grads[INPUT], training[TRUNK])


def test_seeds_must_match_outputs():
    model = check_model(LayerSpec(LayerKind.RELU), CHECK_INPUT, np.random.default_rng(0))
    _, tape = forward_record(model, np.zeros(CHECK_INPUT.dims))
    with pytest.raises(SeedShapeMismatch):
        backward(tape, {TRUNK: np.zeros(3)})
    with pytest.raises(SeedShapeMismatch):
        backward(tape, {'primary': np.zeros(CHECK_INPUT.dims)})


def test_residual_check_adds_a_pointwise_branch():
    model = check_model(LayerSpec(LayerKind.RESIDUAL_ADD, skip=0), CHECK_INPUT, np.random.default_rng(0))
    assert [layer.kind for layer in model.trunk] == [LayerKind.POINTWISE, LayerKind.RESIDUAL_ADD]


def test_small_gradients_are_compared_relatively():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(2e-6, 1e-6) == pytest.approx(0.5)
    assert relative_error(1e-6, 0.0) == pytest.approx(1.0)
    assert relative_error(1e-10, 0.0) == pytest.approx(1e-2)
