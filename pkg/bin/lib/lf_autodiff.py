"""Reverse-mode differentiation over a recorded tape of layer executions."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Tuple, Union

import numpy as np

from lib.lf_model import TRUNK, ModelSpec, ShapeChainBroken, run_model
from lib.lf_ops import (LayerKind, LayerSpec, LfOpError, conv_kernel_4d, conv_window, iter_taps,
                        max_pool_array, run_array)
from lib.lf_tensor import LfShape, LfTensor

logger = logging.getLogger(__name__)

INPUT = 'input'
INPUT_NODE = -1
RELU_KINK_MARGIN = 0.1
# Gradients smaller than this are compared in absolute terms.
GRADIENT_FLOOR = 1e-8

Gradients = Dict[str, np.ndarray]
ParamGrads = Dict[str, np.ndarray]


class AutodiffError(RuntimeError):
    pass


class SeedShapeMismatch(AutodiffError):
    pass


@dataclass
class Node:
    layer: LayerSpec
    prefix: str
    parents: Tuple[int, ...]
    inputs: np.ndarray
    value: np.ndarray
    mask: Optional[np.ndarray] = None


@dataclass
class Tape:
    """Executed layers in topological order; parent id -1 is the network input."""
    input: np.ndarray
    nodes: List[Node] = field(default_factory=list)
    outputs: Dict[str, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.nodes)

    def value(self, node_id: int) -> np.ndarray:
        return self.input if node_id == INPUT_NODE else self.nodes[node_id].value


def _as_array(x: Union[LfTensor, np.ndarray]) -> np.ndarray:
    return x.array if isinstance(x, LfTensor) else np.asarray(x, dtype=np.float64)


def _record(tape: Tape, layer: LayerSpec, prefix: str, parents: Tuple[int, ...], training: bool,
            rng: Optional[np.random.Generator]) -> int:
    x = tape.value(parents[0])
    skip = tape.value(parents[1]) if len(parents) > 1 else None
    mask = None
    if layer.kind == LayerKind.DROPOUT and training and layer.rate > 0:
        if rng is None:
            raise AutodiffError("Training-mode dropout needs a random generator")
        mask = (rng.random(x.shape) >= layer.rate).astype(np.float64)
    try:
        value = run_array(layer, x, None, skip, mask)
    except LfOpError as e:
        raise ShapeChainBroken(f"{prefix} ({layer.describe()}) on input {x.shape}: {e}") from e
    tape.nodes.append(Node(layer, prefix, parents, x, value, mask))
    return len(tape.nodes) - 1


def forward_record(model: ModelSpec, x: Union[LfTensor, np.ndarray], training: bool = False,
                   rng: Optional[np.random.Generator] = None) -> Tuple[Dict[str, np.ndarray], Tape]:
    """Runs the model and keeps every activation backward needs.

    Outputs are keyed by head name; a model without heads outputs its trunk under 'trunk'.
    """
    array = _as_array(x)
    if array.shape != model.input_shape.dims:
        raise ShapeChainBroken(f"Model takes {model.input_shape}, got input of shape {array.shape}")
    tape = Tape(array)
    activation_nodes = [INPUT_NODE]
    for i, layer in enumerate(model.trunk):
        parents: Tuple[int, ...] = (activation_nodes[-1],)
        if layer.kind == LayerKind.RESIDUAL_ADD:
            if not 0 <= layer.skip <= i:
                raise ShapeChainBroken(f"{TRUNK}.{i} adds activation {layer.skip}, which is not computed yet")
            parents += (activation_nodes[layer.skip],)
        activation_nodes.append(_record(tape, layer, f'{TRUNK}.{i}', parents, training, rng))
    trunk_node = activation_nodes[-1]
    if not model.heads:
        tape.outputs[TRUNK] = trunk_node
    for name, head in model.heads.items():
        node = trunk_node
        for j, layer in enumerate(head):
            node = _record(tape, layer, f'head.{name}.{j}', (node,), training, rng)
        tape.outputs[name] = node
    return {name: tape.value(node) for name, node in tape.outputs.items()}, tape


BackwardFn = Callable[[Node, np.ndarray], Tuple[List[np.ndarray], ParamGrads]]
_BACKWARD: Dict[LayerKind, BackwardFn] = {}


def _backward_for(*kinds: LayerKind):
    def register(fn: BackwardFn) -> BackwardFn:
        for kind in kinds:
            _BACKWARD[kind] = fn
        return fn
    return register


def _bias_grad(layer: LayerSpec, grads: ParamGrads, gout: np.ndarray) -> ParamGrads:
    if layer.bias is not None:
        grads['bias'] = gout.reshape(-1, layer.co).sum(axis=0)
    return grads


@_backward_for(LayerKind.SUBVIEW_2D, LayerKind.POINTWISE, LayerKind.ANGLEWISE_H, LayerKind.ANGLEWISE_V,
               LayerKind.FULL_4D)
def _conv_backward(node: Node, gout: np.ndarray) -> Tuple[List[np.ndarray], ParamGrads]:
    layer, x = node.layer, node.inputs
    kernel = conv_kernel_4d(layer)
    window = conv_window(layer, x.shape)
    xp = np.pad(x, window.pad_width)
    gxp = np.zeros_like(xp)
    gkernel = np.zeros_like(kernel)
    for index, taps in iter_taps(window, 0, None):
        gkernel[index] = np.tensordot(xp[taps], gout, axes=([0, 1, 2, 3], [0, 1, 2, 3]))
        gxp[taps] += np.tensordot(gout, kernel[index], axes=([4], [1]))
    grads = _bias_grad(layer, {'weight': gkernel.reshape(layer.weight_shape)}, gout)
    return [gxp[window.unpad(x.shape[:4])]], grads


@_backward_for(LayerKind.DEPTHWISE)
def _depthwise_backward(node: Node, gout: np.ndarray) -> Tuple[List[np.ndarray], ParamGrads]:
    layer, x = node.layer, node.inputs
    weights = layer.weights
    window = conv_window(layer, x.shape)
    xp = np.pad(x, window.pad_width)
    gxp = np.zeros_like(xp)
    gweights = np.zeros_like(weights)
    for (_, _, dx, dy), taps in iter_taps(window, 0, None):
        gweights[dx, dy] = np.sum(xp[taps] * gout, axis=(0, 1, 2, 3))
        gxp[taps] += gout * weights[dx, dy]
    grads = _bias_grad(layer, {'weight': gweights}, gout)
    return [gxp[window.unpad(x.shape[:4])]], grads


@_backward_for(LayerKind.MAX_POOL_SPATIAL)
def _max_pool_backward(node: Node, gout: np.ndarray) -> Tuple[List[np.ndarray], ParamGrads]:
    x, s = node.inputs, node.layer.stride
    _, argmax = max_pool_array(x, s)
    u, v, ox, oy, c = gout.shape
    gwindows = np.zeros((u, v, ox, oy, c, s * s))
    np.put_along_axis(gwindows, argmax[..., None], gout[..., None], axis=-1)
    gx = np.zeros_like(x)
    gx[:, :, :ox * s, :oy * s, :] = (gwindows.reshape(u, v, ox, oy, c, s, s)
                                     .transpose(0, 1, 2, 5, 3, 6, 4)
                                     .reshape(u, v, ox * s, oy * s, c))
    return [gx], {}


@_backward_for(LayerKind.RELU)
def _relu_backward(node: Node, gout: np.ndarray) -> Tuple[List[np.ndarray], ParamGrads]:
    return [gout * (node.inputs > 0)], {}


@_backward_for(LayerKind.RESIDUAL_ADD)
def _residual_backward(node: Node, gout: np.ndarray) -> Tuple[List[np.ndarray], ParamGrads]:
    return [gout, gout], {}


@_backward_for(LayerKind.GLOBAL_AVG_POOL)
def _gap_backward(node: Node, gout: np.ndarray) -> Tuple[List[np.ndarray], ParamGrads]:
    x = node.inputs
    positions = x.size // x.shape[4]
    return [np.broadcast_to(gout / positions, x.shape).copy()], {}


@_backward_for(LayerKind.FLATTEN)
def _flatten_backward(node: Node, gout: np.ndarray) -> Tuple[List[np.ndarray], ParamGrads]:
    return [gout.reshape(node.inputs.shape)], {}


@_backward_for(LayerKind.DENSE)
def _dense_backward(node: Node, gout: np.ndarray) -> Tuple[List[np.ndarray], ParamGrads]:
    layer, x = node.layer, node.inputs
    grads = _bias_grad(layer, {'weight': np.outer(x, gout)}, gout)
    return [layer.weights @ gout], grads


@_backward_for(LayerKind.DROPOUT)
def _dropout_backward(node: Node, gout: np.ndarray) -> Tuple[List[np.ndarray], ParamGrads]:
    if node.mask is None:
        return [gout], {}
    return [gout * node.mask / (1.0 - node.layer.rate)], {}


def _accumulate(store: Dict, key, value: np.ndarray) -> None:
    if key in store:
        store[key] = store[key] + value
    else:
        store[key] = value


def backward(tape: Tape, seeds: Mapping[str, np.ndarray]) -> Gradients:
    """Gradients of sum(seed · output) over the seeded outputs, for every parameter and the input."""
    pending: Dict[int, np.ndarray] = {}
    for name, seed in seeds.items():
        if name not in tape.outputs:
            raise SeedShapeMismatch(f"Seed for unknown output '{name}', outputs are {sorted(tape.outputs)}")
        seed = np.asarray(seed, dtype=np.float64)
        expected = tape.value(tape.outputs[name]).shape
        if seed.shape != expected:
            raise SeedShapeMismatch(f"Seed for '{name}' has shape {seed.shape}, output has {expected}")
        _accumulate(pending, tape.outputs[name], seed)

    gradients: Gradients = {}
    for node in tape.nodes:
        if node.layer.weights is not None:
            gradients[f'{node.prefix}.weight'] = np.zeros_like(node.layer.weights)
        if node.layer.bias is not None:
            gradients[f'{node.prefix}.bias'] = np.zeros_like(node.layer.bias)

    for node_id in range(len(tape.nodes) - 1, -1, -1):
        gout = pending.pop(node_id, None)
        if gout is None:
            continue
        node = tape.nodes[node_id]
        parent_grads, param_grads = _BACKWARD[node.layer.kind](node, gout)
        for parent, grad in zip(node.parents, parent_grads):
            _accumulate(pending, parent, grad)
        for key, grad in param_grads.items():
            gradients[f'{node.prefix}.{key}'] += grad
    gradients[INPUT] = pending.pop(INPUT_NODE, np.zeros_like(tape.input))
    return gradients


def _random_parameters(layer: LayerSpec, rng: np.random.Generator) -> LayerSpec:
    if not layer.is_parametric or layer.weights is not None:
        return layer
    weights = rng.standard_normal(layer.weight_shape) * 0.5
    bias = rng.standard_normal(layer.co) * 0.1 if layer.kind in (LayerKind.POINTWISE, LayerKind.DENSE) else None
    return layer.with_params(weights, bias)


def check_model(op: LayerSpec, input_shape: LfShape, rng: np.random.Generator) -> ModelSpec:
    """Smallest model exercising `op` on a light field: residual adds get a pointwise branch, dense a flatten."""
    layer = _random_parameters(op, rng)
    if layer.kind == LayerKind.RESIDUAL_ADD:
        channels = input_shape.c
        branch = _random_parameters(LayerSpec(LayerKind.POINTWISE, channels, channels), rng)
        layers: Tuple[LayerSpec, ...] = (branch, LayerSpec(LayerKind.RESIDUAL_ADD, skip=0))
    elif layer.kind == LayerKind.DENSE:
        layers = (LayerSpec(LayerKind.FLATTEN), layer)
    else:
        layers = (layer,)
    return ModelSpec(input_shape, layers)


CHECK_INPUT = LfShape(3, 3, 6, 6, 2)


def checked_ops(input_shape: LfShape = CHECK_INPUT) -> Dict[str, LayerSpec]:
    """One small layer of every kind the backward registry covers, sized for `input_shape`."""
    c = input_shape.c
    return {
        'subview2d': LayerSpec(LayerKind.SUBVIEW_2D, c, c + 1, k=3),
        'subview2d-s2': LayerSpec(LayerKind.SUBVIEW_2D, c, c + 1, k=3, stride=2),
        'depthwise': LayerSpec(LayerKind.DEPTHWISE, c, c, k=3),
        'depthwise-s2': LayerSpec(LayerKind.DEPTHWISE, c, c, k=3, stride=2),
        'pointwise': LayerSpec(LayerKind.POINTWISE, c, c + 1),
        'anglewise-h': LayerSpec(LayerKind.ANGLEWISE_H, c, c + 1, k=3, a=3),
        'anglewise-v': LayerSpec(LayerKind.ANGLEWISE_V, c, c + 1, k=3, a=3),
        'full4d': LayerSpec(LayerKind.FULL_4D, c, c, k=3, a=3),
        'maxpool': LayerSpec(LayerKind.MAX_POOL_SPATIAL, stride=2),
        'relu': LayerSpec(LayerKind.RELU),
        'residual': LayerSpec(LayerKind.RESIDUAL_ADD, skip=0),
        'gap': LayerSpec(LayerKind.GLOBAL_AVG_POOL),
        'flatten': LayerSpec(LayerKind.FLATTEN),
        'dense': LayerSpec(LayerKind.DENSE, input_shape.size, 3),
        'dropout': LayerSpec(LayerKind.DROPOUT, rate=0.2),
    }


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), GRADIENT_FLOOR)


def grad_check(op: LayerSpec, x: Union[LfTensor, np.ndarray], eps: float = 1e-5, seed: int = 0) -> float:
    """Largest relative gap between backward and central differences over inputs and parameters.

    ReLU inputs within 0.1 of the kink are skipped.
    """
    array = _as_array(x)
    rng = np.random.default_rng(seed)
    model = check_model(op, LfShape.of(array.shape), rng)
    outputs, tape = forward_record(model, array)
    projection = rng.standard_normal(outputs[TRUNK].shape)
    analytic = backward(tape, {TRUNK: projection})

    def loss(m: ModelSpec, inp: np.ndarray) -> float:
        return float(np.sum(run_model(m, inp)[TRUNK] * projection))

    worst = 0.0
    for idx in np.ndindex(array.shape):
        if op.kind == LayerKind.RELU and abs(array[idx]) <= RELU_KINK_MARGIN:
            continue
        plus, minus = array.copy(), array.copy()
        plus[idx] += eps
        minus[idx] -= eps
        numeric = (loss(model, plus) - loss(model, minus)) / (2 * eps)
        worst = max(worst, relative_error(analytic[INPUT][idx], numeric))
    for pid, value in model.parameters().items():
        for idx in np.ndindex(value.shape):
            plus, minus = value.copy(), value.copy()
            plus[idx] += eps
            minus[idx] -= eps
            numeric = (loss(model.with_parameters({pid: plus}), array)
                       - loss(model.with_parameters({pid: minus}), array)) / (2 * eps)
            worst = max(worst, relative_error(analytic[pid][idx], numeric))
    logger.debug('grad_check %s on %s: max relative error %.3e', op.describe(), array.shape, worst)
    return worst
