"""Model assembly: the auxiliary-learning quality network, the ablation backbones and the losses."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from math import prod
from typing import Dict, Iterator, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from attr import dataclass as record

from lib.env import Scale
from lib.lf_features import ANGULAR_DIM, SPATIAL_DIM, LabelStats
from lib.lf_ops import (ArrayShape, LayerKind, LayerSpec, LfOpError, MacCounter, run_array,
                        trace_layer)
from lib.lf_tensor import LfShape, LfTensor, normalize

logger = logging.getLogger(__name__)

DEFAULT_LAMBDA = 0.01
DEFAULT_DROPOUT = 0.2
HIDDEN_UNITS = 256
FULL_INPUT = LfShape(7, 7, 434, 434, 3)
TINY_INPUT = LfShape(3, 3, 32, 32, 3)
MIN_TINY_SPATIAL = 16

PRIMARY = 'primary'
SPATIAL = 'spatial'
ANGULAR = 'angular'
HEAD_NAMES = (PRIMARY, SPATIAL, ANGULAR)
TRUNK = 'trunk'


class ModelError(RuntimeError):
    pass


class BadInputShape(ModelError):
    pass


class LengthMismatch(ModelError):
    pass


class DimensionMismatch(ModelError):
    pass


class ShapeMismatch(ModelError):
    pass


class ShapeChainBroken(ModelError):
    pass


class BadCheckpoint(ModelError):
    pass


class BlockKind(Enum):
    LF_DSC_S1 = 'LF-DSC-s1'
    LF_DSC_S2 = 'LF-DSC-s2'
    LF_ASC = 'LF-ASC'


class AblationKind(Enum):
    FULL_4D = '10-4D-Conv'
    LF_DSC = '10-LF-DSC'
    LF_ASC = '10-LF-ASC'
    LF_DSC_ASC = '10-LF-DSC-ASC'


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Immutable network: a trunk of layers and named heads hanging off the trunk output."""
    input_shape: LfShape
    trunk: Tuple[LayerSpec, ...]
    heads: Mapping[str, Tuple[LayerSpec, ...]] = field(default_factory=dict)
    lam: float = DEFAULT_LAMBDA
    scale: Scale = Scale.TINY
    label_stats: Optional[LabelStats] = None

    def layers(self) -> Iterator[Tuple[str, LayerSpec]]:
        """(parameter prefix, layer) for the trunk then every head."""
        for i, layer in enumerate(self.trunk):
            yield f'{TRUNK}.{i}', layer
        for name, head in self.heads.items():
            for j, layer in enumerate(head):
                yield f'head.{name}.{j}', layer

    def parameters(self) -> Dict[str, np.ndarray]:
        params: Dict[str, np.ndarray] = {}
        for prefix, layer in self.layers():
            if layer.weights is not None:
                params[f'{prefix}.weight'] = layer.weights
            if layer.bias is not None:
                params[f'{prefix}.bias'] = layer.bias
        return params

    def with_parameters(self, params: Mapping[str, np.ndarray]) -> ModelSpec:
        def rebuilt(prefix: str, layer: LayerSpec) -> LayerSpec:
            if not layer.is_parametric:
                return layer
            return layer.with_params(params.get(f'{prefix}.weight', layer.weights),
                                     params.get(f'{prefix}.bias', layer.bias))

        trunk = tuple(rebuilt(f'{TRUNK}.{i}', layer) for i, layer in enumerate(self.trunk))
        heads = {name: tuple(rebuilt(f'head.{name}.{j}', layer) for j, layer in enumerate(head))
                 for name, head in self.heads.items()}
        return replace(self, trunk=trunk, heads=heads)

    def with_label_stats(self, label_stats: Optional[LabelStats]) -> ModelSpec:
        return replace(self, label_stats=label_stats)


@record(frozen=True)
class BlockSpec:
    """A residual-aware group of layers. Stride-1 blocks carry a shortcut from the block input."""
    kind: BlockKind
    ci: int
    co: int
    k: int
    a: int = 1
    residual: bool = True

    def expand(self, first: int, rng: np.random.Generator, tag: str) -> List[LayerSpec]:
        if self.kind == BlockKind.LF_ASC:
            layers = [
                _init(LayerSpec(LayerKind.ANGLEWISE_H, self.ci, self.co, self.k, self.a, tag=tag), rng),
                LayerSpec(LayerKind.RELU, tag=tag),
                _init(LayerSpec(LayerKind.ANGLEWISE_V, self.co, self.co, self.k, self.a, tag=tag), rng),
            ]
        else:
            stride = 1 if self.kind == BlockKind.LF_DSC_S1 else 2
            layers = [
                _init(LayerSpec(LayerKind.POINTWISE, self.ci, self.ci, tag=tag), rng),
                LayerSpec(LayerKind.RELU, tag=tag),
                _init(LayerSpec(LayerKind.DEPTHWISE, self.ci, self.ci, self.k, stride=stride, tag=tag), rng),
                LayerSpec(LayerKind.RELU, tag=tag),
                _init(LayerSpec(LayerKind.POINTWISE, self.ci, self.co, tag=tag), rng),
            ]
        if self.residual and self.kind != BlockKind.LF_DSC_S2:
            if self.ci != self.co:
                raise ModelError(f"A residual {self.kind.value} block needs ci == co, got {self.ci} -> {self.co}")
            layers.append(LayerSpec(LayerKind.RESIDUAL_ADD, skip=first, tag=tag))
        layers.append(LayerSpec(LayerKind.RELU, tag=tag))
        return layers


def fan_in(layer: LayerSpec) -> int:
    shape = layer.weight_shape or (1,)
    if layer.kind == LayerKind.DEPTHWISE:
        return layer.k * layer.k
    return prod(shape) // layer.co


def _init(layer: LayerSpec, rng: np.random.Generator) -> LayerSpec:
    """He-style uniform weights rounded to float32 so checkpoints reload them exactly; zero biases."""
    shape = layer.weight_shape
    if shape is None:
        return layer
    limit = np.sqrt(6.0 / fan_in(layer))
    weights = rng.uniform(-limit, limit, size=shape).astype(np.float32).astype(np.float64)
    bias = np.zeros(layer.co) if layer.kind in (LayerKind.POINTWISE, LayerKind.DENSE) else None
    return layer.with_params(weights, bias)


class _TrunkBuilder:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.layers: List[LayerSpec] = []
        self._rows = 0

    def _tag(self, name: str) -> str:
        tag = f'{self._rows:02d}:{name}'
        self._rows += 1
        return tag

    def layer(self, name: str, spec: LayerSpec) -> None:
        self.layers.append(_init(replace(spec, tag=self._tag(name)), self.rng))

    def convs(self, name: str, *specs: LayerSpec) -> None:
        """One row of convolutions, each followed by a ReLU."""
        tag = self._tag(name)
        for spec in specs:
            self.layers.append(_init(replace(spec, tag=tag), self.rng))
            self.layers.append(LayerSpec(LayerKind.RELU, tag=tag))

    def block(self, name: str, block: BlockSpec) -> None:
        self.layers.extend(block.expand(len(self.layers), self.rng, self._tag(name)))


def _aux_head(channels: int, dim: int, rng: np.random.Generator, dropout: float) -> Tuple[LayerSpec, ...]:
    layers = [
        LayerSpec(LayerKind.GLOBAL_AVG_POOL),
        _init(LayerSpec(LayerKind.DENSE, channels, HIDDEN_UNITS), rng),
        LayerSpec(LayerKind.RELU),
    ]
    if dropout > 0:
        layers.append(LayerSpec(LayerKind.DROPOUT, rate=dropout))
    layers += [
        _init(LayerSpec(LayerKind.DENSE, HIDDEN_UNITS, HIDDEN_UNITS), rng),
        LayerSpec(LayerKind.RELU),
        _init(LayerSpec(LayerKind.DENSE, HIDDEN_UNITS, dim), rng),
    ]
    return tuple(layers)


def build_heads(trunk_shape: ArrayShape, rng: np.random.Generator,
                dropout: float = DEFAULT_DROPOUT) -> Dict[str, Tuple[LayerSpec, ...]]:
    channels = trunk_shape[4]
    return {
        PRIMARY: (LayerSpec(LayerKind.FLATTEN), _init(LayerSpec(LayerKind.DENSE, prod(trunk_shape), 1), rng)),
        SPATIAL: _aux_head(channels, SPATIAL_DIM, rng, dropout),
        ANGULAR: _aux_head(channels, ANGULAR_DIM, rng, dropout),
    }


def _trunk_output(input_shape: LfShape, trunk: Sequence[LayerSpec]) -> ArrayShape:
    trial = ModelSpec(input_shape, tuple(trunk))
    try:
        return trace_model(trial)[TRUNK]
    except ShapeChainBroken as e:
        raise BadInputShape(f"Input {input_shape} does not fit the network: {e}") from e


def build_alas_dads(input_shape: LfShape, scale: Scale = Scale.TINY, seed: int = 0,
                    lam: float = DEFAULT_LAMBDA, dropout: float = DEFAULT_DROPOUT) -> ModelSpec:
    """The quality network. Full scale is the published layout on 7×7×434×434×3 light fields.

    Tiny scale keeps the topology on small inputs: the stem runs at stride 1, the pooling
    after the anglewise stage at stride 2, channels grow 3 -> 6 -> 12 -> 24 and the final
    pointwise layer widens to 64.
    """
    if input_shape.c != 3:
        raise BadInputShape(f"Input needs 3 channels, got {input_shape.c}")
    if scale == Scale.FULL:
        if input_shape != FULL_INPUT:
            raise BadInputShape(f"Full scale needs input {FULL_INPUT}, got {input_shape}")
        stem_stride, first_pool, growth, widened, a = 2, 4, (3, 12, 48, 192), 1024, 7
    else:
        if min(input_shape.x, input_shape.y) < MIN_TINY_SPATIAL:
            raise BadInputShape(f"Tiny scale needs subviews of at least {MIN_TINY_SPATIAL} pixels, got {input_shape}")
        stem_stride, first_pool, growth, widened, a = 1, 2, (3, 6, 12, 24), 64, input_shape.u
    k = 4
    rng = np.random.default_rng(seed)
    builder = _TrunkBuilder(rng)
    builder.convs('conv2d', LayerSpec(LayerKind.SUBVIEW_2D, 3, 3, 3, stride=stem_stride))
    builder.block('aw-conv', BlockSpec(BlockKind.LF_ASC, 3, 3, k, a, residual=False))
    builder.block('aw-convbloc', BlockSpec(BlockKind.LF_ASC, 3, 3, k, a))
    builder.block('aw-convbloc', BlockSpec(BlockKind.LF_ASC, 3, 3, k, a))
    builder.layer('max-pool', LayerSpec(LayerKind.MAX_POOL_SPATIAL, stride=first_pool))
    for ci, co in zip(growth, growth[1:]):
        builder.block('dw-convbloc-s1', BlockSpec(BlockKind.LF_DSC_S1, ci, ci, k))
        builder.block('dw-convbloc-s2', BlockSpec(BlockKind.LF_DSC_S2, ci, co, k))
    builder.convs('pointwise', LayerSpec(LayerKind.POINTWISE, growth[-1], widened))
    builder.layer('max-pool', LayerSpec(LayerKind.MAX_POOL_SPATIAL, stride=2))
    trunk_shape = _trunk_output(input_shape, builder.layers)
    model = ModelSpec(input_shape, tuple(builder.layers), build_heads(trunk_shape, rng, dropout), lam, scale)
    logger.debug('Built %s model on %s: %d trunk layers, trunk output %s',
                 scale.value, input_shape, len(model.trunk), trunk_shape)
    return model


def build_ablation(kind: AblationKind, input_shape: LfShape = TINY_INPUT, channels: int = 8, k: int = 3,
                   a: int = 3, seed: int = 0, lam: float = DEFAULT_LAMBDA, dropout: float = DEFAULT_DROPOUT,
                   blocks: int = 10) -> ModelSpec:
    """Ten blocks of one convolution family between a shared stem and shared heads."""
    rng = np.random.default_rng(seed)
    builder = _TrunkBuilder(rng)
    builder.convs('stem', LayerSpec(LayerKind.SUBVIEW_2D, input_shape.c, channels, 3, stride=2))
    for _ in range(blocks):
        if kind == AblationKind.FULL_4D:
            builder.convs('4d-conv', LayerSpec(LayerKind.FULL_4D, channels, channels, k, a))
        if kind in (AblationKind.LF_DSC, AblationKind.LF_DSC_ASC):
            builder.convs('lf-dsc', LayerSpec(LayerKind.DEPTHWISE, channels, channels, k),
                          LayerSpec(LayerKind.POINTWISE, channels, channels))
        if kind in (AblationKind.LF_ASC, AblationKind.LF_DSC_ASC):
            builder.convs('lf-asc', LayerSpec(LayerKind.ANGLEWISE_H, channels, channels, k, a),
                          LayerSpec(LayerKind.ANGLEWISE_V, channels, channels, k, a))
    builder.layer('max-pool', LayerSpec(LayerKind.MAX_POOL_SPATIAL, stride=4))
    trunk_shape = _trunk_output(input_shape, builder.layers)
    return ModelSpec(input_shape, tuple(builder.layers), build_heads(trunk_shape, rng, dropout), lam, Scale.TINY)


def conv_block_count(model: ModelSpec) -> int:
    """Number of convolution blocks after the stem (a DSC or ASC pair counts once)."""
    convs = [layer for layer in model.trunk[1:] if layer.kind in (
        LayerKind.FULL_4D, LayerKind.DEPTHWISE, LayerKind.ANGLEWISE_H)]
    return len(convs)


def trace_model(model: ModelSpec, counter: Optional[MacCounter] = None) -> Dict[str, ArrayShape]:
    """Shape-only walk of the whole network; returns the trunk and head output shapes."""
    activations: List[ArrayShape] = [model.input_shape.dims]
    for i, layer in enumerate(model.trunk):
        skip = None
        if layer.kind == LayerKind.RESIDUAL_ADD:
            if not 0 <= layer.skip <= i:
                raise ShapeChainBroken(f"{TRUNK} layer {i} adds activation {layer.skip}, which is not computed yet")
            skip = activations[layer.skip]
        activations.append(_traced(layer, activations[-1], counter, skip, f'{TRUNK} layer {i}'))
    shapes = {TRUNK: activations[-1]}
    for name, head in model.heads.items():
        shape = activations[-1]
        for j, layer in enumerate(head):
            shape = _traced(layer, shape, counter, None, f'{name} head layer {j}')
        shapes[name] = shape
    return shapes


def _traced(layer: LayerSpec, shape: ArrayShape, counter: Optional[MacCounter],
            skip: Optional[ArrayShape], where: str) -> ArrayShape:
    try:
        return trace_layer(layer, shape, counter, skip)
    except LfOpError as e:
        raise ShapeChainBroken(f"{where} ({layer.describe()}) on input {shape}: {e}") from e


def row_inputs(model: ModelSpec) -> List[Tuple[str, ArrayShape]]:
    """Input shape of the first layer of every tagged trunk row, in order."""
    rows: List[Tuple[str, ArrayShape]] = []
    shape = model.input_shape.dims
    activations = [shape]
    for layer in model.trunk:
        if layer.tag and (not rows or rows[-1][0] != layer.tag):
            rows.append((layer.tag, shape))
        skip = activations[layer.skip] if layer.kind == LayerKind.RESIDUAL_ADD else None
        shape = trace_layer(layer, shape, None, skip)
        activations.append(shape)
    return rows


def prepare_input(lfi: LfTensor) -> np.ndarray:
    """Per-channel standardization applied before the network sees a light field."""
    return normalize(lfi).array


def run_model(model: ModelSpec, x: np.ndarray, counter: Optional[MacCounter] = None) -> Dict[str, np.ndarray]:
    """Inference forward pass on a prepared array; returns every head output (or the trunk output)."""
    if x.shape != model.input_shape.dims:
        raise ShapeMismatch(f"Model takes {model.input_shape}, got {LfShape.of(x.shape)}")
    kept = {layer.skip for layer in model.trunk if layer.kind == LayerKind.RESIDUAL_ADD}
    saved: Dict[int, np.ndarray] = {0: x} if 0 in kept else {}
    for i, layer in enumerate(model.trunk):
        x = run_array(layer, x, counter, saved.get(layer.skip) if layer.skip is not None else None)
        if i + 1 in kept:
            saved[i + 1] = x
    if not model.heads:
        return {TRUNK: x}
    outputs = {}
    for name, head in model.heads.items():
        y = x
        for layer in head:
            y = run_array(layer, y, counter)
        outputs[name] = y
    return outputs


class Prediction(NamedTuple):
    score: float
    spatial: np.ndarray
    angular: np.ndarray


def predict(model: ModelSpec, lfi: LfTensor) -> Prediction:
    if lfi.shape != model.input_shape:
        raise ShapeMismatch(f"Model takes {model.input_shape}, got {lfi.shape}")
    outputs = run_model(model, prepare_input(lfi))
    aux = np.concatenate([outputs[SPATIAL], outputs[ANGULAR]])
    if model.label_stats is not None:
        aux = model.label_stats.invert(aux)
    return Prediction(float(outputs[PRIMARY][0]), aux[:SPATIAL_DIM], aux[SPATIAL_DIM:])


def loss_primary(y: Sequence[float], y_hat: Sequence[float]) -> float:
    y_arr, y_hat_arr = np.asarray(y, dtype=np.float64), np.asarray(y_hat, dtype=np.float64)
    if y_arr.shape != y_hat_arr.shape or y_arr.size == 0:
        raise LengthMismatch(f"Score vectors of lengths {y_arr.size} and {y_hat_arr.size}")
    return float(np.mean((y_arr - y_hat_arr) ** 2))


def _feature_loss(x, x_hat, dim: int) -> float:
    rows, rows_hat = np.atleast_2d(np.asarray(x, dtype=np.float64)), np.atleast_2d(np.asarray(x_hat, dtype=np.float64))
    if rows.shape != rows_hat.shape or rows.shape[1] != dim:
        raise DimensionMismatch(f"Feature rows of shapes {rows.shape} and {rows_hat.shape}, expected width {dim}")
    return float(np.mean((rows - rows_hat) ** 2))


def loss_spatial(s, s_hat) -> float:
    return _feature_loss(s, s_hat, SPATIAL_DIM)


def loss_angular(a, a_hat) -> float:
    return _feature_loss(a, a_hat, ANGULAR_DIM)


def loss_total(l_p: float, l_s: float, l_a: float, lam: float = DEFAULT_LAMBDA) -> float:
    if lam < 0:
        raise ModelError(f"lambda must be >= 0, got {lam}")
    return l_p + lam * (l_s + l_a)
