"""Forward light field layers.

Every convolution runs through one executor, the tap loop: an explicit loop over
the kernel taps where each tap multiply-accumulates over all output positions at
once. The loop is also where multiply-accumulates are counted, so a MacCounter
attached to a run reports exactly the work the executor did (padding taps
included). `trace_layer` walks the same loop on shapes alone.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from math import prod
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from lib.lf_tensor import LfTensor

logger = logging.getLogger(__name__)

VALID_STRIDES = (1, 2, 4)
POOL_STRIDES = (2, 4)

ArrayShape = Tuple[int, ...]


class LfOpError(RuntimeError):
    pass


class ChannelMismatch(LfOpError):
    pass


class BadStride(LfOpError):
    pass


class SpatialTooSmall(LfOpError):
    pass


class ShapeMismatch(LfOpError):
    pass


class BadLayerSpec(LfOpError):
    pass


class LayerKind(Enum):
    SUBVIEW_2D = 'Subview2D'
    DEPTHWISE = 'Depthwise'
    POINTWISE = 'Pointwise'
    ANGLEWISE_H = 'AnglewiseH'
    ANGLEWISE_V = 'AnglewiseV'
    FULL_4D = 'Full4D'
    MAX_POOL_SPATIAL = 'MaxPoolSpatial'
    RELU = 'ReLU'
    RESIDUAL_ADD = 'ResidualAdd'
    GLOBAL_AVG_POOL = 'GlobalAvgPool'
    DENSE = 'Dense'
    FLATTEN = 'Flatten'
    DROPOUT = 'Dropout'

    def __str__(self):
        return self.value


CONV_KINDS = frozenset({LayerKind.SUBVIEW_2D, LayerKind.DEPTHWISE, LayerKind.POINTWISE,
                        LayerKind.ANGLEWISE_H, LayerKind.ANGLEWISE_V, LayerKind.FULL_4D})
PARAMETRIC_KINDS = CONV_KINDS | {LayerKind.DENSE}
# Kinds operating on 5-D activations; the rest (Dense) take vectors. ReLU/Dropout take either.
TENSOR_KINDS = CONV_KINDS | {LayerKind.MAX_POOL_SPATIAL, LayerKind.RESIDUAL_ADD,
                             LayerKind.GLOBAL_AVG_POOL, LayerKind.FLATTEN}


def weight_shape(kind: LayerKind, ci: int, co: int, k: int, a: int) -> Optional[ArrayShape]:
    """Documented weight layouts, row-major."""
    shapes: Dict[LayerKind, ArrayShape] = {
        LayerKind.SUBVIEW_2D: (k, k, ci, co),
        LayerKind.DEPTHWISE: (k, k, ci),
        LayerKind.POINTWISE: (ci, co),
        LayerKind.ANGLEWISE_H: (a, k, k, ci, co),
        LayerKind.ANGLEWISE_V: (a, k, k, ci, co),
        LayerKind.FULL_4D: (a, a, k, k, ci, co),
        LayerKind.DENSE: (ci, co),
    }
    return shapes.get(kind)


def _readonly(values: Any, shape: ArrayShape, what: str) -> np.ndarray:
    array = np.asarray(values, dtype=np.float64)
    if array.size != prod(shape):
        raise BadLayerSpec(f"{what} needs {prod(shape)} values for shape {shape}, got {array.size}")
    array = array.reshape(shape).copy()
    array.flags.writeable = False
    return array


@dataclass(frozen=True, eq=False)
class LayerSpec:
    """One layer. `ci`/`co` are channels (input/output lengths for Dense).

    `skip` is only used by ResidualAdd: the index of the trunk activation added to
    the running one (0 is the trunk input, i is the output of layer i - 1).
    """
    kind: LayerKind
    ci: int = 0
    co: int = 0
    k: int = 1
    a: int = 1
    stride: int = 1
    weights: Optional[np.ndarray] = None
    bias: Optional[np.ndarray] = None
    skip: Optional[int] = None
    rate: float = 0.0
    tag: str = ''

    def __post_init__(self):
        if self.a < 1 or self.k < 1:
            raise BadLayerSpec(f"{self.kind} needs a >= 1 and k >= 1, got a={self.a} k={self.k}")
        if self.stride not in VALID_STRIDES:
            raise BadStride(f"{self.kind} stride must be one of {VALID_STRIDES}, got {self.stride}")
        if self.kind == LayerKind.DEPTHWISE and self.co not in (0, self.ci):
            raise BadLayerSpec(f"Depthwise output channels must equal input channels ({self.ci}), got {self.co}")
        if self.kind == LayerKind.DEPTHWISE:
            object.__setattr__(self, 'co', self.ci)
        if self.kind == LayerKind.MAX_POOL_SPATIAL and self.stride not in POOL_STRIDES:
            raise BadStride(f"Max pooling stride must be one of {POOL_STRIDES}, got {self.stride}")
        if self.kind == LayerKind.RESIDUAL_ADD and self.skip is None:
            raise BadLayerSpec("ResidualAdd needs a skip index")
        if not 0.0 <= self.rate < 1.0:
            raise BadLayerSpec(f"Dropout rate must be in [0, 1), got {self.rate}")
        shape = self.weight_shape
        if shape is None:
            if self.weights is not None or self.bias is not None:
                raise BadLayerSpec(f"{self.kind} takes no parameters")
            return
        if self.ci < 1 or self.co < 1:
            raise BadLayerSpec(f"{self.kind} needs ci, co >= 1, got ci={self.ci} co={self.co}")
        if self.weights is not None:
            object.__setattr__(self, 'weights', _readonly(self.weights, shape, f"{self.kind} weights"))
        if self.bias is not None:
            object.__setattr__(self, 'bias', _readonly(self.bias, (self.co,), f"{self.kind} bias"))

    @property
    def weight_shape(self) -> Optional[ArrayShape]:
        return weight_shape(self.kind, self.ci, self.co, self.k, self.a)

    @property
    def is_parametric(self) -> bool:
        return self.kind in PARAMETRIC_KINDS

    def with_params(self, weights: Optional[np.ndarray], bias: Optional[np.ndarray]) -> LayerSpec:
        return replace(self, weights=weights, bias=bias)

    def describe(self) -> str:
        if self.kind in CONV_KINDS:
            return f'{self.kind}(a={self.a}, k={self.k}, {self.ci}->{self.co}, s{self.stride})'
        if self.kind == LayerKind.DENSE:
            return f'Dense({self.ci}->{self.co})'
        if self.kind == LayerKind.MAX_POOL_SPATIAL:
            return f'MaxPoolSpatial(s{self.stride})'
        return str(self.kind)


@dataclass(frozen=True)
class AxisGeometry:
    """Same-padding geometry of one axis: pad-before floor((e-1)/2), output ceil(n/s)."""
    out: int
    before: int
    after: int


def same_geometry(n: int, extent: int, stride: int) -> AxisGeometry:
    out = -(-n // stride)
    before = (extent - 1) // 2
    after = max(0, (out - 1) * stride + extent - before - n)
    return AxisGeometry(out, before, after)


class MacCounter:
    """Counts multiply-accumulates performed by the tap loop."""

    def __init__(self):
        self.total = 0

    def add(self, count: int) -> None:
        self.total += count


@dataclass
class _Window:
    geometry: List[AxisGeometry]
    strides: Tuple[int, ...]
    extents: Tuple[int, ...]
    positions: int = field(init=False)

    def __post_init__(self):
        self.positions = prod(g.out for g in self.geometry)

    @property
    def pad_width(self) -> List[Tuple[int, int]]:
        return [(g.before, g.after) for g in self.geometry] + [(0, 0)]

    @property
    def out_extents(self) -> Tuple[int, ...]:
        return tuple(g.out for g in self.geometry)

    def unpad(self, n: Sequence[int]) -> Tuple[slice, ...]:
        return tuple(slice(g.before, g.before + size) for g, size in zip(self.geometry, n))


def _window(in_extents: Sequence[int], extents: Sequence[int], strides: Sequence[int]) -> _Window:
    return _Window([same_geometry(n, e, s) for n, e, s in zip(in_extents, extents, strides)],
                   tuple(strides), tuple(extents))


def iter_taps(window: _Window, macs_per_position: int,
              counter: Optional[MacCounter]) -> Iterator[Tuple[Tuple[int, ...], Tuple[slice, ...]]]:
    """Yields (kernel index, slice of the padded input feeding every output position)."""
    for index in itertools.product(*(range(e) for e in window.extents)):
        if counter is not None:
            counter.add(window.positions * macs_per_position)
        yield index, tuple(slice(i, i + (g.out - 1) * s + 1, s)
                           for i, g, s in zip(index, window.geometry, window.strides))


def conv_kernel_4d(layer: LayerSpec) -> np.ndarray:
    """The layer's kernel viewed as (eu, ev, ex, ey, ci, co)."""
    w = layer.weights
    if w is None:
        raise BadLayerSpec(f"{layer.describe()} has no weights")
    if layer.kind == LayerKind.SUBVIEW_2D:
        return w[None, None]
    if layer.kind == LayerKind.POINTWISE:
        return w[None, None, None, None]
    if layer.kind == LayerKind.ANGLEWISE_H:
        return w[None]
    if layer.kind == LayerKind.ANGLEWISE_V:
        return w[:, None]
    if layer.kind == LayerKind.FULL_4D:
        return w
    raise BadLayerSpec(f"{layer.kind} is not a dense-kernel convolution")


def kernel_extents(layer: LayerSpec) -> Tuple[int, int, int, int]:
    return {
        LayerKind.SUBVIEW_2D: (1, 1, layer.k, layer.k),
        LayerKind.DEPTHWISE: (1, 1, layer.k, layer.k),
        LayerKind.POINTWISE: (1, 1, 1, 1),
        LayerKind.ANGLEWISE_H: (1, layer.a, layer.k, layer.k),
        LayerKind.ANGLEWISE_V: (layer.a, 1, layer.k, layer.k),
        LayerKind.FULL_4D: (layer.a, layer.a, layer.k, layer.k),
    }[layer.kind]


def kernel_strides(layer: LayerSpec) -> Tuple[int, int, int, int]:
    return 1, 1, layer.stride, layer.stride


def conv_window(layer: LayerSpec, in_shape: Sequence[int]) -> _Window:
    return _window(in_shape[:4], kernel_extents(layer), kernel_strides(layer))


def macs_per_position(layer: LayerSpec) -> int:
    if layer.kind == LayerKind.DEPTHWISE:
        return layer.ci
    return layer.ci * layer.co


def check_input(layer: LayerSpec, shape: ArrayShape, skip_shape: Optional[ArrayShape] = None) -> None:
    kind = layer.kind
    if kind in TENSOR_KINDS and len(shape) != 5:
        raise ShapeMismatch(f"{kind} needs a 5-D light field, got shape {shape}")
    if kind in CONV_KINDS and shape[4] != layer.ci:
        raise ChannelMismatch(f"Input has {shape[4]} channels, {layer.describe()} expects {layer.ci}")
    if kind == LayerKind.MAX_POOL_SPATIAL and (shape[2] < layer.stride or shape[3] < layer.stride):
        raise SpatialTooSmall(f"Spatial extent {shape[2]}×{shape[3]} is below pooling stride {layer.stride}")
    if kind == LayerKind.RESIDUAL_ADD and skip_shape != shape:
        raise ShapeMismatch(f"Residual add of shapes {shape} and {skip_shape}")
    if kind == LayerKind.DENSE and shape != (layer.ci,):
        raise ShapeMismatch(f"{layer.describe()} needs a vector of length {layer.ci}, got shape {shape}")


def output_shape(layer: LayerSpec, shape: ArrayShape) -> ArrayShape:
    kind = layer.kind
    if kind in CONV_KINDS:
        return conv_window(layer, shape).out_extents + (layer.co,)
    if kind == LayerKind.MAX_POOL_SPATIAL:
        s = layer.stride
        return shape[0], shape[1], (shape[2] - s) // s + 1, (shape[3] - s) // s + 1, shape[4]
    if kind == LayerKind.GLOBAL_AVG_POOL:
        return (shape[4],)
    if kind == LayerKind.FLATTEN:
        return (prod(shape),)
    if kind == LayerKind.DENSE:
        return (layer.co,)
    return shape


def trace_layer(layer: LayerSpec, shape: ArrayShape, counter: Optional[MacCounter] = None,
                skip_shape: Optional[ArrayShape] = None) -> ArrayShape:
    """Dry run: validates, counts the layer's multiply-accumulates, returns the output shape."""
    check_input(layer, shape, skip_shape)
    if layer.kind in CONV_KINDS:
        for _ in iter_taps(conv_window(layer, shape), macs_per_position(layer), counter):
            pass
    elif layer.kind == LayerKind.DENSE and counter is not None:
        counter.add(layer.ci * layer.co)
    return output_shape(layer, shape)


def _require_weights(layer: LayerSpec) -> np.ndarray:
    if layer.weights is None:
        raise BadLayerSpec(f"{layer.describe()} has no weights")
    return layer.weights


def correlate(x: np.ndarray, layer: LayerSpec, counter: Optional[MacCounter] = None) -> np.ndarray:
    """Dense-kernel convolutions (everything but depthwise) through the tap loop."""
    kernel = conv_kernel_4d(layer)
    window = conv_window(layer, x.shape)
    xp = np.pad(x, window.pad_width)
    out = np.zeros(window.out_extents + (layer.co,))
    for index, taps in iter_taps(window, macs_per_position(layer), counter):
        out += np.tensordot(xp[taps], kernel[index], axes=([4], [0]))
    if layer.bias is not None:
        out += layer.bias
    return out


def correlate_depthwise(x: np.ndarray, layer: LayerSpec, counter: Optional[MacCounter] = None) -> np.ndarray:
    weights = _require_weights(layer)
    window = conv_window(layer, x.shape)
    xp = np.pad(x, window.pad_width)
    out = np.zeros(window.out_extents + (layer.ci,))
    for (_, _, dx, dy), taps in iter_taps(window, macs_per_position(layer), counter):
        out += xp[taps] * weights[dx, dy]
    if layer.bias is not None:
        out += layer.bias
    return out


def pool_windows(x: np.ndarray, stride: int) -> np.ndarray:
    """(u, v, ox, oy, c, stride*stride) view of the valid pooling windows, row-major within a window."""
    u, v, nx, ny, c = x.shape
    ox, oy = (nx - stride) // stride + 1, (ny - stride) // stride + 1
    cropped = x[:, :, :ox * stride, :oy * stride, :]
    blocks = cropped.reshape(u, v, ox, stride, oy, stride, c)
    return blocks.transpose(0, 1, 2, 4, 6, 3, 5).reshape(u, v, ox, oy, c, stride * stride)


def max_pool_array(x: np.ndarray, stride: int) -> Tuple[np.ndarray, np.ndarray]:
    """Returns the pooled array and, per output, the first row-major argmax within its window."""
    windows = pool_windows(x, stride)
    argmax = windows.argmax(axis=-1)
    return np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0], argmax


def run_array(layer: LayerSpec, x: np.ndarray, counter: Optional[MacCounter] = None,
              skip: Optional[np.ndarray] = None, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Forward evaluation on raw arrays. `mask` is the dropout keep-mask (None means inference)."""
    check_input(layer, x.shape, None if skip is None else skip.shape)
    kind = layer.kind
    if kind == LayerKind.DEPTHWISE:
        return correlate_depthwise(x, layer, counter)
    if kind in CONV_KINDS:
        return correlate(x, layer, counter)
    if kind == LayerKind.MAX_POOL_SPATIAL:
        return max_pool_array(x, layer.stride)[0]
    if kind == LayerKind.RELU:
        return np.maximum(x, 0.0)
    if kind == LayerKind.RESIDUAL_ADD:
        return x + skip
    if kind == LayerKind.GLOBAL_AVG_POOL:
        return x.mean(axis=(0, 1, 2, 3))
    if kind == LayerKind.FLATTEN:
        return x.reshape(-1).copy()
    if kind == LayerKind.DENSE:
        if counter is not None:
            counter.add(layer.ci * layer.co)
        out = x @ _require_weights(layer)
        return out + layer.bias if layer.bias is not None else out
    if kind == LayerKind.DROPOUT:
        return x if mask is None else x * mask / (1.0 - layer.rate)
    raise BadLayerSpec(f"Unhandled layer kind {kind}")


def _expect_kind(layer: LayerSpec, kind: LayerKind) -> None:
    if layer.kind != kind:
        raise BadLayerSpec(f"Expected a {kind} layer, got {layer.kind}")


def _as_array(t: Union[LfTensor, np.ndarray]) -> np.ndarray:
    return t.array if isinstance(t, LfTensor) else np.asarray(t, dtype=np.float64)


def conv2d_subview(t: LfTensor, layer: LayerSpec, counter: Optional[MacCounter] = None) -> LfTensor:
    _expect_kind(layer, LayerKind.SUBVIEW_2D)
    return LfTensor(run_array(layer, t.array, counter))


def conv_depthwise(t: LfTensor, layer: LayerSpec, counter: Optional[MacCounter] = None) -> LfTensor:
    _expect_kind(layer, LayerKind.DEPTHWISE)
    return LfTensor(run_array(layer, t.array, counter))


def conv_pointwise(t: LfTensor, layer: LayerSpec, counter: Optional[MacCounter] = None) -> LfTensor:
    _expect_kind(layer, LayerKind.POINTWISE)
    return LfTensor(run_array(layer, t.array, counter))


def conv_anglewise_h(t: LfTensor, layer: LayerSpec, counter: Optional[MacCounter] = None) -> LfTensor:
    """3-D convolution over (v, x, y): angular extent a along v, k×k spatially, stride 1."""
    _expect_kind(layer, LayerKind.ANGLEWISE_H)
    return LfTensor(run_array(layer, t.array, counter))


def conv_anglewise_v(t: LfTensor, layer: LayerSpec, counter: Optional[MacCounter] = None) -> LfTensor:
    """3-D convolution over (u, x, y): angular extent a along u, k×k spatially, stride 1."""
    _expect_kind(layer, LayerKind.ANGLEWISE_V)
    return LfTensor(run_array(layer, t.array, counter))


def conv4d_full(t: LfTensor, layer: LayerSpec, counter: Optional[MacCounter] = None) -> LfTensor:
    """Direct 4-D convolution, one tap at a time over the whole a×a×k×k kernel."""
    _expect_kind(layer, LayerKind.FULL_4D)
    return LfTensor(run_array(layer, t.array, counter))


def max_pool_spatial(t: LfTensor, stride: int) -> LfTensor:
    layer = LayerSpec(LayerKind.MAX_POOL_SPATIAL, stride=stride)
    return LfTensor(run_array(layer, t.array))


def relu(t: Union[LfTensor, np.ndarray]) -> Union[LfTensor, np.ndarray]:
    out = np.maximum(_as_array(t), 0.0)
    return LfTensor(out) if isinstance(t, LfTensor) else out


def residual_add(a: LfTensor, b: LfTensor) -> LfTensor:
    if a.shape != b.shape:
        raise ShapeMismatch(f"Residual add of shapes {a.shape} and {b.shape}")
    return LfTensor(a.array + b.array)


def global_avg_pool(t: LfTensor) -> np.ndarray:
    return t.array.mean(axis=(0, 1, 2, 3))


def dense(v: Sequence[float], weights: np.ndarray, bias: Optional[np.ndarray] = None) -> np.ndarray:
    vector = np.asarray(v, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 2 or weights.shape[0] != vector.shape[0]:
        raise ShapeMismatch(f"Dense weights of shape {weights.shape} do not take a vector of length {vector.shape[0]}")
    out = vector @ weights
    return out + np.asarray(bias, dtype=np.float64) if bias is not None else out


def embed_u_delta(h: np.ndarray) -> np.ndarray:
    """Lifts an H kernel (a, k, k, ci, co) to a Full4D kernel, centred on the u axis."""
    a = h.shape[0]
    full = np.zeros((a,) + h.shape)
    full[(a - 1) // 2] = h
    return full


def embed_v_delta(v: np.ndarray) -> np.ndarray:
    """Lifts a V kernel (a, k, k, ci, co) to a Full4D kernel, centred on the v axis."""
    a = v.shape[0]
    full = np.zeros((a, a) + v.shape[1:])
    full[:, (a - 1) // 2] = v
    return full


def compose_asc_kernels(h: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Full4D kernel equal to applying H then V (channels ci -> cm -> co).

    The result has spatial extent 2k - 1; for odd k its same-padding offset matches
    the two-step pair exactly, so interior outputs agree.
    """
    a_h, k, _, ci, cm = h.shape
    a_v, k_v, _, cm_v, co = v.shape
    if cm != cm_v or k != k_v or a_h != a_v:
        raise BadLayerSpec(f"Cannot compose H {h.shape} with V {v.shape}")
    a = a_h
    out = np.zeros((a, a, 2 * k - 1, 2 * k - 1, ci, co))
    for du in range(a):
        for dv in range(a):
            for x1, y1, x2, y2 in itertools.product(range(k), repeat=4):
                out[du, dv, x1 + x2, y1 + y2] += h[dv, x1, y1] @ v[du, x2, y2]
    return out
