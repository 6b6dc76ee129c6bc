from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

LFT_MAGIC = b'LFT1'
_LFT_HEADER = struct.Struct('<4s5I')


class LfTensorError(RuntimeError):
    pass


class LengthMismatch(LfTensorError):
    pass


class NonFiniteValue(LfTensorError):
    pass


class BadTensorFile(LfTensorError):
    pass


@dataclass(frozen=True)
class LfShape:
    """Extents of a light field: angular rows/cols (u, v), spatial rows/cols (x, y), channels (c)."""
    u: int
    v: int
    x: int
    y: int
    c: int

    def __post_init__(self):
        for name, value in zip('uvxyc', self.dims):
            if int(value) != value or value < 1:
                raise LfTensorError(f"Dimension {name} must be a count >= 1, got {value}")

    @property
    def dims(self) -> Tuple[int, int, int, int, int]:
        return self.u, self.v, self.x, self.y, self.c

    @property
    def size(self) -> int:
        return self.u * self.v * self.x * self.y * self.c

    @staticmethod
    def of(dims: Sequence[int]) -> LfShape:
        if len(dims) != 5:
            raise LfTensorError(f"A light field shape has 5 dims, got {len(dims)}: {tuple(dims)}")
        u, v, x, y, c = (int(d) for d in dims)
        return LfShape(u, v, x, y, c)

    @staticmethod
    def parse(text: str) -> LfShape:
        """Parses 'U,V,X,Y,C' (also accepts 'x' as separator)."""
        parts = text.replace('x', ',').split(',')
        try:
            return LfShape.of([int(p) for p in parts if p.strip()])
        except ValueError as ve:
            raise LfTensorError(f"Unable to parse shape '{text}'") from ve

    def __str__(self) -> str:
        return '×'.join(str(d) for d in self.dims)


class LfTensor:
    """Immutable dense 5-D light field stored row-major in (u, v, x, y, c) order."""
    __slots__ = ('_array',)

    def __init__(self, array: np.ndarray):
        array = np.array(array, dtype=np.float64)
        if array.ndim != 5:
            raise LfTensorError(f"Expected a 5-D array, got {array.ndim}-D")
        if not np.all(np.isfinite(array)):
            raise NonFiniteValue(f"Tensor of shape {array.shape} holds non-finite values")
        array.flags.writeable = False
        self._array = array

    @property
    def shape(self) -> LfShape:
        return LfShape.of(self._array.shape)

    @property
    def array(self) -> np.ndarray:
        return self._array

    def at(self, coord: Sequence[int]) -> float:
        return float(self._array[tuple(coord)])

    def flatten(self) -> np.ndarray:
        return self._array.reshape(-1).copy()

    def __eq__(self, other) -> bool:
        if not isinstance(other, LfTensor):
            return NotImplemented
        return self._array.shape == other._array.shape and bool(np.array_equal(self._array, other._array))

    def __hash__(self):
        return hash((self._array.shape, self._array.tobytes()))

    def __repr__(self) -> str:
        return f'LfTensor({self.shape})'


def create(shape: LfShape, data: Union[Sequence[float], np.ndarray]) -> LfTensor:
    flat = np.asarray(data, dtype=np.float64).reshape(-1)
    if flat.size != shape.size:
        raise LengthMismatch(f"Shape {shape} needs {shape.size} values, got {flat.size}")
    return LfTensor(flat.reshape(shape.dims))


def zeros(shape: LfShape) -> LfTensor:
    return LfTensor(np.zeros(shape.dims))


def flatten(t: LfTensor) -> np.ndarray:
    return t.flatten()


def normalize(lfi: LfTensor) -> LfTensor:
    """(p - mean) / (std + 1) with population statistics of each channel over all (u, v, x, y)."""
    array = lfi.array
    mean = array.mean(axis=(0, 1, 2, 3), keepdims=True)
    std = array.std(axis=(0, 1, 2, 3), keepdims=True)
    return LfTensor((array - mean) / (std + 1.0))


def transpose_uv(t: LfTensor) -> LfTensor:
    """Swaps u with v and x with y, mapping horizontal light field structure onto vertical."""
    return LfTensor(np.ascontiguousarray(t.array.transpose(1, 0, 3, 2, 4)))


def subviews(t: LfTensor) -> Iterator[Tuple[Tuple[int, int], np.ndarray]]:
    shape = t.shape
    for u in range(shape.u):
        for v in range(shape.v):
            yield (u, v), t.array[u, v]


def write_lft(t: LfTensor, path: Union[str, Path]) -> None:
    path = Path(path)
    with path.open('wb') as f:
        f.write(_LFT_HEADER.pack(LFT_MAGIC, *t.shape.dims))
        f.write(t.array.astype('<f4').tobytes())
    logger.debug('Wrote %s tensor to %s', t.shape, path)


def read_lft(path: Union[str, Path]) -> LfTensor:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _LFT_HEADER.size:
        raise BadTensorFile(f"{path} is too short to hold an LFT1 header")
    magic, *dims = _LFT_HEADER.unpack_from(raw)
    if magic != LFT_MAGIC:
        raise BadTensorFile(f"{path} has magic {magic!r}, expected {LFT_MAGIC!r}")
    shape = LfShape.of(dims)
    payload = raw[_LFT_HEADER.size:]
    if len(payload) != 4 * shape.size:
        raise BadTensorFile(f"{path} holds {len(payload)} payload bytes, shape {shape} needs {4 * shape.size}")
    values = np.frombuffer(payload, dtype='<f4').astype(np.float64)
    logger.debug('Read %s tensor from %s', shape, path)
    return create(shape, values)
