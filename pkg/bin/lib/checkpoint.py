"""The "ALAS" checkpoint format.

    header   : b'ALAS', u32 version, u32 layer count
    per layer: u8 section (0 trunk, then heads in HEAD_NAMES order), u8 kind, u32 ci, co, k, a, stride,
               i32 skip (-1 when unused), f64 dropout rate, u8 flags (1 weights, 2 bias),
               u16 tag length + UTF-8 tag, f32 weights, f32 bias
    metadata : b'META', f64 lambda, u8 scale, u32[5] input shape, u32 label-stat width, f64 means, f64 stds

Everything is little-endian.
"""
import logging
import struct
from math import prod
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np

from lib.env import Scale
from lib.lf_features import LabelStats
from lib.lf_model import HEAD_NAMES, BadCheckpoint, ModelSpec
from lib.lf_ops import LayerKind, LayerSpec, LfOpError
from lib.lf_tensor import LfShape, LfTensorError

logger = logging.getLogger(__name__)

MAGIC = b'ALAS'
META_MAGIC = b'META'
VERSION = 1

_HEADER = struct.Struct('<4sII')
_LAYER = struct.Struct('<BB5IidBH')
_META = struct.Struct('<4sdB5II')
_KINDS = list(LayerKind)
_SCALES = list(Scale)
_SECTIONS = ('trunk',) + HEAD_NAMES
_HAS_WEIGHTS = 1
_HAS_BIAS = 2


def _f32(array: np.ndarray) -> bytes:
    return np.asarray(array, dtype='<f4').tobytes()


def encode(model: ModelSpec) -> bytes:
    sections: List[Tuple[int, LayerSpec]] = [(0, layer) for layer in model.trunk]
    for name, head in model.heads.items():
        if name not in HEAD_NAMES:
            raise BadCheckpoint(f"Head '{name}' cannot be stored; known heads are {HEAD_NAMES}")
        sections += [(_SECTIONS.index(name), layer) for layer in head]
    out = bytearray(_HEADER.pack(MAGIC, VERSION, len(sections)))
    for section, layer in sections:
        flags = (_HAS_WEIGHTS if layer.weights is not None else 0) | (_HAS_BIAS if layer.bias is not None else 0)
        tag = layer.tag.encode('utf-8')
        out += _LAYER.pack(section, _KINDS.index(layer.kind), layer.ci, layer.co, layer.k, layer.a, layer.stride,
                           -1 if layer.skip is None else layer.skip, layer.rate, flags, len(tag))
        out += tag
        if layer.weights is not None:
            out += _f32(layer.weights)
        if layer.bias is not None:
            out += _f32(layer.bias)
    stats = model.label_stats
    width = 0 if stats is None else len(stats.mean)
    out += _META.pack(META_MAGIC, model.lam, _SCALES.index(model.scale), *model.input_shape.dims, width)
    if stats is not None:
        out += np.asarray(stats.mean, dtype='<f8').tobytes() + np.asarray(stats.std, dtype='<f8').tobytes()
    return bytes(out)


class _Cursor:
    def __init__(self, raw: bytes, origin: str):
        self.raw = raw
        self.offset = 0
        self.origin = origin

    def unpack(self, layout: struct.Struct) -> tuple:
        if self.offset + layout.size > len(self.raw):
            raise BadCheckpoint(f"{self.origin} is truncated at byte {self.offset}")
        values = layout.unpack_from(self.raw, self.offset)
        self.offset += layout.size
        return values

    def take(self, count: int) -> bytes:
        if self.offset + count > len(self.raw):
            raise BadCheckpoint(f"{self.origin} is truncated at byte {self.offset}")
        chunk = self.raw[self.offset:self.offset + count]
        self.offset += count
        return chunk

    def floats(self, count: int, dtype: str = '<f4') -> np.ndarray:
        width = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(width * count), dtype=dtype).astype(np.float64)


def decode(raw: bytes, origin: str = 'checkpoint') -> ModelSpec:
    cursor = _Cursor(raw, origin)
    magic, version, count = cursor.unpack(_HEADER)
    if magic != MAGIC:
        raise BadCheckpoint(f"{origin} has magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise BadCheckpoint(f"{origin} has format version {version}, this build reads {VERSION}")
    trunk: List[LayerSpec] = []
    heads: Dict[str, List[LayerSpec]] = {}
    for _ in range(count):
        section, kind, ci, co, k, a, stride, skip, rate, flags, tag_len = cursor.unpack(_LAYER)
        if section >= len(_SECTIONS) or kind >= len(_KINDS):
            raise BadCheckpoint(f"{origin} holds an unknown section {section} or layer kind {kind}")
        try:
            tag = cursor.take(tag_len).decode('utf-8')
        except UnicodeDecodeError as e:
            raise BadCheckpoint(f"{origin} holds a layer tag that is not UTF-8") from e
        try:
            layer = LayerSpec(_KINDS[kind], ci, co, k, a, stride, skip=None if skip < 0 else skip, rate=rate, tag=tag)
        except LfOpError as e:
            raise BadCheckpoint(f"{origin} holds an invalid layer: {e}") from e
        shape = layer.weight_shape
        if flags & (_HAS_WEIGHTS | _HAS_BIAS) and shape is None:
            raise BadCheckpoint(f"{origin} stores parameters for a {layer.kind} layer, which takes none")
        weights = cursor.floats(prod(shape)) if flags & _HAS_WEIGHTS else None
        bias = cursor.floats(layer.co) if flags & _HAS_BIAS else None
        if weights is not None or bias is not None:
            layer = layer.with_params(weights, bias)
        if section == 0:
            trunk.append(layer)
        else:
            heads.setdefault(_SECTIONS[section], []).append(layer)
    meta_magic, lam, scale, *rest = cursor.unpack(_META)
    if meta_magic != META_MAGIC:
        raise BadCheckpoint(f"{origin} lacks the metadata block")
    dims, width = rest[:5], rest[5]
    if scale >= len(_SCALES):
        raise BadCheckpoint(f"{origin} holds an unknown scale {scale}")
    try:
        input_shape = LfShape.of(dims)
    except LfTensorError as e:
        raise BadCheckpoint(f"{origin} holds an invalid input shape: {e}") from e
    stats = None
    if width:
        stats = LabelStats(tuple(cursor.floats(width, '<f8').tolist()), tuple(cursor.floats(width, '<f8').tolist()))
    if cursor.offset != len(raw):
        raise BadCheckpoint(f"{origin} has {len(raw) - cursor.offset} trailing bytes")
    return ModelSpec(input_shape, tuple(trunk), {name: tuple(layers) for name, layers in heads.items()},
                     lam, _SCALES[scale], stats)


def save_checkpoint(model: ModelSpec, path: Union[str, Path]) -> None:
    path = Path(path)
    path.write_bytes(encode(model))
    logger.info('Saved %d-layer model to %s', len(list(model.layers())), path)


def load_checkpoint(path: Union[str, Path]) -> ModelSpec:
    path = Path(path)
    if not path.is_file():
        raise BadCheckpoint(f"No checkpoint at {path}")
    model = decode(path.read_bytes(), str(path))
    logger.debug('Loaded model on %s from %s', model.input_shape, path)
    return model
