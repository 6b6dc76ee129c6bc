"""Closed-form multiply-accumulate costs and parameter counts, checked against the executor's own count."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from enum import Enum
from math import prod
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from attr import dataclass as record

from lib.lf_model import (AblationKind, ModelSpec, ShapeChainBroken, build_ablation, conv_block_count, run_model,
                          trace_model)
from lib.lf_ops import ArrayShape, CONV_KINDS, LayerKind, LayerSpec, LfOpError, MacCounter, trace_layer
from lib.lf_tensor import LfShape

logger = logging.getLogger(__name__)


class CostError(RuntimeError):
    pass


class MissingAngularExtent(CostError):
    pass


class CostKind(Enum):
    SUBVIEW_2D = 'Subview2D'
    LF_DSC = 'LF-DSC'
    FULL_4D = 'Full4D'
    LF_ASC = 'LF-ASC'
    DSC_ASC = 'DSC+ASC'

    @property
    def angular(self) -> bool:
        return self in (CostKind.FULL_4D, CostKind.LF_ASC, CostKind.DSC_ASC)


class SavingsKind(Enum):
    DSC_VS_2D = 'dsc-vs-2d'
    COMBO_VS_4D = 'combo-vs-4d'


@dataclass(frozen=True)
class CostDims:
    """Extents at which the kernel is evaluated, channels in/out, spatial kernel k, angular kernel a."""
    u: int
    v: int
    x: int
    y: int
    ci: int
    cj: int
    k: int
    a: Optional[int] = None

    def __post_init__(self):
        for name in ('u', 'v', 'x', 'y', 'ci', 'cj', 'k'):
            if getattr(self, name) < 1:
                raise CostError(f"CostDims.{name} must be >= 1, got {getattr(self, name)}")
        if self.a is not None and self.a < 1:
            raise CostError(f"CostDims.a must be >= 1, got {self.a}")

    @property
    def positions(self) -> int:
        return self.u * self.v * self.x * self.y


def _angular(d: CostDims, what: str) -> int:
    if d.a is None:
        raise MissingAngularExtent(f"{what} needs an angular kernel extent")
    return d.a


def mac_cost(kind: CostKind, d: CostDims) -> int:
    p, ci, cj, k2 = d.positions, d.ci, d.cj, d.k * d.k
    if kind == CostKind.SUBVIEW_2D:
        return p * ci * cj * k2
    if kind == CostKind.LF_DSC:
        return p * ci * (cj + k2)
    a = _angular(d, kind.value)
    if kind == CostKind.FULL_4D:
        return p * ci * cj * k2 * a * a
    if kind == CostKind.LF_ASC:
        return p * ci * cj * k2 * 2 * a
    return p * ci * (cj + k2 + 2 * cj * a * k2)


def mac_savings(kind: SavingsKind, d: CostDims) -> int:
    p, ci, cj, k2 = d.positions, d.ci, d.cj, d.k * d.k
    if kind == SavingsKind.DSC_VS_2D:
        return p * ci * ((cj - 1) * (k2 - 1) - 1)
    a = _angular(d, kind.value)
    return p * ci * (cj * a * a * k2 - 2 * cj * a * k2 - k2 - cj)


def block_layers(kind: CostKind, d: CostDims) -> List[LayerSpec]:
    """The executable unit a closed form describes. ASC units map ci -> cj -> cj."""
    a = d.a if d.a is not None else 1
    if kind.angular:
        _angular(d, kind.value)
    dsc = [LayerSpec(LayerKind.DEPTHWISE, d.ci, d.ci, d.k), LayerSpec(LayerKind.POINTWISE, d.ci, d.cj)]
    return {
        CostKind.SUBVIEW_2D: lambda: [LayerSpec(LayerKind.SUBVIEW_2D, d.ci, d.cj, d.k)],
        CostKind.LF_DSC: lambda: dsc,
        CostKind.FULL_4D: lambda: [LayerSpec(LayerKind.FULL_4D, d.ci, d.cj, d.k, a)],
        CostKind.LF_ASC: lambda: [LayerSpec(LayerKind.ANGLEWISE_H, d.ci, d.cj, d.k, a),
                                  LayerSpec(LayerKind.ANGLEWISE_V, d.cj, d.cj, d.k, a)],
        CostKind.DSC_ASC: lambda: dsc + [LayerSpec(LayerKind.ANGLEWISE_H, d.cj, d.cj, d.k, a),
                                         LayerSpec(LayerKind.ANGLEWISE_V, d.cj, d.cj, d.k, a)],
    }[kind]()


def _with_zero_weights(layer: LayerSpec) -> LayerSpec:
    shape = layer.weight_shape
    return layer if shape is None else layer.with_params(np.zeros(shape), None)


def measure_block_macs(kind: CostKind, d: CostDims, execute: bool = False) -> int:
    """Counts the tap loop over a stride-1 unit on a (u, v, x, y, ci) input."""
    layers = block_layers(kind, d)
    model = ModelSpec(LfShape(d.u, d.v, d.x, d.y, d.ci), tuple(layers))
    return measure_macs(model, execute=execute)


def measure_macs(model: ModelSpec, input_shape: Optional[LfShape] = None, execute: bool = False) -> int:
    """Multiply-accumulates the executor performs on the model.

    The default walks the tap loop on shapes only; `execute` runs the real forward pass
    on zeros, counting in the same loop.
    """
    if input_shape is not None and input_shape != model.input_shape:
        model = replace(model, input_shape=input_shape)
    counter = MacCounter()
    if execute:
        trunk = tuple(_with_zero_weights(layer) for layer in model.trunk)
        heads = {name: tuple(_with_zero_weights(layer) for layer in head) for name, head in model.heads.items()}
        try:
            run_model(replace(model, trunk=trunk, heads=heads), np.zeros(model.input_shape.dims), counter)
        except LfOpError as e:
            raise ShapeChainBroken(str(e)) from e
    else:
        trace_model(model, counter)
    return counter.total


def layer_macs(layer: LayerSpec, out_shape: ArrayShape) -> int:
    """Closed-form cost of one layer at its output extents; bias additions are free."""
    kind = layer.kind
    if kind in CONV_KINDS:
        p = prod(out_shape[:4])
        k2 = layer.k * layer.k
        if kind == LayerKind.DEPTHWISE:
            return p * layer.ci * k2
        if kind == LayerKind.POINTWISE:
            return p * layer.ci * layer.co
        angular = {LayerKind.SUBVIEW_2D: 1, LayerKind.ANGLEWISE_H: layer.a,
                   LayerKind.ANGLEWISE_V: layer.a, LayerKind.FULL_4D: layer.a * layer.a}[kind]
        return p * layer.ci * layer.co * k2 * angular
    if kind == LayerKind.DENSE:
        return layer.ci * layer.co
    return 0


def layer_params(layer: LayerSpec) -> int:
    shape = layer.weight_shape
    if shape is None:
        return 0
    return prod(shape) + (layer.co if layer.bias is not None else 0)


@record(frozen=True)
class LayerCost:
    layer_index: int
    name: str
    kind: LayerKind
    analytic_macs: int
    measured_macs: int
    params: int


@record(frozen=True)
class ParamCount:
    per_layer: Tuple[int, ...]
    total: int


@record(frozen=True)
class CostReport:
    rows: Tuple[LayerCost, ...]

    @property
    def total_analytic(self) -> int:
        return sum(row.analytic_macs for row in self.rows)

    @property
    def total_measured(self) -> int:
        return sum(row.measured_macs for row in self.rows)

    @property
    def total_params(self) -> int:
        return sum(row.params for row in self.rows)

    @property
    def exact(self) -> bool:
        return all(row.analytic_macs == row.measured_macs for row in self.rows)


def count_params(model: ModelSpec) -> ParamCount:
    per_layer = tuple(layer_params(layer) for _, layer in model.layers())
    return ParamCount(per_layer, sum(per_layer))


def _walk(model: ModelSpec):
    """(prefix, layer, input shape, output shape, measured MACs) over trunk then heads."""
    activations: List[ArrayShape] = [model.input_shape.dims]
    for i, layer in enumerate(model.trunk):
        counter = MacCounter()
        skip = activations[layer.skip] if layer.kind == LayerKind.RESIDUAL_ADD else None
        out = trace_layer(layer, activations[-1], counter, skip)
        yield f'trunk.{i}', layer, activations[-1], out, counter.total
        activations.append(out)
    for name, head in model.heads.items():
        shape = activations[-1]
        for j, layer in enumerate(head):
            counter = MacCounter()
            out = trace_layer(layer, shape, counter)
            yield f'head.{name}.{j}', layer, shape, out, counter.total
            shape = out


def cost_report(model: ModelSpec) -> CostReport:
    trace_model(model)
    rows = tuple(LayerCost(index, prefix, layer.kind, layer_macs(layer, out), measured, layer_params(layer))
                 for index, (prefix, layer, _, out, measured) in enumerate(_walk(model)))
    report = CostReport(rows)
    logger.info('Cost report: %d layers, %d MACs analytic, %d measured, %d parameters',
                len(rows), report.total_analytic, report.total_measured, report.total_params)
    return report


@record(frozen=True)
class RowSavings:
    """Every closed form evaluated at the dims of one tagged trunk row."""
    row: str
    dims: CostDims
    costs: Dict[CostKind, int]
    savings: Dict[SavingsKind, int]


def row_dims(model: ModelSpec) -> List[Tuple[str, CostDims]]:
    """Dims of each tagged trunk row holding convolutions; rows without anglewise layers use a = U."""
    rows: Dict[str, List[Tuple[LayerSpec, ArrayShape, ArrayShape]]] = {}
    for prefix, layer, shape_in, shape_out, _ in _walk(model):
        if prefix.startswith('trunk.') and layer.kind in CONV_KINDS and layer.tag:
            rows.setdefault(layer.tag, []).append((layer, shape_in, shape_out))
    dims = []
    for tag, convs in rows.items():
        first_in = convs[0][1]
        last_layer, _, last_out = convs[-1]
        angular = [layer.a for layer, _, _ in convs if layer.kind in (
            LayerKind.ANGLEWISE_H, LayerKind.ANGLEWISE_V, LayerKind.FULL_4D)]
        dims.append((tag, CostDims(first_in[0], first_in[1], last_out[2], last_out[3], first_in[4],
                                   last_layer.co, max(layer.k for layer, _, _ in convs),
                                   max(angular) if angular else model.input_shape.u)))
    return dims


def savings_summary(model: ModelSpec) -> List[RowSavings]:
    return [RowSavings(tag, d, {kind: mac_cost(kind, d) for kind in CostKind},
                       {kind: mac_savings(kind, d) for kind in SavingsKind})
            for tag, d in row_dims(model)]


@record(frozen=True)
class AblationCost:
    kind: AblationKind
    params: int
    macs: int
    conv_blocks: int


def compare_ablations(input_shape: LfShape, channels: int, k: int, a: int, seed: int = 0,
                      kinds: Sequence[AblationKind] = tuple(AblationKind)) -> List[AblationCost]:
    rows = []
    for kind in kinds:
        model = build_ablation(kind, input_shape, channels, k, a, seed)
        rows.append(AblationCost(kind, count_params(model).total, measure_macs(model), conv_block_count(model)))
        logger.debug('%s: %d parameters, %d MACs', kind.value, rows[-1].params, rows[-1].macs)
    return rows
