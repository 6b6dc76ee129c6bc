"""Tiny-batch training with early stopping, AMSGrad updates and replica synchronisation."""
from __future__ import annotations

import copy
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from attr import dataclass as record

from lib.lf_autodiff import INPUT, backward, forward_record
from lib.lf_data import DatasetEntry, EmptyDataset
from lib.lf_features import SPATIAL_DIM, LabelStats, fit_label_stats
from lib.lf_model import (ANGULAR, DEFAULT_LAMBDA, PRIMARY, SPATIAL, ModelSpec, loss_angular, loss_primary,
                          loss_spatial, loss_total, predict, prepare_input)
from lib.metrics import Metrics, score

logger = logging.getLogger(__name__)

IMPROVEMENT = 1e-6


class TrainError(RuntimeError):
    pass


class ShapeMismatch(TrainError):
    pass


class BadConfig(TrainError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    m: int = 2
    n: int = 2
    p: int = 2
    l: int = 5
    batches: int = 100
    lam: float = DEFAULT_LAMBDA
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    replicas: int = 1
    sync_every: int = 100
    workers: int = 1

    def __post_init__(self):
        for name in ('m', 'n', 'p', 'l', 'batches', 'replicas', 'sync_every', 'workers'):
            if getattr(self, name) < 1:
                raise BadConfig(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.lr <= 0 or self.eps <= 0:
            raise BadConfig(f"lr and eps must be positive, got lr={self.lr} eps={self.eps}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise BadConfig(f"beta1 and beta2 must lie in (0, 1), got {self.beta1}, {self.beta2}")
        if self.lam < 0:
            raise BadConfig(f"lambda must be >= 0, got {self.lam}")

    @staticmethod
    def from_mapping(values: Mapping[str, Any]) -> TrainConfig:
        known = {f.name for f in fields(TrainConfig)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise BadConfig(f"Unknown training settings: {', '.join(unknown)}")
        try:
            return TrainConfig(**{name: (float(value) if isinstance(getattr(TrainConfig, name), float) else int(value))
                                  for name, value in values.items()})
        except (TypeError, ValueError) as e:
            raise BadConfig(f"Bad training settings {dict(values)}: {e}") from e

    @property
    def hyper(self) -> AdamHyper:
        return AdamHyper(self.lr, self.beta1, self.beta2, self.eps)


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    v_max: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_amsgrad_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: OptimizerState,
                      hyper: AdamHyper) -> Tuple[Dict[str, np.ndarray], OptimizerState]:
    """One bias-corrected Adam update whose denominator uses the running maximum second moment."""
    step = state.step + 1
    bc1 = 1.0 - hyper.beta1 ** step
    bc2 = 1.0 - hyper.beta2 ** step
    updated: Dict[str, np.ndarray] = {}
    new_state = OptimizerState(step=step)
    for key, value in params.items():
        g = grads.get(key)
        if g is None or np.shape(g) != np.shape(value):
            raise ShapeMismatch(f"Gradient for {key} has shape {np.shape(g)}, parameter has {np.shape(value)}")
        m = hyper.beta1 * state.m.get(key, 0.0) + (1.0 - hyper.beta1) * g
        v = hyper.beta2 * state.v.get(key, 0.0) + (1.0 - hyper.beta2) * (g * g)
        v_max = np.maximum(state.v_max.get(key, 0.0), v)
        updated[key] = value - hyper.lr * (m / bc1) / (np.sqrt(v_max / bc2) + hyper.eps)
        new_state.m[key], new_state.v[key], new_state.v_max[key] = m, v, v_max
    return updated, new_state


@record(frozen=True)
class HistoryRow:
    batch: int
    epoch: int
    replica: int
    train_loss: float
    val_loss: float


@record(frozen=True)
class TrainingSummary:
    batches: int
    epochs: int
    train_loss: float
    val_loss: float
    test_loss: Optional[float]
    seconds: float


class _Targets:
    """Prepared inputs and normalized labels of a training set."""

    def __init__(self, entries: Sequence[DatasetEntry], label_stats: Optional[LabelStats]):
        self.inputs = [prepare_input(entry.lfi) for entry in entries]
        self.scores = np.array([entry.label.score for entry in entries])
        aux = np.array([entry.label.spatial + entry.label.angular for entry in entries])
        self.aux = label_stats.apply(aux) if label_stats is not None else aux

    def __len__(self) -> int:
        return len(self.inputs)


def _label_stats(entries: Sequence[DatasetEntry]) -> Optional[LabelStats]:
    missing = [entry.source_id for entry in entries if not entry.label.has_features]
    if missing:
        raise TrainError(f"Entries without auxiliary labels: {', '.join(missing[:5])}")
    if len(entries) < 2:
        return None
    return fit_label_stats([entry.label.spatial + entry.label.angular for entry in entries])


def batch_loss(model: ModelSpec, targets: _Targets, indices: Sequence[int], lam: float,
               training: bool = False, rng: Optional[np.random.Generator] = None,
               with_grads: bool = False) -> Tuple[float, Optional[Dict[str, np.ndarray]]]:
    """Total loss over the drawn entries and, optionally, its parameter gradients."""
    count = len(indices)
    predicted, spatial, angular = [], [], []
    grads: Optional[Dict[str, np.ndarray]] = None
    for i in indices:
        outputs, tape = forward_record(model, targets.inputs[i], training, rng)
        predicted.append(outputs[PRIMARY][0])
        spatial.append(outputs[SPATIAL])
        angular.append(outputs[ANGULAR])
        if with_grads:
            seeds = {
                PRIMARY: 2.0 * (outputs[PRIMARY] - targets.scores[i]) / count,
                SPATIAL: lam * 2.0 * (outputs[SPATIAL] - targets.aux[i, :SPATIAL_DIM]) / (SPATIAL_DIM * count),
                ANGULAR: lam * 2.0 * (outputs[ANGULAR] - targets.aux[i, SPATIAL_DIM:]) / (outputs[ANGULAR].size * count),
            }
            entry_grads = backward(tape, seeds)
            entry_grads.pop(INPUT)
            grads = entry_grads if grads is None else {k: grads[k] + g for k, g in entry_grads.items()}
    rows = list(indices)
    loss = loss_total(loss_primary(targets.scores[rows], predicted),
                      loss_spatial(targets.aux[rows, :SPATIAL_DIM], spatial),
                      loss_angular(targets.aux[rows, SPATIAL_DIM:], angular), lam)
    return loss, grads


class _Draws:
    """Draws without replacement, reshuffling once every entry has been used."""

    def __init__(self, size: int, rng: np.random.Generator):
        self.size = size
        self.rng = rng
        self.queue: List[int] = []

    def take(self, count: int) -> List[int]:
        """At most `count` distinct entries; a batch straddling a reshuffle never repeats an entry."""
        count = min(count, self.size)
        drawn = self.queue[:count]
        self.queue = self.queue[count:]
        if len(drawn) < count:
            fresh = [i for i in self.rng.permutation(self.size).tolist() if i not in drawn]
            missing = count - len(drawn)
            drawn += fresh[:missing]
            self.queue = fresh[missing:]
        return drawn


@dataclass
class _Replica:
    index: int
    model: ModelSpec
    rng: np.random.Generator
    draws: _Draws
    state: OptimizerState = field(default_factory=OptimizerState)
    running_val: float = float('inf')
    history: List[HistoryRow] = field(default_factory=list)


def _f32(params: Mapping[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """Parameters stay float32-representable so checkpoints reload them exactly."""
    return {k: v.astype(np.float32).astype(np.float64) for k, v in params.items()}


def _run_batch(replica: _Replica, batch: int, targets: _Targets, config: TrainConfig) -> None:
    train_idx = replica.draws.take(config.m)
    val_idx = replica.rng.integers(0, len(targets), size=config.n).tolist()
    best, stale = float('inf'), 0
    for epoch in range(1, config.l + 1):
        train_loss, grads = batch_loss(replica.model, targets, train_idx, config.lam, True, replica.rng, True)
        params, replica.state = adam_amsgrad_step(replica.model.parameters(), grads, replica.state, config.hyper)
        replica.model = replica.model.with_parameters(_f32(params))
        val_loss, _ = batch_loss(replica.model, targets, val_idx, config.lam)
        replica.history.append(HistoryRow(batch, epoch, replica.index, train_loss, val_loss))
        logger.debug('batch %d replica %d epoch %d: train %.6f val %.6f',
                     batch, replica.index, epoch, train_loss, val_loss)
        replica.running_val = val_loss
        if val_loss < best - IMPROVEMENT:
            best, stale = val_loss, 0
        else:
            stale += 1
            if stale >= config.p:
                break
    last = replica.history[-1]
    logger.info('batch %d replica %d: %d epochs, train %.6f, val %.6f',
                batch, replica.index, last.epoch, last.train_loss, last.val_loss)


def _run_segment(replica: _Replica, batches: range, targets: _Targets, config: TrainConfig) -> _Replica:
    for batch in batches:
        _run_batch(replica, batch, targets, config)
    return replica


def _sync(replicas: List[_Replica]) -> None:
    leader = min(replicas, key=lambda r: (r.running_val, r.index))
    for replica in replicas:
        if replica is not leader:
            replica.model = leader.model
            replica.state = copy.deepcopy(leader.state)
    logger.info('Replicas synchronised to replica %d (val %.6f)', leader.index, leader.running_val)


def train(model: ModelSpec, train_set: Sequence[DatasetEntry],
          config: TrainConfig = TrainConfig()) -> Tuple[ModelSpec, List[HistoryRow]]:
    if not train_set:
        raise EmptyDataset("Training needs at least one entry")
    for entry in train_set:
        if entry.lfi.shape != model.input_shape:
            raise ShapeMismatch(f"Entry {entry.source_id} is {entry.lfi.shape}, model takes {model.input_shape}")
    label_stats = _label_stats(train_set)
    model = replace(model.with_label_stats(label_stats), lam=config.lam)
    targets = _Targets(train_set, label_stats)
    seeds = np.random.SeedSequence(config.seed).spawn(config.replicas)
    replicas = []
    for index, seed in enumerate(seeds):
        rng = np.random.default_rng(seed)
        replicas.append(_Replica(index, model, rng, _Draws(len(targets), rng)))

    with ThreadPoolExecutor(max_workers=min(config.workers, config.replicas)) as pool:
        for start in range(1, config.batches + 1, config.sync_every):
            segment = range(start, min(start + config.sync_every, config.batches + 1))
            list(pool.map(lambda r: _run_segment(r, segment, targets, config), replicas))
            if config.replicas > 1:
                _sync(replicas)
    best = min(replicas, key=lambda r: (r.running_val, r.index))
    history = sorted((row for r in replicas for row in r.history), key=lambda h: (h.batch, h.replica, h.epoch))
    return best.model, history


def evaluate(model: ModelSpec, test_set: Sequence[DatasetEntry], workers: int = 1) -> Metrics:
    if not test_set:
        raise EmptyDataset("Evaluation needs at least one entry")
    predicted = predict_scores(model, test_set, workers)
    return score([entry.label.score for entry in test_set], predicted)


def predict_scores(model: ModelSpec, entries: Sequence[DatasetEntry], workers: int = 1) -> List[float]:
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return [p.score for p in pool.map(lambda e: predict(model, e.lfi), entries)]


def evaluate_by_distortion(model: ModelSpec, test_set: Sequence[DatasetEntry],
                           workers: int = 1) -> Dict[str, Tuple[int, Metrics]]:
    """Metrics per distortion name, with the entry count of each group."""
    if not test_set:
        raise EmptyDataset("Evaluation needs at least one entry")
    predicted = predict_scores(model, test_set, workers)
    groups: Dict[str, List[Tuple[float, float]]] = {}
    for entry, p in zip(test_set, predicted):
        groups.setdefault(entry.distortion, []).append((entry.label.score, p))
    result = {}
    for name in sorted(groups):
        y, y_hat = zip(*groups[name])
        result[name] = (len(y), score(y, y_hat))
    return result


def dataset_loss(model: ModelSpec, entries: Sequence[DatasetEntry]) -> float:
    """Inference-mode total loss over a whole dataset, labels normalized with the model's stats."""
    targets = _Targets(entries, model.label_stats)
    return batch_loss(model, targets, range(len(targets)), model.lam)[0]


def summarize(model: ModelSpec, history: Sequence[HistoryRow], test_set: Sequence[DatasetEntry],
              seconds: float) -> TrainingSummary:
    last_batch = max(row.batch for row in history)
    last_rows = {row.replica: row for row in history if row.batch == last_batch}
    final = min(last_rows.values(), key=lambda row: (row.val_loss, row.replica))
    test_loss = dataset_loss(model, test_set) if test_set else None
    return TrainingSummary(last_batch, len(history), final.train_loss, final.val_loss, test_loss, seconds)


def timed_train(model: ModelSpec, train_set: Sequence[DatasetEntry], test_set: Sequence[DatasetEntry],
                config: TrainConfig) -> Tuple[ModelSpec, List[HistoryRow], TrainingSummary]:
    started = time.perf_counter()
    trained, history = train(model, train_set, config)
    summary = summarize(trained, history, test_set, time.perf_counter() - started)
    logger.info('Trained %d batches (%d epochs) in %.1fs; final train %.6f, val %.6f',
                summary.batches, summary.epochs, summary.seconds, summary.train_loss, summary.val_loss)
    return trained, history, summary
