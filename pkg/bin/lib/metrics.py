import logging
from typing import Optional, Sequence

import numpy as np
from attr import dataclass
from scipy import stats

logger = logging.getLogger(__name__)


class MetricError(RuntimeError):
    pass


class LengthMismatch(MetricError):
    pass


class ZeroVariance(MetricError):
    pass


@dataclass(frozen=True)
class Metrics:
    """Correlations are None when either side has no variance."""
    rmse: float
    srocc: Optional[float]
    plcc: Optional[float]


def _pair(y: Sequence[float], y_hat: Sequence[float], minimum: int):
    a, b = np.asarray(y, dtype=np.float64), np.asarray(y_hat, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise LengthMismatch(f"Need two vectors of equal length, got shapes {a.shape} and {b.shape}")
    if a.size < minimum:
        raise LengthMismatch(f"Need at least {minimum} values, got {a.size}")
    return a, b


def rmse(y: Sequence[float], y_hat: Sequence[float]) -> float:
    a, b = _pair(y, y_hat, 1)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def plcc(y: Sequence[float], y_hat: Sequence[float]) -> float:
    a, b = _pair(y, y_hat, 2)
    da, db = a - a.mean(), b - b.mean()
    denominator = np.sqrt(np.sum(da * da) * np.sum(db * db))
    if denominator == 0.0:
        raise ZeroVariance("Correlation of a constant vector is undefined")
    return float(np.clip(np.sum(da * db) / denominator, -1.0, 1.0))


def srocc(y: Sequence[float], y_hat: Sequence[float]) -> float:
    """Pearson correlation of average-tie ranks."""
    a, b = _pair(y, y_hat, 2)
    return plcc(stats.rankdata(a, method='average'), stats.rankdata(b, method='average'))


def score(y: Sequence[float], y_hat: Sequence[float]) -> Metrics:
    """RMSE always; correlations unless a side is constant, which is logged instead."""
    error = rmse(y, y_hat)
    if len(y) < 2:
        logger.warning('Correlations not reported for a single entry')
        return Metrics(error, None, None)
    try:
        return Metrics(error, srocc(y, y_hat), plcc(y, y_hat))
    except ZeroVariance as e:
        logger.warning('Correlations not reported: %s', e)
        return Metrics(error, None, None)
