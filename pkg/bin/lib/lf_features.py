"""Auxiliary quality labels: NSS statistics of the subviews and EPI gradient-direction statistics."""
from __future__ import annotations

import functools
import logging
from enum import Enum
from typing import Callable, List, Sequence, Tuple

import numpy as np
from attr import dataclass
from scipy import ndimage, stats
from scipy.special import gamma

from lib.lf_tensor import LfTensor

logger = logging.getLogger(__name__)

SPATIAL_DIM = 36
ANGULAR_DIM = 8
MIN_IMAGE = 8
MIN_SPATIAL = 16
MSCN_C = 1.0
STD_FLOOR = 1e-8

ALPHA_GRID = np.arange(0.2, 10.001, 0.001)
# Moment ratios E[x^2] / E[|x|]^2 of a generalized Gaussian, and their inverse for the AGGD table.
_GGD_RATIO = gamma(1.0 / ALPHA_GRID) * gamma(3.0 / ALPHA_GRID) / gamma(2.0 / ALPHA_GRID) ** 2
_AGGD_RATIO = 1.0 / _GGD_RATIO

LUMA = np.array([0.299, 0.587, 0.114])


class FeatureError(RuntimeError):
    pass


class ImageTooSmall(FeatureError):
    pass


class AngularTooSmall(FeatureError):
    pass


class TooFewRows(FeatureError):
    pass


class UnsupportedChannels(FeatureError):
    pass


class FeatureKind(Enum):
    SPATIAL = 'spatial'
    ANGULAR = 'angular'

    @property
    def length(self) -> int:
        return SPATIAL_DIM if self == FeatureKind.SPATIAL else ANGULAR_DIM


@dataclass(frozen=True)
class FeatureVector:
    kind: FeatureKind
    values: Tuple[float, ...]

    def __attrs_post_init__(self):
        if len(self.values) != self.kind.length:
            raise FeatureError(f"{self.kind.value} features have length {self.kind.length}, got {len(self.values)}")
        if not all(np.isfinite(self.values)):
            raise FeatureError(f"{self.kind.value} features hold non-finite values")

    @property
    def array(self) -> np.ndarray:
        return np.array(self.values)


@dataclass(frozen=True)
class AggdParams:
    alpha: float
    sigma_left: float
    sigma_right: float
    mean_term: float


@dataclass(frozen=True)
class LabelStats:
    """Per-dimension mean and (floored) population std of a label matrix."""
    mean: Tuple[float, ...]
    std: Tuple[float, ...]

    def apply(self, rows) -> np.ndarray:
        return (np.asarray(rows, dtype=np.float64) - np.array(self.mean)) / np.array(self.std)

    def invert(self, rows) -> np.ndarray:
        return np.asarray(rows, dtype=np.float64) * np.array(self.std) + np.array(self.mean)


@functools.lru_cache(maxsize=None)
def gaussian_window(size: int = 7, sigma: float = 7.0 / 6.0) -> np.ndarray:
    axis = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-axis ** 2 / (2.0 * sigma ** 2))
    window = np.outer(g, g)
    window /= window.sum()
    window.flags.writeable = False
    return window


def luminance(image: np.ndarray) -> np.ndarray:
    """(X, Y, C) on the 0-255 scale to (X, Y) luminance; single-channel input passes through."""
    if image.shape[-1] == 1:
        return image[..., 0]
    if image.shape[-1] == 3:
        return image @ LUMA
    raise UnsupportedChannels(f"Need 1 or 3 channels for luminance, got {image.shape[-1]}")


def mscn(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or min(image.shape) < MIN_IMAGE:
        raise ImageTooSmall(f"MSCN needs a 2-D image of at least {MIN_IMAGE}×{MIN_IMAGE}, got {image.shape}")
    if np.ptp(image) == 0.0:
        return np.zeros_like(image)
    window = gaussian_window()
    mu = ndimage.correlate(image, window, mode='mirror')
    sigma = np.sqrt(np.abs(ndimage.correlate(image * image, window, mode='mirror') - mu * mu))
    return (image - mu) / (sigma + MSCN_C)


def fit_ggd(samples: np.ndarray) -> Tuple[float, float]:
    """Moment-matching fit; returns (alpha, sigma). An all-zero field gives (2, 0)."""
    x = np.asarray(samples, dtype=np.float64).reshape(-1)
    mean_abs = np.mean(np.abs(x)) if x.size else 0.0
    if mean_abs == 0.0:
        return 2.0, 0.0
    second = np.mean(x * x)
    rho = second / mean_abs ** 2
    alpha = float(ALPHA_GRID[np.argmin(np.abs(rho - _GGD_RATIO))])
    return alpha, float(np.sqrt(second))


def fit_aggd(samples: np.ndarray) -> AggdParams:
    x = np.asarray(samples, dtype=np.float64).reshape(-1)
    left, right = x[x < 0], x[x > 0]
    if left.size == 0 and right.size == 0:
        return AggdParams(2.0, 0.0, 0.0, 0.0)
    sigma_left = float(np.sqrt(np.mean(left * left))) if left.size else 0.0
    sigma_right = float(np.sqrt(np.mean(right * right))) if right.size else 0.0
    r_hat = np.mean(np.abs(x)) ** 2 / np.mean(x * x)
    if left.size and right.size:
        g = sigma_left / sigma_right
        r_hat = r_hat * (g ** 3 + 1) * (g + 1) / (g ** 2 + 1) ** 2
    alpha = float(ALPHA_GRID[np.argmin((_AGGD_RATIO - r_hat) ** 2)])
    mean_term = ((sigma_right - sigma_left) * gamma(2.0 / alpha) / gamma(1.0 / alpha)
                 * np.sqrt(gamma(1.0 / alpha) / gamma(3.0 / alpha)))
    return AggdParams(alpha, sigma_left, sigma_right, float(mean_term))


def _pair_products(m: np.ndarray) -> List[np.ndarray]:
    """Horizontal, vertical and both diagonal neighbour products."""
    return [
        m[:, :-1] * m[:, 1:],
        m[:-1, :] * m[1:, :],
        m[:-1, :-1] * m[1:, 1:],
        m[1:, :-1] * m[:-1, 1:],
    ]


def _half_scale(image: np.ndarray) -> np.ndarray:
    nx, ny = image.shape[0] // 2 * 2, image.shape[1] // 2 * 2
    return image[:nx, :ny].reshape(nx // 2, 2, ny // 2, 2).mean(axis=(1, 3))


def nss_features(image: np.ndarray) -> np.ndarray:
    """18 statistics per scale at full and half resolution of a 2-D luminance image."""
    values: List[float] = []
    for scaled in (image, _half_scale(image)):
        m = mscn(scaled)
        alpha, sigma = fit_ggd(m)
        values.extend([alpha, sigma ** 2])
        for product in _pair_products(m):
            p = fit_aggd(product)
            values.extend([p.alpha, p.mean_term, p.sigma_left ** 2, p.sigma_right ** 2])
    return np.array(values)


def spatial_features(lfi: LfTensor) -> FeatureVector:
    shape = lfi.shape
    if shape.x < MIN_SPATIAL or shape.y < MIN_SPATIAL:
        raise ImageTooSmall(f"Spatial features need subviews of at least {MIN_SPATIAL}×{MIN_SPATIAL}, "
                            f"got {shape.x}×{shape.y}")
    total = np.zeros(SPATIAL_DIM)
    # Fixed u-major summation order keeps the average reproducible.
    for u in range(shape.u):
        for v in range(shape.v):
            total += nss_features(luminance(lfi.array[u, v]))
    return FeatureVector(FeatureKind.SPATIAL, tuple((total / (shape.u * shape.v)).tolist()))


def direction_moments(g_angular: np.ndarray, g_spatial: np.ndarray) -> List[float]:
    """Mean, std, skewness and excess kurtosis of atan2 directions over nonzero gradients."""
    mask = (g_angular != 0) | (g_spatial != 0)
    theta = np.arctan2(g_angular[mask], g_spatial[mask])
    if theta.size == 0:
        return [0.0, 0.0, 0.0, 0.0]
    std = float(theta.std())
    if std == 0.0:
        return [float(theta.mean()), 0.0, 0.0, 0.0]
    return [float(theta.mean()), std, float(stats.skew(theta)), float(stats.kurtosis(theta, fisher=True))]


def epi_direction_stats(lfi: LfTensor) -> np.ndarray:
    """Direction statistics of the horizontal EPIs (axes v, y) then the vertical EPIs (axes u, x)."""
    shape = lfi.shape
    if shape.u < 2 or shape.v < 2:
        raise AngularTooSmall(f"Angular features need at least 2×2 subviews, got {shape.u}×{shape.v}")
    if shape.x < 2 or shape.y < 2:
        raise ImageTooSmall(f"Angular features need at least 2×2 pixels per subview, got {shape.x}×{shape.y}")
    lum = luminance(lfi.array)
    g_v, g_y = np.gradient(lum, axis=(1, 3))
    g_u, g_x = np.gradient(lum, axis=(0, 2))
    return np.array(direction_moments(g_v, g_y) + direction_moments(g_u, g_x))


AngularExtractor = Callable[[LfTensor], np.ndarray]


@functools.lru_cache(maxsize=None)
def _announce_surrogate() -> None:
    logger.warning('Angular features use the EPI gradient-direction surrogate, not the reference GDD')


def angular_features(lfi: LfTensor, extractor: AngularExtractor = epi_direction_stats) -> FeatureVector:
    if extractor is epi_direction_stats:
        _announce_surrogate()
    return FeatureVector(FeatureKind.ANGULAR, tuple(np.asarray(extractor(lfi), dtype=np.float64).tolist()))


def extract_features(lfi: LfTensor) -> Tuple[np.ndarray, np.ndarray]:
    return spatial_features(lfi).array, angular_features(lfi).array


def fit_label_stats(matrix: Sequence[Sequence[float]]) -> LabelStats:
    rows = np.asarray(matrix, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] < 2:
        raise TooFewRows(f"Label normalization needs at least 2 rows, got {rows.shape[0] if rows.ndim else 0}")
    std = np.maximum(rows.std(axis=0), STD_FLOOR)
    return LabelStats(tuple(rows.mean(axis=0).tolist()), tuple(std.tolist()))


def normalize_labels(matrix: Sequence[Sequence[float]]) -> Tuple[np.ndarray, LabelStats]:
    label_stats = fit_label_stats(matrix)
    return label_stats.apply(matrix), label_stats
