"""Light field loading, cropping, dihedral augmentation, leakage-free splits and synthetic data."""
from __future__ import annotations

import json
import logging
import math
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from attr import dataclass
from PIL import Image
from scipy import ndimage

from lib.csv_table import read_csv, read_rows, write_csv
from lib.lf_features import ANGULAR_DIM, SPATIAL_DIM, extract_features
from lib.lf_tensor import LfShape, LfTensor, read_lft, subviews, write_lft

logger = logging.getLogger(__name__)

LABELS_CSV = 'labels.csv'
FEATURES_CSV = 'features.csv'
LABEL_COLUMNS = ('source_id', 'path', 'score', 'distortion')
FEATURE_HEADER = ('lfi_path', 'kind') + tuple(f'v{i + 1}' for i in range(SPATIAL_DIM))
MAX_BLUR = 3.0
NOISE_PER_BLUR = 8.0
MIN_SYNTH = 4


class DataError(RuntimeError):
    pass


class MissingSubview(DataError):
    pass


class InconsistentSubviewSize(DataError):
    pass


class BadManifest(DataError):
    pass


class TargetTooLarge(DataError):
    pass


class EmptyDataset(DataError):
    pass


class BadRatio(DataError):
    pass


class BadLabels(DataError):
    pass


class Distortion(Enum):
    BLUR = 'blur'
    NOISE = 'noise'


@dataclass(frozen=True)
class QualityLabel:
    score: float
    spatial: Optional[Tuple[float, ...]] = None
    angular: Optional[Tuple[float, ...]] = None

    def __attrs_post_init__(self):
        if not math.isfinite(self.score):
            raise BadLabels(f"Quality score must be finite, got {self.score}")
        for name, values, length in (('spatial', self.spatial, SPATIAL_DIM), ('angular', self.angular, ANGULAR_DIM)):
            if values is not None and (len(values) != length or not all(map(math.isfinite, values))):
                raise BadLabels(f"{name} label needs {length} finite values, got {values}")

    @property
    def has_features(self) -> bool:
        return self.spatial is not None and self.angular is not None


@dataclass(frozen=True)
class DatasetEntry:
    source_id: str
    lfi: LfTensor
    label: QualityLabel
    distortion: str = 'unknown'

    def with_lfi(self, lfi: LfTensor) -> DatasetEntry:
        return DatasetEntry(self.source_id, lfi, self.label, self.distortion)


def _manifest_field(manifest: dict, name: str, length: Optional[int], origin: Path) -> list:
    value = manifest.get(name)
    if length is None:
        if not isinstance(value, int) or value < 1:
            raise BadManifest(f"{origin}: '{name}' must be a positive integer, got {value!r}")
        return [value]
    if not isinstance(value, list) or len(value) != length or not all(isinstance(v, int) and v >= 1 for v in value):
        raise BadManifest(f"{origin}: '{name}' must be a list of {length} positive integers, got {value!r}")
    return value


def load_lfi(manifest_path: Union[str, Path]) -> LfTensor:
    """Assembles a light field from a JSON manifest of row-major (u-major) subview images."""
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text(encoding='utf-8'))
    except (OSError, ValueError) as e:
        raise BadManifest(f"Unable to read manifest {manifest_path}: {e}") from e
    if not isinstance(manifest, dict):
        raise BadManifest(f"{manifest_path}: manifest must be an object")
    u, v = _manifest_field(manifest, 'angular', 2, manifest_path)
    x, y = _manifest_field(manifest, 'spatial', 2, manifest_path)
    (c,) = _manifest_field(manifest, 'channels', None, manifest_path)
    if c not in (1, 3):
        raise BadManifest(f"{manifest_path}: channels must be 1 or 3, got {c}")
    paths = manifest.get('subviews')
    if not isinstance(paths, list) or len(paths) != u * v:
        raise BadManifest(f"{manifest_path}: 'subviews' must list {u * v} paths")
    array = np.zeros((u, v, x, y, c))
    for index, relative in enumerate(paths):
        path = manifest_path.parent / relative
        if not path.is_file():
            raise MissingSubview(f"{manifest_path}: subview {index} ({path}) does not exist")
        with Image.open(path) as image:
            pixels = np.asarray(image.convert('RGB' if c == 3 else 'L'), dtype=np.float64)
        if pixels.shape[:2] != (x, y):
            raise InconsistentSubviewSize(f"{manifest_path}: subview {index} is {pixels.shape[0]}×{pixels.shape[1]}, "
                                          f"expected {x}×{y}")
        array[index // v, index % v] = pixels.reshape(x, y, c)
    logger.debug('Loaded %s light field from %s', LfShape(u, v, x, y, c), manifest_path)
    return LfTensor(array)


def save_subviews(lfi: LfTensor, directory: Union[str, Path], stem: str = 'view') -> Path:
    """Writes every subview as a PNG plus the manifest describing them; values are clipped to 0-255."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    shape = lfi.shape
    if shape.c not in (1, 3):
        raise BadManifest(f"Only 1- or 3-channel light fields can be written as images, got {shape.c}")
    names = []
    for (u, v), view in subviews(lfi):
        name = f'{stem}_{u:02d}_{v:02d}.png'
        pixels = np.clip(np.rint(view), 0, 255).astype(np.uint8)
        Image.fromarray(pixels[..., 0] if shape.c == 1 else pixels).save(directory / name)
        names.append(name)
    manifest = directory / 'manifest.json'
    manifest.write_text(json.dumps({'angular': [shape.u, shape.v], 'spatial': [shape.x, shape.y],
                                    'channels': shape.c, 'subviews': names}, indent=2), encoding='utf-8')
    return manifest


def trim_reshape(lfi: LfTensor, target: LfShape) -> LfTensor:
    """Centre crop in both the angular and the spatial domain."""
    source = lfi.shape
    if target.c != source.c:
        raise TargetTooLarge(f"Target {target} changes the channel count of {source}")
    if any(t > s for t, s in zip(target.dims, source.dims)):
        raise TargetTooLarge(f"Target {target} exceeds source {source}")
    crop = tuple(slice((s - t) // 2, (s - t) // 2 + t) for s, t in zip(source.dims[:4], target.dims[:4]))
    return LfTensor(lfi.array[crop])


def rot90(lfi: LfTensor, k: int = 1) -> LfTensor:
    """Rotates every subview and the grid of subviews together."""
    rotated = np.rot90(np.rot90(lfi.array, k, axes=(2, 3)), k, axes=(0, 1))
    return LfTensor(np.ascontiguousarray(rotated))


def vflip(lfi: LfTensor) -> LfTensor:
    """Flips rows of every subview and rows of the subview grid."""
    return LfTensor(np.ascontiguousarray(lfi.array[::-1, :, ::-1]))


def augment(lfi: LfTensor) -> List[LfTensor]:
    """0, 90, 180, 270 degree rotations, then the same four vertically flipped."""
    rotations = [lfi] + [rot90(lfi, k) for k in (1, 2, 3)]
    return rotations + [vflip(r) for r in rotations]


def augment_entries(entries: Sequence[DatasetEntry]) -> List[DatasetEntry]:
    """Each augment keeps its source's label and source id."""
    return [entry.with_lfi(variant) for entry in entries for variant in augment(entry.lfi)]


def split(entries: Sequence[DatasetEntry], ratio: float, seed: int) -> Tuple[List[DatasetEntry], List[DatasetEntry]]:
    """Seeded split by source id, so all augments of one source land on the same side."""
    if not entries:
        raise EmptyDataset("Cannot split an empty dataset")
    if not 0.0 < ratio < 1.0:
        raise BadRatio(f"Split ratio must lie strictly between 0 and 1, got {ratio}")
    groups: Dict[str, List[DatasetEntry]] = {}
    for entry in entries:
        groups.setdefault(entry.source_id, []).append(entry)
    sources = list(groups)
    order = np.random.default_rng(seed).permutation(len(sources))
    n_train = math.floor(ratio * len(sources) + 1e-9)
    if n_train == 0 or n_train == len(sources):
        raise EmptyDataset(f"Ratio {ratio} over {len(sources)} sources leaves a segment empty")
    train_ids = {sources[i] for i in order[:n_train]}
    train = [e for i in order[:n_train] for e in groups[sources[i]]]
    test = [e for i in order[n_train:] for e in groups[sources[i]]]
    logger.debug('Split %d sources into %d train / %d test', len(sources), len(train_ids), len(sources) - n_train)
    return train, test


def blur_score(strength: float) -> float:
    """Maps distortion strength 0..3 onto a 5..1 opinion-score scale."""
    return 5.0 - strength * 4.0 / 3.0


def _scene(shape: LfShape, rng: np.random.Generator) -> np.ndarray:
    """Gradient plus sinusoid texture seen from each subview with a per-scene disparity."""
    x = np.arange(shape.x)[:, None]
    y = np.arange(shape.y)[None, :]
    disparity = rng.uniform(-1.0, 1.0)
    slope = rng.uniform(-1.0, 1.0, size=(2, shape.c))
    freq = rng.uniform(0.05, 0.3, size=(2, shape.c))
    phase = rng.uniform(0.0, 2 * np.pi, size=shape.c)
    amplitude = rng.uniform(30.0, 80.0, size=shape.c)
    cu, cv = (shape.u - 1) / 2.0, (shape.v - 1) / 2.0
    array = np.zeros(shape.dims)
    for u in range(shape.u):
        for v in range(shape.v):
            xs = x + disparity * (u - cu)
            ys = y + disparity * (v - cv)
            for c in range(shape.c):
                gradient = slope[0, c] * xs + slope[1, c] * ys
                wave = amplitude[c] * np.sin(2 * np.pi * (freq[0, c] * xs + freq[1, c] * ys) + phase[c])
                array[u, v, :, :, c] = 128.0 + gradient + wave
    return np.clip(array, 0.0, 255.0)


def degrade(array: np.ndarray, distortion: Distortion, strength: float, rng: np.random.Generator) -> np.ndarray:
    if distortion == Distortion.BLUR:
        return ndimage.gaussian_filter(array, sigma=(0, 0, strength, strength, 0))
    noisy = array + rng.normal(0.0, NOISE_PER_BLUR * strength, size=array.shape)
    return np.clip(noisy, 0.0, 255.0)


def synth_dataset(n: int, shape: LfShape, seed: int,
                  distortions: Sequence[Distortion] = (Distortion.BLUR,)) -> List[DatasetEntry]:
    """Procedural scenes, each degraded with a seeded strength b in [0, 3] and scored 5 - 4b/3.

    Distortions cycle over `distortions`; auxiliary labels are the features of the degraded field.
    """
    if n < MIN_SYNTH:
        raise DataError(f"A synthetic dataset needs at least {MIN_SYNTH} entries, got {n}")
    if not distortions:
        raise DataError("At least one distortion is needed")
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(n):
        distortion = distortions[i % len(distortions)]
        strength = float(rng.uniform(0.0, MAX_BLUR))
        lfi = LfTensor(degrade(_scene(shape, rng), distortion, strength, rng))
        spatial, angular = extract_features(lfi)
        label = QualityLabel(blur_score(strength), tuple(spatial.tolist()), tuple(angular.tolist()))
        entries.append(DatasetEntry(f'synth-{i:04d}', lfi, label, distortion.value))
    logger.info('Generated %d synthetic %s light fields', n, shape)
    return entries


def feature_rows(path: str, spatial: Sequence[float], angular: Sequence[float]) -> List[list]:
    """One row per family; angular rows are padded with empty cells to the width of the header."""
    padding = [''] * (SPATIAL_DIM - len(angular))
    return [[path, 'spatial', *spatial], [path, 'angular', *angular, *padding]]


def save_dataset(entries: Sequence[DatasetEntry], directory: Union[str, Path]) -> Path:
    """Tensors as LFT1 files, plus labels.csv and a features.csv cache of the auxiliary labels."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    label_rows, features = [], []
    for entry in entries:
        name = f'{entry.source_id}.lft'
        write_lft(entry.lfi, directory / name)
        label_rows.append([entry.source_id, name, float(entry.label.score), entry.distortion])
        if entry.label.has_features:
            features += feature_rows(name, entry.label.spatial, entry.label.angular)
    write_csv(directory / LABELS_CSV, LABEL_COLUMNS, label_rows)
    write_csv(directory / FEATURES_CSV, FEATURE_HEADER, features)
    logger.info('Wrote %d entries to %s', len(entries), directory)
    return directory / LABELS_CSV


def _read_feature_cache(path: Path) -> Dict[Tuple[str, str], Tuple[float, ...]]:
    if not path.is_file():
        return {}
    return {(row[0], row[1]): tuple(float(value) for value in row[2:] if value) for row in read_rows(path) if row}


def load_dataset(directory: Union[str, Path]) -> List[DatasetEntry]:
    """Reads labels.csv (source_id,path,score[,distortion]); features come from the cache or are computed."""
    directory = Path(directory)
    labels = directory / LABELS_CSV
    if not labels.is_file():
        raise EmptyDataset(f"No {LABELS_CSV} in {directory}")
    cache = _read_feature_cache(directory / FEATURES_CSV)
    entries = []
    for row in read_csv(labels):
        try:
            source_id, name, score = row['source_id'], row['path'], float(row['score'])
        except (KeyError, TypeError, ValueError) as e:
            raise BadLabels(f"{labels}: malformed row {row}") from e
        path = directory / name
        lfi = load_lfi(path) if path.suffix == '.json' else read_lft(path)
        spatial, angular = cache.get((name, 'spatial')), cache.get((name, 'angular'))
        if spatial is None or angular is None:
            s, a = extract_features(lfi)
            spatial, angular = tuple(s.tolist()), tuple(a.tolist())
        entries.append(DatasetEntry(source_id, lfi, QualityLabel(score, spatial, angular),
                                    row.get('distortion') or 'unknown'))
    if not entries:
        raise EmptyDataset(f"{labels} lists no entries")
    logger.info('Loaded %d entries from %s', len(entries), directory)
    return entries
