import json
from collections import Counter

import numpy as np
import pytest

from lib.lf_data import (BadManifest, BadRatio, DataError, DatasetEntry, Distortion, EmptyDataset,
                         InconsistentSubviewSize, MissingSubview, QualityLabel, TargetTooLarge, augment,
                         augment_entries, blur_score, load_dataset, load_lfi, rot90, save_dataset, save_subviews,
                         split, synth_dataset, trim_reshape, vflip)
from lib.lf_tensor import LfShape, LfTensor, create, transpose_uv

SMALL = LfShape(3, 3, 16, 16, 3)


def integer_field(shape=LfShape(2, 3, 4, 5, 3), seed=0):
    return LfTensor(np.random.default_rng(seed).integers(0, 256, size=shape.dims).astype(np.float64))


def entry(source_id, score=3.0):
    return DatasetEntry(source_id, integer_field(LfShape(1, 1, 2, 2, 1)), QualityLabel(score))


def test_subview_images_round_trip(tmp_path):
    lfi = integer_field()
    manifest = save_subviews(lfi, tmp_path, 'scene')
    assert load_lfi(manifest) == lfi
    grey = integer_field(LfShape(2, 2, 4, 4, 1))
    assert load_lfi(save_subviews(grey, tmp_path / 'grey')) == grey


def test_manifest_errors(tmp_path):
    manifest = save_subviews(integer_field(), tmp_path)
    content = json.loads(manifest.read_text())

    broken = tmp_path / 'bad.json'
    broken.write_text(json.dumps({**content, 'angular': [2]}))
    with pytest.raises(BadManifest):
        load_lfi(broken)

    missing = tmp_path / 'missing.json'
    missing.write_text(json.dumps({**content, 'subviews': content['subviews'][:-1] + ['nope.png']}))
    with pytest.raises(MissingSubview):
        load_lfi(missing)

    resized = tmp_path / 'resized.json'
    resized.write_text(json.dumps({**content, 'spatial': [5, 5]}))
    with pytest.raises(InconsistentSubviewSize):
        load_lfi(resized)


def test_trim_reshape_is_a_centre_crop():
    lfi = create(LfShape(5, 5, 6, 6, 1), range(5 * 5 * 6 * 6))
    cropped = trim_reshape(lfi, LfShape(3, 3, 4, 4, 1))
    assert cropped.shape == LfShape(3, 3, 4, 4, 1)
    assert cropped.at((0, 0, 0, 0, 0)) == lfi.at((1, 1, 1, 1, 0))
    assert trim_reshape(lfi, lfi.shape) == lfi
    with pytest.raises(TargetTooLarge):
        trim_reshape(lfi, LfShape(7, 5, 6, 6, 1))
    with pytest.raises(TargetTooLarge):
        trim_reshape(lfi, LfShape(5, 5, 6, 6, 3))


def test_rotation_moves_pixels_and_subviews_together():
    lfi = integer_field(LfShape(3, 3, 4, 4, 1))
    rotated = rot90(lfi)
    assert rotated.at((0, 0, 0, 0, 0)) == lfi.at((0, 2, 0, 3, 0))
    assert rot90(rot90(rot90(rot90(lfi)))) == lfi
    assert vflip(vflip(lfi)) == lfi


def test_augment_gives_the_eight_dihedral_variants():
    lfi = integer_field(LfShape(3, 3, 4, 4, 2))
    variants = augment(lfi)
    assert len(variants) == 8
    assert variants[0] == lfi
    assert len({v for v in variants}) == 8
    assert any(v == transpose_uv(lfi) for v in variants)


def test_augment_entries_keep_labels_and_sources():
    entries = [entry('a', 2.0), entry('b', 4.0)]
    augmented = augment_entries(entries)
    assert len(augmented) == 16
    assert [e.source_id for e in augmented] == ['a'] * 8 + ['b'] * 8
    assert {e.label.score for e in augmented[:8]} == {2.0}


def test_split_keeps_sources_together():
    entries = augment_entries([entry(f'src-{i}') for i in range(10)])
    train, test = split(entries, 0.8, seed=3)
    assert len(train) == 64 and len(test) == 16
    assert not {e.source_id for e in train} & {e.source_id for e in test}
    again_train, _ = split(entries, 0.8, seed=3)
    assert [e.source_id for e in again_train] == [e.source_id for e in train]


def test_split_errors():
    with pytest.raises(EmptyDataset):
        split([], 0.5, 0)
    with pytest.raises(BadRatio):
        split([entry('a'), entry('b')], 1.0, 0)
    with pytest.raises(EmptyDataset):
        split([entry('a'), entry('b')], 0.4, 0)


def test_quality_labels_validate_lengths():
    assert QualityLabel(3.0, (0.0,) * 36, (0.0,) * 8).has_features
    assert not QualityLabel(3.0).has_features
    with pytest.raises(DataError):
        QualityLabel(3.0, (0.0,) * 35, (0.0,) * 8)
    with pytest.raises(DataError):
        QualityLabel(float('nan'))


def test_blur_score_range():
    assert blur_score(0.0) == 5.0
    assert blur_score(3.0) == 1.0


def test_synthetic_dataset_is_seeded_and_labelled():
    first = synth_dataset(4, SMALL, seed=11, distortions=(Distortion.BLUR, Distortion.NOISE))
    second = synth_dataset(4, SMALL, seed=11, distortions=(Distortion.BLUR, Distortion.NOISE))
    assert [e.lfi for e in first] == [e.lfi for e in second]
    assert [e.distortion for e in first] == ['blur', 'noise', 'blur', 'noise']
    assert all(e.label.has_features and 1.0 <= e.label.score <= 5.0 for e in first)
    assert all(e.lfi.shape == SMALL for e in first)
    with pytest.raises(DataError):
        synth_dataset(2, SMALL, seed=0)


def test_dataset_round_trip(tmp_path):
    entries = synth_dataset(4, SMALL, seed=2)
    save_dataset(entries, tmp_path)
    assert (tmp_path / 'labels.csv').read_text().splitlines()[0] == 'source_id,path,score,distortion'
    loaded = load_dataset(tmp_path)
    assert [e.source_id for e in loaded] == [e.source_id for e in entries]
    assert [e.label.score for e in loaded] == [e.label.score for e in entries]
    assert [e.label.spatial for e in loaded] == [e.label.spatial for e in entries]
    assert [e.label.angular for e in loaded] == [e.label.angular for e in entries]
    widths = {len(line.split(',')) for line in (tmp_path / 'features.csv').read_text().splitlines()}
    assert widths == {2 + 36}
    assert all(np.allclose(a.lfi.array, b.lfi.array, atol=1e-4) for a, b in zip(loaded, entries))


def test_features_are_computed_when_not_cached(tmp_path):
    save_dataset(synth_dataset(4, SMALL, seed=5), tmp_path)
    (tmp_path / 'features.csv').unlink()
    loaded = load_dataset(tmp_path)
    assert all(e.label.has_features for e in loaded)


def test_missing_labels_file(tmp_path):
    with pytest.raises(EmptyDataset):
        load_dataset(tmp_path)


def test_every_augment_keeps_the_pixels():
    lfi = integer_field(LfShape(2, 3, 4, 5, 2), seed=4)
    pixels = np.sort(lfi.array, axis=None)
    subviews = sorted(np.sort(lfi.array[u, v], axis=None).tobytes() for u in range(2) for v in range(3))
    for k, variant in enumerate(augment(lfi)):
        expected = LfShape(3, 2, 5, 4, 2) if k % 2 else lfi.shape
        assert variant.shape == expected
        assert np.array_equal(np.sort(variant.array, axis=None), pixels)
        shape = variant.shape
        assert sorted(np.sort(variant.array[u, v], axis=None).tobytes()
                      for u in range(shape.u) for v in range(shape.v)) == subviews


def test_split_never_separates_a_source():
    sources = [entry(f'src-{i}', score=float(i)) for i in range(7)]
    entries = augment_entries(sources)
    for seed in range(100):
        train, test = split(entries, 0.6, seed=seed)
        train_ids = {e.source_id for e in train}
        test_ids = {e.source_id for e in test}
        assert not train_ids & test_ids
        assert train_ids | test_ids == {e.source_id for e in sources}
        assert len(train_ids) == 4
        assert len(train) + len(test) == len(entries)
        counts = Counter(e.source_id for e in train + test)
        assert set(counts.values()) == {8}
