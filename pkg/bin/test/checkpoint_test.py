import numpy as np
import pytest

from lib.checkpoint import (_HEADER, _LAYER, _META, MAGIC, META_MAGIC, VERSION, decode, encode, load_checkpoint,
                            save_checkpoint)
from lib.env import Scale
from lib.lf_features import LabelStats
from lib.lf_model import TINY_INPUT, AblationKind, BadCheckpoint, build_ablation, build_alas_dads, predict
from lib.lf_ops import LayerKind
from lib.lf_tensor import LfTensor


def test_round_trip_keeps_everything(tmp_path):
    label_stats = LabelStats(tuple(np.linspace(0, 1, 44).tolist()), tuple(np.linspace(1, 2, 44).tolist()))
    model = build_alas_dads(TINY_INPUT, Scale.TINY, seed=4, lam=0.05).with_label_stats(label_stats)
    path = tmp_path / 'model.alas'
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    assert loaded.input_shape == model.input_shape
    assert loaded.lam == 0.05
    assert loaded.scale == Scale.TINY
    assert loaded.label_stats == label_stats
    assert [layer.describe() for _, layer in loaded.layers()] == [layer.describe() for _, layer in model.layers()]
    assert [layer.tag for layer in loaded.trunk] == [layer.tag for layer in model.trunk]
    for key, value in model.parameters().items():
        assert np.array_equal(loaded.parameters()[key], value)

    lfi = LfTensor(np.random.default_rng(0).uniform(0, 255, size=TINY_INPUT.dims))
    before, after = predict(model, lfi), predict(loaded, lfi)
    assert before.score == after.score
    assert np.array_equal(before.spatial, after.spatial)
    assert np.array_equal(before.angular, after.angular)


def test_encoding_is_stable():
    model = build_ablation(AblationKind.LF_ASC, TINY_INPUT, channels=4)
    raw = encode(model)
    assert raw[:4] == b'ALAS'
    assert encode(decode(raw)) == raw


def test_corrupt_checkpoints_are_rejected(tmp_path):
    raw = encode(build_ablation(AblationKind.LF_DSC, TINY_INPUT, channels=4))
    with pytest.raises(BadCheckpoint):
        decode(b'NOPE' + raw[4:])
    with pytest.raises(BadCheckpoint):
        decode(raw[:-3])
    with pytest.raises(BadCheckpoint):
        decode(raw + b'\0')
    with pytest.raises(BadCheckpoint):
        load_checkpoint(tmp_path / 'missing.alas')


def handmade(flags=0, tag=b'', scale=0, dims=(3, 3, 8, 8, 3)):
    """A one-layer checkpoint holding a ReLU, with every field under the caller's control."""
    layer = _LAYER.pack(0, list(LayerKind).index(LayerKind.RELU), 0, 0, 1, 1, 1, -1, 0.0, flags, len(tag))
    return _HEADER.pack(MAGIC, VERSION, 1) + layer + tag + _META.pack(META_MAGIC, 0.1, scale, *dims, 0)


def test_handmade_checkpoint_decodes():
    model = decode(handmade(tag=b'00:relu'))
    assert [layer.kind for layer in model.trunk] == [LayerKind.RELU]
    assert model.trunk[0].tag == '00:relu'


@pytest.mark.parametrize('raw,message', [
    (handmade(flags=1), 'takes none'),
    (handmade(flags=2), 'takes none'),
    (handmade(scale=7), 'unknown scale 7'),
    (handmade(dims=(0, 3, 8, 8, 3)), 'invalid input shape'),
    (handmade(tag=b'\xff\xfe'), 'not UTF-8'),
])
def test_malformed_fields_are_bad_checkpoints(raw, message):
    with pytest.raises(BadCheckpoint, match=message):
        decode(raw)
