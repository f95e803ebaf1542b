import struct

import numpy as np
import pytest

from ulid import autodiff as ad
from ulid.autodiff import Tensor, check_gradients
from ulid.backbone import ConvStackSpec
from ulid.encoders import KINDS, EncoderSpec
from ulid.evaluator import score_features
from ulid.model import (CheckpointShapeError, CheckpointVersionError, ClassMismatchError, ModelSpec,
                        TooShortError, TruncatedCheckpointError, build_model, checkpoint_bytes, classify,
                        load_checkpoint, log_posteriors, read_checkpoint, save_checkpoint)
from ulid.trainer import SGD, train_step

TINY = "c3x3/2@4 r3x3/2@8"


def small_model(kind="lde", k=3, seed=0, dtype=np.float32, conv=TINY, components=4):
    conv = ConvStackSpec.parse(conv)
    spec = ModelSpec(conv, EncoderSpec(kind, conv.final_feature_dim, components=components), k, seed)
    return build_model(spec, dtype)


def test_untrained_default_model_is_near_uniform():
    k = 6
    model = build_model(ModelSpec(n_classes=k, seed=0))
    rng = np.random.default_rng(0)
    for _ in range(20):
        p = classify(model, rng.normal(size=(64, int(rng.integers(100, 400)))))
        assert p.sum() == pytest.approx(1.0)
        assert p.min() >= 0.5 / k and p.max() <= 2.0 / k


def test_same_seed_same_outputs():
    x = np.random.default_rng(1).normal(size=(64, 80))
    a, b = small_model(seed=5), small_model(seed=5)
    assert log_posteriors(a, x).tobytes() == log_posteriors(b, x).tobytes()


def test_too_short_features():
    with pytest.raises(TooShortError, match="minimum 4"):
        log_posteriors(small_model(), np.zeros((64, 3)))


def test_spec_dimension_mismatch():
    with pytest.raises(ValueError, match="d_in"):
        ModelSpec(ConvStackSpec.parse(TINY), EncoderSpec("tap", 16), 3)


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    model = small_model("gru")
    model.head.bias.data[:] = [0.1, -0.2, 0.3]
    x = np.random.default_rng(2).normal(size=(64, 120))
    path = tmp_path / "m.ulck"
    save_checkpoint(model, path, epoch=4, config_hash="abc")
    loaded, header = load_checkpoint(path)
    assert header["epoch"] == 4 and header["config_hash"] == "abc"
    assert loaded.languages == model.languages
    assert log_posteriors(loaded, x).tobytes() == log_posteriors(model, x).tobytes()
    for name, arr in model.state_dict().items():
        assert loaded.state_dict()[name].tobytes() == arr.tobytes()


def test_truncated_checkpoint(tmp_path):
    raw = checkpoint_bytes(small_model())
    path = tmp_path / "t.ulck"
    path.write_bytes(raw[:-10])
    with pytest.raises(TruncatedCheckpointError, match="truncated checkpoint"):
        load_checkpoint(path)


def test_unknown_version(tmp_path):
    raw = bytearray(checkpoint_bytes(small_model()))
    raw[4:8] = struct.pack("<I", 99)
    path = tmp_path / "v.ulck"
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointVersionError, match="version 99"):
        load_checkpoint(path)


def test_shape_mismatch(tmp_path):
    good = small_model(components=4)
    other = small_model(components=5)
    # header from the 4-component model, tensors from the 5-component one
    raw_good = checkpoint_bytes(good)
    hlen = struct.unpack("<I", raw_good[8:12])[0]
    raw_other = checkpoint_bytes(other)
    olen = struct.unpack("<I", raw_other[8:12])[0]
    path = tmp_path / "s.ulck"
    path.write_bytes(raw_good[:12 + hlen] + raw_other[12 + olen:])
    with pytest.raises(CheckpointShapeError, match="shape"):
        load_checkpoint(path)


def test_checkpoint_records_are_float32(tmp_path):
    path = tmp_path / "m.ulck"
    save_checkpoint(small_model(dtype=np.float64), path)
    _, records = read_checkpoint(path)
    assert all(a.dtype == np.float32 for a in records.values())


def test_class_count_mismatch():
    model = small_model(k=6)
    items = [(f"u{i}", np.zeros((64, 40)), f"L{i}", "3s") for i in range(14)]
    with pytest.raises(ClassMismatchError, match="6 languages"):
        score_features(model, items, languages=[f"L{i}" for i in range(14)])


@pytest.mark.parametrize("kind", KINDS)
def test_one_step_reduces_loss(kind):
    model = small_model(kind, dtype=np.float64, seed=3)
    rng = np.random.default_rng(4)
    x = rng.normal(size=(4, 64, 40))
    y = np.array([0, 1, 2, 0])
    opt = SGD(model.named_parameters(), momentum=0.0, weight_decay=0.0)
    before, _ = train_step(model, opt, x, y, lr=0.01)
    after = float(ad.softmax_cross_entropy(model(Tensor(x)), y).data)
    assert after < before


@pytest.mark.parametrize("kind", KINDS)
def test_composed_network_gradients(kind):
    model = small_model(kind, dtype=np.float64, seed=6, components=3)
    rng = np.random.default_rng(7)
    x = Tensor(rng.normal(size=(2, 64, 50)), requires_grad=True)
    y = np.array([0, 2])
    params = dict(model.named_parameters(), x=x)
    rep = check_gradients(lambda: ad.softmax_cross_entropy(model(x), y), params, tol=1e-4, max_per_param=20)
    assert rep.passed, rep.violations[:3]
