import math

import numpy as np
import pytest

from ulid import fileio
from ulid.frontend import (ENERGY_FLOOR, NoSpeechError, Utterance, energy_vad, extract, fbank,
                           load_features, mel_center_frequencies, mel_filterbank, num_frames, sliding_cmn)

from oracles import dyadic, naive_window_means


def tone(freq, seconds, sr, amp=8000.0):
    t = np.arange(int(seconds * sr)) / sr
    return np.round(amp * np.sin(2 * np.pi * freq * t)).astype(np.int16)


def test_zero_audio_hits_the_floor():
    f = fbank(Utterance(np.zeros(8000, dtype=np.int16), 8000))
    assert f.dim == 64
    np.testing.assert_array_equal(f.frames, np.full(f.frames.shape, math.log(ENERGY_FLOOR)))


@pytest.mark.parametrize("sr", [8000, 16000])
def test_tone_at_each_center_frequency_peaks_in_its_filter(sr):
    for j, fc in enumerate(mel_center_frequencies(sr)):
        f = fbank(Utterance(tone(fc, 0.3, sr), sr))
        assert int(np.argmax(f.frames.mean(axis=1))) == j


def test_frame_count():
    assert num_frames(24000, 8000) == 298
    assert fbank(Utterance(tone(440, 3.0, 8000), 8000)).length == 298
    assert fbank(Utterance(tone(440, 3.0, 16000), 16000)).length == 298


def test_too_short_audio_rejected():
    with pytest.raises(ValueError, match="shorter than one"):
        fbank(Utterance(np.ones(199, dtype=np.int16), 8000))
    with pytest.raises(ValueError, match="sample rate"):
        Utterance(np.ones(400, dtype=np.int16), 44100)


def test_filterbank_shape_and_range():
    fb = mel_filterbank(8000, 512)
    assert fb.shape == (64, 257)
    assert fb.min() >= 0 and fb.max() <= 1
    assert np.all(fb.sum(axis=1) > 0)


def test_vad_keeps_every_frame_of_a_steady_sine():
    assert energy_vad(Utterance(tone(300, 2.0, 8000), 8000)).all()


def test_vad_drops_trailing_silence():
    x = np.concatenate([tone(300, 1.0, 8000), np.zeros(8000, dtype=np.int16)])
    keep = energy_vad(Utterance(x, 8000))
    assert keep[:95].all() and not keep[-95:].any()


def test_vad_keep_ratio_on_known_split():
    n = 30000
    x = np.zeros(n, dtype=np.int16)
    x[int(0.4 * n):] = tone(500, 0.6 * n / 8000, 8000)[: n - int(0.4 * n)]
    keep = energy_vad(Utterance(x, 8000))
    assert abs(keep.mean() - 0.6) <= 0.02


def test_vad_on_silence_raises():
    with pytest.raises(NoSpeechError, match="no speech"):
        energy_vad(Utterance(np.zeros(4000, dtype=np.int16), 8000))


def test_cmn_constant_sequence_is_zero():
    out = sliding_cmn(np.full((64, 700), 3.25)).frames
    np.testing.assert_array_equal(out, 0.0)


@pytest.mark.parametrize("length", [1, 37, 301])
def test_cmn_short_sequences_are_global_mean_normalized(length):
    x = np.random.default_rng(length).normal(size=(8, length)) * 5 + 2
    out = sliding_cmn(x).frames
    assert np.abs(out.mean(axis=1)).max() < 1e-9


@pytest.mark.parametrize("length", [600, 302, 1000])
def test_cmn_matches_naive_window_means(length):
    rng = np.random.default_rng(length)
    x = dyadic(rng, (4, length))
    np.testing.assert_array_equal(sliding_cmn(x).frames, naive_window_means(x))
    y = rng.normal(size=(4, length))
    np.testing.assert_allclose(sliding_cmn(y).frames, naive_window_means(y), rtol=0, atol=1e-12)


def test_extract_is_deterministic_and_normalized():
    rng = np.random.default_rng(0)
    x = (rng.normal(size=16000) * 2000).astype(np.int16)
    a, b = extract(Utterance(x, 8000)), extract(Utterance(x.copy(), 8000))
    assert a.frames.tobytes() == b.frames.tobytes()
    assert np.abs(a.frames.mean(axis=1)).max() < 1e-9


def test_feature_file_round_trip(tmp_path):
    frames = np.random.default_rng(1).normal(size=(64, 123)).astype(np.float32)
    path = tmp_path / "u.ulfb"
    fileio.write_features(path, frames)
    np.testing.assert_array_equal(fileio.read_features(path), frames)
    np.testing.assert_array_equal(load_features(path).frames, frames)


def test_feature_file_corruption_detected(tmp_path):
    frames = np.zeros((64, 10), dtype=np.float32)
    path = tmp_path / "u.ulfb"
    path.write_bytes(fileio.feature_bytes(frames)[:-8])
    with pytest.raises(ValueError):
        fileio.read_features(path)


def test_wav_path_and_manifest(tmp_path):
    x = tone(700, 1.0, 8000)
    fileio.write_wav(tmp_path / "a.wav", x, 8000)
    (tmp_path / "m.lst").write_text("u1 a.wav en 1s\nu2 a.wav -\n")
    entries = fileio.read_manifest(tmp_path / "m.lst")
    assert [e.id for e in entries] == ["u1", "u2"]
    assert entries[0].bucket == "1s" and entries[1].label is None
    direct = extract(Utterance(x, 8000)).frames
    np.testing.assert_array_equal(load_features(entries[0].path).frames, direct)
