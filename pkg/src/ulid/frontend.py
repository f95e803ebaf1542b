"""Log mel-filterbank front end with energy VAD and sliding mean normalization.

Framing is 25 ms windows every 10 ms (Kaldi "snip edges" convention: only
whole frames).  The processing order is fixed: fbank, drop non-speech frames,
then sliding-window mean normalization over the kept frames, which are
treated as contiguous.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import fileio

N_MELS = 64
FRAME_LENGTH_MS = 25
FRAME_SHIFT_MS = 10
LOW_FREQ = 20.0
PREEMPH = 0.97
ENERGY_FLOOR = 1e-10
NFFT = {8000: 512, 16000: 1024}
VAD_DB = 30.0
VAD_ABS_FLOOR = np.log(1e-8)
CMN_WINDOW = 301


class NoSpeechError(ValueError):
    pass


@dataclass
class Utterance:
    samples: np.ndarray
    sample_rate: int
    label: str | None = None
    id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.int16)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError(f"utterance {self.id!r}: need a non-empty mono signal")
        if self.sample_rate not in NFFT:
            raise ValueError(f"utterance {self.id!r}: unsupported sample rate {self.sample_rate}; use 8000 or 16000")

    @classmethod
    def from_wav(cls, path, label=None, id=None):
        samples, rate = fileio.read_wav(path)
        return cls(samples, rate, label, id if id is not None else Path(path).stem)


@dataclass
class FeatureSequence:
    frames: np.ndarray  # (dim, L)
    frame_shift_ms: int = FRAME_SHIFT_MS
    frame_length_ms: int = FRAME_LENGTH_MS

    @property
    def dim(self) -> int:
        return self.frames.shape[0]

    @property
    def length(self) -> int:
        return self.frames.shape[1]


def hz_to_mel(f):
    return 1127.0 * np.log1p(np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * np.expm1(np.asarray(m, dtype=np.float64) / 1127.0)


def mel_center_frequencies(sample_rate: int, n_mels: int = N_MELS) -> np.ndarray:
    edges = np.linspace(hz_to_mel(LOW_FREQ), hz_to_mel(sample_rate / 2), n_mels + 2)
    return mel_to_hz(edges[1:-1])


def mel_filterbank(sample_rate: int, nfft: int, n_mels: int = N_MELS) -> np.ndarray:
    """(n_mels, nfft//2 + 1) triangles, linear in mel, from 20 Hz to Nyquist."""
    edges = np.linspace(hz_to_mel(LOW_FREQ), hz_to_mel(sample_rate / 2), n_mels + 2)
    bins = hz_to_mel(np.arange(nfft // 2 + 1) * sample_rate / nfft)
    left, center, right = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (bins - left) / (center - left)
    down = (right - bins) / (right - center)
    return np.clip(np.minimum(up, down), 0.0, None)


def frame_params(sample_rate: int) -> tuple[int, int]:
    return sample_rate * FRAME_LENGTH_MS // 1000, sample_rate * FRAME_SHIFT_MS // 1000


def num_frames(n_samples: int, sample_rate: int) -> int:
    length, shift = frame_params(sample_rate)
    return 0 if n_samples < length else 1 + (n_samples - length) // shift


def _frames(u: Utterance) -> np.ndarray:
    length, shift = frame_params(u.sample_rate)
    if u.samples.size < length:
        raise ValueError(f"utterance {u.id!r}: {u.samples.size} samples is shorter than one {FRAME_LENGTH_MS} ms frame")
    n = num_frames(u.samples.size, u.sample_rate)
    x = u.samples.astype(np.float64)
    frames = np.lib.stride_tricks.sliding_window_view(x, length)[::shift][:n]
    return frames - frames.mean(axis=1, keepdims=True)


def fbank(u: Utterance) -> FeatureSequence:
    """64 log mel-filterbank energies per frame, before VAD and normalization."""
    frames = _frames(u)
    emph = np.concatenate([frames[:, :1] * (1 - PREEMPH), frames[:, 1:] - PREEMPH * frames[:, :-1]], axis=1)
    windowed = emph * np.hamming(frames.shape[1])
    nfft = NFFT[u.sample_rate]
    power = np.abs(np.fft.rfft(windowed, n=nfft, axis=1)) ** 2
    energies = power @ mel_filterbank(u.sample_rate, nfft).T
    return FeatureSequence(np.log(np.maximum(energies, ENERGY_FLOOR)).T)


def frame_log_energy(u: Utterance) -> np.ndarray:
    frames = _frames(u)
    return np.log(np.maximum((frames * frames).sum(axis=1), ENERGY_FLOOR))


def energy_vad(u: Utterance, db: float = VAD_DB) -> np.ndarray:
    """Boolean keep-mask: within ``db`` of the loudest frame and above an absolute floor."""
    loge = frame_log_energy(u)
    keep = (loge > loge.max() - db * np.log(10) / 10) & (loge > VAD_ABS_FLOOR)
    if not keep.any():
        raise NoSpeechError(f"utterance {u.id!r}: no speech detected")
    return keep


def sliding_cmn(f: FeatureSequence | np.ndarray, window: int = CMN_WINDOW) -> FeatureSequence:
    """Subtract from each frame the mean of a centered window of min(window, L) frames.

    Near the edges the window is shifted to stay inside the sequence, so a
    sequence no longer than ``window`` gets plain global mean subtraction.
    """
    x = getattr(f, "frames", f)
    x = np.asarray(x, dtype=np.float64)
    length = x.shape[1]
    w = min(window, length)
    start = np.clip(np.arange(length) - window // 2, 0, length - w)
    csum = np.concatenate([np.zeros((x.shape[0], 1)), np.cumsum(x, axis=1)], axis=1)
    means = (csum[:, start + w] - csum[:, start]) / w
    return FeatureSequence(x - means)


def extract(u: Utterance, vad_db: float = VAD_DB, cmn_window: int = CMN_WINDOW) -> FeatureSequence:
    """fbank -> VAD frame selection -> sliding mean normalization."""
    feats = fbank(u)
    keep = energy_vad(u, vad_db)
    return sliding_cmn(feats.frames[:, keep], cmn_window)


def load_features(path, **options) -> FeatureSequence:
    """Features from a cached ``.ulfb`` file or computed from a WAV file."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == fileio.FEATURE_MAGIC:
        return FeatureSequence(fileio.read_features(path))
    return extract(Utterance.from_wav(path), **options)


def load_manifest_features(entries, workers: int = 1, **options) -> list[FeatureSequence]:
    """Features for each manifest entry, in manifest order."""
    def one(e):
        return load_features(e.path, **options)

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(one, entries))
    return [one(e) for e in entries]
