"""Synthetic multi-"language" corpus: resonance-filtered noise with syllabic modulation.

A language is three resonances.  Each syllable picks one resonance to
dominate, so an utterance is a sequence of short spectral states drawn from
the language's inventory; frame order carries little information, the
distribution of frames carries the identity.  Utterances get per-speaker
resonance jitter, a broadband noise floor and digital silence at both ends.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .fileio import ManifestEntry, atomic_write, format_manifest, write_wav

log = logging.getLogger(__name__)

SAMPLE_RATE = 8000
MIN_SEPARATION_HZ = 200.0
# relative per-utterance resonance shift (std); small enough that a 200 Hz separation stays > 4 std at 3 kHz
RESONANCE_JITTER = 0.015


@dataclass
class SynthLanguageSpec:
    id: str
    resonances: list  # three (center_hz, bandwidth_hz) pairs
    syllable_rate: float = 4.0  # syllables per second
    mod_depth: float = 0.85
    noise_floor: float = -35.0  # dB relative to the voiced signal

    def centers(self):
        return np.array([f for f, _ in self.resonances])


def separated(a: SynthLanguageSpec, b: SynthLanguageSpec, min_hz=MIN_SEPARATION_HZ) -> bool:
    return bool(np.max(np.abs(np.sort(a.centers()) - np.sort(b.centers()))) >= min_hz)


def make_language_specs(n_langs: int, rng, sample_rate=SAMPLE_RATE, lo=300.0, hi=None) -> list[SynthLanguageSpec]:
    """Random resonance triples, redrawn until every pair differs somewhere by >= 200 Hz."""
    if n_langs < 2:
        raise ValueError("need at least two languages")
    hi = hi if hi is not None else 0.85 * sample_rate / 2
    specs = []
    while len(specs) < n_langs:
        centers = np.sort(rng.uniform(lo, hi, 3))
        if np.min(np.diff(centers)) < 250:
            continue
        cand = SynthLanguageSpec(
            id=f"lang{len(specs):02d}",
            resonances=[(round(float(f), 1), round(float(60 + 0.06 * f), 1)) for f in centers],
            syllable_rate=round(float(rng.uniform(3.5, 5.5)), 2),
        )
        if all(separated(cand, s) for s in specs):
            specs.append(cand)
    return specs


def _resonator(noise, center, bandwidth, sample_rate):
    r = np.exp(-np.pi * bandwidth / sample_rate)
    theta = 2 * np.pi * center / sample_rate
    y = lfilter([1 - r], [1, -2 * r * np.cos(theta), r * r], noise)
    return y / (np.sqrt(np.mean(y * y)) + 1e-12)


def synthesize(spec: SynthLanguageSpec, duration: float, rng, sample_rate=SAMPLE_RATE,
               silence=True, jitter=RESONANCE_JITTER) -> np.ndarray:
    """One utterance of ``duration`` seconds of voiced signal as int16 samples."""
    n = int(round(duration * sample_rate))
    streams = []
    for f, bw in spec.resonances:
        fj = min(f * (1 + jitter * rng.standard_normal()), 0.95 * sample_rate / 2)
        streams.append(_resonator(rng.standard_normal(n), fj, bw, sample_rate))
    streams = np.stack(streams)

    # syllable boundaries and per-syllable gains
    gains = np.empty((3, n))
    env = np.empty(n)
    pos = 0
    while pos < n:
        seg = max(int(sample_rate / spec.syllable_rate * rng.uniform(0.6, 1.4)), 8)
        end = min(pos + seg, n)
        g = np.full(3, 0.25)
        g[rng.integers(3)] = 1.0
        gains[:, pos:end] = g[:, None] * rng.uniform(0.7, 1.3, (3, 1))
        phase = (np.arange(end - pos) + 0.5) / seg
        env[pos:end] = 1 - spec.mod_depth * np.cos(np.pi * phase) ** 2
        pos = end
    voiced = (gains * streams).sum(axis=0) * env
    voiced /= np.sqrt(np.mean(voiced * voiced)) + 1e-12
    floor = 10 ** (spec.noise_floor / 20) * rng.standard_normal(n)
    signal = (voiced + floor) * 3000 * rng.uniform(0.5, 1.5)
    if silence:
        lead = int(sample_rate * (0.1 + duration * rng.uniform(0.05, 0.15)))
        trail = int(sample_rate * (0.1 + duration * rng.uniform(0.05, 0.15)))
        signal = np.concatenate([np.zeros(lead), signal, np.zeros(trail)])
    return np.clip(np.round(signal), -32768, 32767).astype(np.int16)


def bucket_name(duration: float) -> str:
    return f"{duration:g}s"


def _utt_rng(seed, lang, split, idx):
    return np.random.default_rng([seed, lang, split, idx])


def generate_corpus(out_dir, n_langs=6, n_train_per_lang=200, n_test_per_lang=50, durations=(1.0, 3.0, 10.0),
                    seed=0, sample_rate=SAMPLE_RATE, train_range=(3.0, 12.0), workers=1):
    """Write WAVs plus ``train.lst``, ``test.lst`` and ``languages.json`` under ``out_dir``.

    Returns the manifest paths as a dict.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"cannot write corpus to {out}: {exc}") from exc
    specs = make_language_specs(n_langs, np.random.default_rng([seed, 999]), sample_rate)

    jobs = []
    for li, spec in enumerate(specs):
        for i in range(n_train_per_lang):
            jobs.append((li, 0, i, None))
        for bi, d in enumerate(durations):
            for i in range(n_test_per_lang):
                jobs.append((li, 1 + bi, i, d))

    def run(job):
        li, split, i, d = job
        rng = _utt_rng(seed, li, split, i)
        dur = d if d is not None else rng.uniform(*train_range)
        spec = specs[li]
        if d is None:
            uid = f"{spec.id}_train_{i:04d}"
            rel = Path("wav") / "train" / f"{uid}.wav"
            bucket = None
        else:
            uid = f"{spec.id}_test{bucket_name(d)}_{i:04d}"
            rel = Path("wav") / f"test_{bucket_name(d)}" / f"{uid}.wav"
            bucket = bucket_name(d)
        write_wav(out / rel, synthesize(spec, dur, rng, sample_rate), sample_rate)
        return split, ManifestEntry(uid, rel, spec.id, bucket)

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    train = [e for s, e in results if s == 0]
    test = [e for s, e in results if s > 0]
    atomic_write(out / "train.lst", format_manifest(train))
    atomic_write(out / "test.lst", format_manifest(test))
    atomic_write(out / "languages.json", json.dumps([asdict(s) for s in specs], indent=1))
    log.info("wrote %d train and %d test utterances for %d languages to %s", len(train), len(test), n_langs, out)
    return {"train": out / "train.lst", "test": out / "test.lst", "languages": out / "languages.json"}
