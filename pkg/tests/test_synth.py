import hashlib
import json
import os

import numpy as np
import pytest

from ulid.fileio import read_manifest
from ulid.frontend import Utterance, energy_vad
from ulid.synth import (SynthLanguageSpec, bucket_name, generate_corpus, make_language_specs, separated,
                        synthesize)


def tree_digest(root):
    h = hashlib.sha256()
    for dirpath, _, files in sorted(os.walk(root)):
        for name in sorted(files):
            p = os.path.join(dirpath, name)
            h.update(os.path.relpath(p, root).encode())
            with open(p, "rb") as f:
                h.update(f.read())
    return h.hexdigest()


def test_corpus_regenerates_byte_identically(tmp_path):
    kw = dict(n_langs=3, n_train_per_lang=2, n_test_per_lang=2, durations=(1, 3), seed=4)
    generate_corpus(tmp_path / "a", **kw)
    generate_corpus(tmp_path / "b", workers=3, **kw)
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
    generate_corpus(tmp_path / "c", **dict(kw, seed=5))
    assert tree_digest(tmp_path / "a") != tree_digest(tmp_path / "c")


def test_manifests_and_bucket_tags(tmp_path):
    paths = generate_corpus(tmp_path, n_langs=2, n_train_per_lang=3, n_test_per_lang=2, durations=(1, 3, 10))
    train, test = read_manifest(paths["train"]), read_manifest(paths["test"])
    assert len(train) == 6 and all(e.bucket is None for e in train)
    assert sorted({e.bucket for e in test}) == ["10s", "1s", "3s"]
    assert all(e.path.exists() and e.label in ("lang00", "lang01") for e in train + test)
    langs = json.loads(paths["languages"].read_text())
    assert [l["id"] for l in langs] == ["lang00", "lang01"]
    assert bucket_name(3.0) == "3s" and bucket_name(1.5) == "1.5s"


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="cannot write corpus"):
        generate_corpus(blocker / "sub", n_langs=2, n_train_per_lang=1, n_test_per_lang=1)


def test_language_specs_are_separated():
    specs = make_language_specs(14, np.random.default_rng(0))
    assert len({s.id for s in specs}) == 14
    for i, a in enumerate(specs):
        for b in specs[i + 1:]:
            assert separated(a, b)


def test_silence_and_keep_ratio():
    spec = make_language_specs(2, np.random.default_rng(1))[0]
    for seed in range(5):
        x = synthesize(spec, 3.0, np.random.default_rng(seed))
        assert x[:800].max() == 0 and x[-800:].max() == 0
        ratio = energy_vad(Utterance(x, 8000)).mean()
        assert 0.3 < ratio < 0.95


def spectral_centroid(x, sr=8000):
    spec = np.abs(np.fft.rfft(x.astype(np.float64))) ** 2
    freqs = np.fft.rfftfreq(x.size, 1 / sr)
    return float((spec * freqs).sum() / spec.sum())


def test_well_separated_languages_are_trivially_learnable():
    a = SynthLanguageSpec("a", [(500.0, 90.0), (800.0, 108.0), (1100.0, 126.0)], 4.0)
    b = SynthLanguageSpec("b", [(2500.0, 210.0), (2800.0, 228.0), (3100.0, 246.0)], 4.0)
    rng = np.random.default_rng(0)
    train = {k: [spectral_centroid(synthesize(s, 3.0, rng)) for _ in range(20)] for k, s in (("a", a), ("b", b))}
    cut = 0.5 * (np.mean(train["a"]) + np.mean(train["b"]))
    hits = 0
    for _ in range(50):
        hits += spectral_centroid(synthesize(a, 3.0, rng)) < cut
        hits += spectral_centroid(synthesize(b, 3.0, rng)) >= cut
    assert hits / 100 > 0.95
