"""On-disk formats: WAV audio, manifests, feature cache files, atomic writes."""
from __future__ import annotations

import os
import struct
import tempfile
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FEATURE_MAGIC = b"ULFB"
FEATURE_VERSION = 1


def atomic_write(path, data: bytes | str):
    """Write ``data`` to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_wav(path) -> tuple[np.ndarray, int]:
    with wave.open(str(path), "rb") as w:
        if w.getsampwidth() != 2 or w.getnchannels() != 1:
            raise ValueError(f"{path}: expected 16-bit mono PCM, got {8 * w.getsampwidth()}-bit x {w.getnchannels()} channels")
        rate = w.getframerate()
        samples = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2").astype(np.int16)
    return samples, rate


def wav_bytes(samples: np.ndarray, rate: int) -> bytes:
    import io

    buf = io.BytesIO()
    with wave.open(buf, "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(rate)
        w.writeframes(np.asarray(samples, dtype="<i2").tobytes())
    return buf.getvalue()


def write_wav(path, samples: np.ndarray, rate: int):
    atomic_write(path, wav_bytes(samples, rate))


@dataclass
class ManifestEntry:
    id: str
    path: Path
    label: str | None
    bucket: str | None = None


def read_manifest(path) -> list[ManifestEntry]:
    """Lines ``<id> <path> <label|-> [<duration_bucket>]``; relative paths resolve against the manifest."""
    path = Path(path)
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) not in (3, 4):
            raise ValueError(f"{path}:{lineno}: expected '<id> <path> <label|-> [bucket]', got {line!r}")
        p = Path(parts[1])
        if not p.is_absolute():
            p = path.parent / p
        label = None if parts[2] == "-" else parts[2]
        entries.append(ManifestEntry(parts[0], p, label, parts[3] if len(parts) == 4 else None))
    return entries


def format_manifest(entries) -> str:
    lines = []
    for e in entries:
        fields = [e.id, str(e.path), e.label or "-"]
        if e.bucket:
            fields.append(e.bucket)
        lines.append(" ".join(fields))
    return "\n".join(lines) + "\n"


def feature_bytes(frames: np.ndarray) -> bytes:
    frames = np.asarray(frames)
    dim, n = frames.shape
    header = FEATURE_MAGIC + struct.pack("<III", FEATURE_VERSION, dim, n)
    return header + np.ascontiguousarray(frames, dtype="<f4").tobytes()


def write_features(path, frames: np.ndarray):
    atomic_write(path, feature_bytes(frames))


def read_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != FEATURE_MAGIC:
        raise ValueError(f"{path}: not a feature file (bad magic)")
    if len(raw) < 16:
        raise ValueError(f"{path}: truncated feature header")
    version, dim, n = struct.unpack("<III", raw[4:16])
    if version != FEATURE_VERSION:
        raise ValueError(f"{path}: feature file version {version}, expected {FEATURE_VERSION}")
    body = raw[16:]
    if len(body) != 4 * dim * n:
        raise ValueError(f"{path}: truncated feature data ({len(body)} of {4 * dim * n} bytes)")
    return np.frombuffer(body, dtype="<f4").reshape(dim, n).astype(np.float32)
