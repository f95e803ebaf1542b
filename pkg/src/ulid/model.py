"""Backbone -> encoder -> linear classifier, whole-utterance inference and checkpoints.

Checkpoint byte layout (all integers little-endian u32):

    b"ULCK" | version | header_len | header (UTF-8 JSON) | records...

The JSON header carries ``model_spec``, ``languages``, ``epoch``,
``config_hash`` and ``n_records``.  Each record is

    name_len | name (UTF-8) | ndim | dims[ndim] | float32 LE data (row-major)

Records hold every parameter and normalization running statistic, in the
model's ``state_dict`` order.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import ConvStackSpec, build_backbone, default_spec
from .encoders import EncoderSpec, build_encoder
from .fileio import atomic_write
from .nn import Linear, Module

CHECKPOINT_MAGIC = b"ULCK"
CHECKPOINT_VERSION = 1
HEAD_INIT_SCALE = 0.1


class CheckpointError(ValueError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class ClassMismatchError(ValueError):
    pass


class TooShortError(ValueError):
    pass


@dataclass
class ModelSpec:
    conv: ConvStackSpec = field(default_factory=default_spec)
    encoder: EncoderSpec | None = None
    n_classes: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.encoder is None:
            self.encoder = EncoderSpec("tap", self.conv.final_feature_dim)
        if self.encoder.d_in != self.conv.final_feature_dim:
            raise ValueError(f"encoder d_in {self.encoder.d_in} != backbone output dim {self.conv.final_feature_dim}")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")

    def to_dict(self):
        return {"conv": self.conv.to_dict(), "encoder": self.encoder.to_dict(),
                "n_classes": self.n_classes, "seed": self.seed}

    @classmethod
    def from_dict(cls, d):
        return cls(ConvStackSpec.from_dict(d["conv"]), EncoderSpec(**d["encoder"]), d["n_classes"], d["seed"])


class LidModel(Module):
    def __init__(self, spec: ModelSpec, dtype=np.float32, languages=None):
        super().__init__()
        object.__setattr__(self, "spec", spec)
        object.__setattr__(self, "languages", list(languages) if languages else [str(i) for i in range(spec.n_classes)])
        if len(self.languages) != spec.n_classes:
            raise ValueError(f"{len(self.languages)} language names for {spec.n_classes} classes")
        rng = np.random.default_rng(spec.seed)
        self.backbone = build_backbone(spec.conv, int(rng.integers(2**31)), dtype)
        self.encoder = build_encoder(spec.encoder, rng, dtype)
        self.head = Linear(spec.encoder.output_dim, spec.n_classes, rng, dtype)
        # small classifier init so an untrained model starts close to uniform posteriors
        self.head.weight.data *= HEAD_INIT_SCALE

    @property
    def dtype(self):
        return self.head.weight.dtype

    def embed(self, x) -> Tensor:
        return self.encoder(self.backbone(x))

    def forward(self, x) -> Tensor:
        """(N, 64, L) features -> (N, K) logits."""
        return self.head(self.embed(x))


def build_model(spec: ModelSpec, dtype=np.float32, languages=None) -> LidModel:
    return LidModel(spec, dtype, languages)


def log_posteriors(model: LidModel, features) -> np.ndarray:
    frames = np.asarray(getattr(features, "frames", features))
    if frames.shape[-1] < model.spec.conv.min_length:
        raise TooShortError(f"{frames.shape[-1]} frames is shorter than the minimum {model.spec.conv.min_length}")
    was_training = model.training
    model.eval()
    try:
        with ad.no_grad():
            logits = model(Tensor(frames[None].astype(model.dtype))).data[0]
    finally:
        model.train(was_training)
    z = logits.astype(np.float64)
    z = z - z.max()
    return z - np.log(np.exp(z).sum())


def classify(model: LidModel, features) -> np.ndarray:
    """Posterior over the K languages for one (64, L) utterance, in inference mode."""
    return np.exp(log_posteriors(model, features))


# checkpoints -----------------------------------------------------------------

def checkpoint_bytes(model: LidModel, epoch=0, config_hash=None) -> bytes:
    state = model.state_dict()
    header = json.dumps({
        "model_spec": model.spec.to_dict(),
        "languages": model.languages,
        "epoch": int(epoch),
        "config_hash": config_hash,
        "n_records": len(state),
    }, sort_keys=True).encode("utf-8")
    out = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(header)), header]
    for name, arr in state.items():
        nb = name.encode("utf-8")
        arr = np.asarray(arr)
        out.append(struct.pack("<I", len(nb)) + nb + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def save_checkpoint(model: LidModel, path, epoch=0, config_hash=None):
    atomic_write(path, checkpoint_bytes(model, epoch, config_hash))


class _Reader:
    def __init__(self, raw):
        self.raw, self.pos = raw, 0

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise TruncatedCheckpointError(f"truncated checkpoint: need {n} bytes at offset {self.pos}, file has {len(self.raw)}")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, count=1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals if count > 1 else vals[0]


def read_checkpoint(path):
    """Return (header dict, ordered name -> float32 array)."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, this build reads version {CHECKPOINT_VERSION}")
    header = json.loads(r.take(r.u32()).decode("utf-8"))
    records = {}
    for _ in range(header["n_records"]):
        name = r.take(r.u32()).decode("utf-8")
        ndim = r.u32()
        dims = tuple(np.atleast_1d(r.u32(ndim))) if ndim else ()
        count = int(np.prod(dims)) if dims else 1
        records[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims)
    if r.pos != len(r.raw):
        raise CheckpointError(f"{path}: {len(r.raw) - r.pos} trailing bytes after last record")
    return header, records


def load_checkpoint(path):
    """Rebuild the model from its embedded spec and restore every tensor; returns (model, header)."""
    header, records = read_checkpoint(path)
    spec = ModelSpec.from_dict(header["model_spec"])
    model = LidModel(spec, np.float32, header.get("languages"))
    expected = model.state_dict()
    missing = [n for n in expected if n not in records]
    if missing:
        raise CheckpointShapeError(f"{path}: checkpoint lacks tensors {missing[:5]}")
    for name, arr in expected.items():
        if records[name].shape != arr.shape:
            raise CheckpointShapeError(f"{path}: tensor {name} has shape {records[name].shape}, spec implies {arr.shape}")
    model.load_state_dict(records)
    model.eval()
    return model, header
