"""Run configuration: ``section.key = value`` lines, ``#`` comments.

Every key has a documented default in ``DEFAULTS``; unknown keys are errors.
"""
from __future__ import annotations

import hashlib
import os
from pathlib import Path

from .backbone import ConvStackSpec, default_spec
from .encoders import EncoderSpec
from .trainer import TrainConfig

DEFAULTS = {
    "seed": ("0", "global seed; falls back to $ULID_SEED when not set"),
    "workers": ("1", "parallel utterance workers for feature extraction / scoring"),
    "frontend.vad_db": ("30", "VAD keeps frames within this many dB of the loudest frame"),
    "frontend.cmn_window": ("301", "sliding mean-normalization window, frames"),
    "conv.spec": (default_spec().to_string(), "layer string, see `ulid rf --help`"),
    "encoder.kind": ("tap", "tap | gru | lstm | lde"),
    "encoder.components": ("64", "LDE dictionary size C"),
    "encoder.layers": ("2", "stacked recurrent layers"),
    "encoder.lde_norm": ("frames", "LDE normalization: frames (1/L) or weights (1/sum_t w)"),
    "train.epochs": ("90", "training epochs"),
    "train.lr0": ("0.1", "initial learning rate"),
    "train.decay": ("60:0.1,80:0.01", "epoch:multiplier-of-lr0 pairs"),
    "train.batch_size": ("32", "utterances per step"),
    "train.crop_min": ("200", "shortest crop, frames"),
    "train.crop_max": ("1000", "longest crop, frames"),
    "train.momentum": ("0.9", "SGD momentum"),
    "train.weight_decay": ("1e-4", "L2 weight decay (not applied to norm scale/shift or LDE scales)"),
    "train.checkpoint_every": ("10", "epochs between checkpoints"),
    "paths.train_manifest": ("", "training manifest"),
    "paths.test_manifest": ("", "test manifest"),
    "paths.out_dir": ("run", "directory for checkpoints and logs"),
}


class ConfigError(ValueError):
    pass


class RunConfig:
    def __init__(self, values=None):
        self.values = {k: v for k, (v, _) in DEFAULTS.items()}
        self.explicit = set()
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key, value):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = str(value)
        self.explicit.add(key)

    def __getitem__(self, key):
        return self.values[key]

    @classmethod
    def parse(cls, text: str, source="<config>") -> "RunConfig":
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            try:
                cfg.set(key, value)
            except ConfigError as exc:
                raise ConfigError(f"{source}:{lineno}: {exc}") from None
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.parse(Path(path).read_text(), str(path))

    def dump(self) -> str:
        return "".join(f"{k} = {self.values[k]}\n" for k in DEFAULTS)

    def hash(self) -> str:
        return hashlib.sha256(self.dump().encode("utf-8")).hexdigest()[:16]

    def seed(self) -> int:
        if "seed" not in self.explicit and os.environ.get("ULID_SEED"):
            return int(os.environ["ULID_SEED"])
        return int(self["seed"])

    def frontend_options(self) -> dict:
        return {"vad_db": float(self["frontend.vad_db"]), "cmn_window": int(self["frontend.cmn_window"])}

    def conv_spec(self) -> ConvStackSpec:
        return ConvStackSpec.parse(self["conv.spec"])

    def encoder_spec(self, d_in: int) -> EncoderSpec:
        return EncoderSpec(self["encoder.kind"], d_in, components=int(self["encoder.components"]),
                           layers=int(self["encoder.layers"]), lde_norm=self["encoder.lde_norm"])

    def train_config(self) -> TrainConfig:
        decay = {}
        for part in filter(None, (p.strip() for p in self["train.decay"].split(","))):
            try:
                e, m = part.split(":")
                decay[int(e)] = float(m)
            except ValueError:
                raise ConfigError(f"train.decay: cannot parse {part!r}; expected epoch:multiplier") from None
        return TrainConfig(
            epochs=int(self["train.epochs"]), lr0=float(self["train.lr0"]), decay_points=decay,
            batch_size=int(self["train.batch_size"]), crop_min=int(self["train.crop_min"]),
            crop_max=int(self["train.crop_max"]), momentum=float(self["train.momentum"]),
            weight_decay=float(self["train.weight_decay"]), seed=self.seed(),
            checkpoint_every=int(self["train.checkpoint_every"]),
        )


def describe_defaults() -> str:
    return "\n".join(f"{k} = {v:<40} # {doc}" for k, (v, doc) in DEFAULTS.items())
