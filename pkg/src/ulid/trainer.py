"""SGD training with per-step random crop lengths and step learning-rate decay."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import LidModel, save_checkpoint

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, epoch, last_good=None):
        super().__init__(msg)
        self.epoch = epoch
        self.last_good = last_good


@dataclass
class TrainConfig:
    epochs: int = 90
    lr0: float = 0.1
    # epoch -> multiplier of lr0, effective from that epoch on; points past the last epoch never fire
    decay_points: dict = field(default_factory=lambda: {60: 0.1, 80: 0.01})
    batch_size: int = 32
    crop_min: int = 200
    crop_max: int = 1000
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    checkpoint_every: int = 10

    def __post_init__(self):
        self.decay_points = {int(k): float(v) for k, v in self.decay_points.items()}
        if self.crop_min < 1 or self.crop_max < self.crop_min:
            raise ValueError(f"bad crop range [{self.crop_min}, {self.crop_max}]")
        if any(e < 0 or m <= 0 for e, m in self.decay_points.items()):
            raise ValueError(f"decay points need epoch >= 0 and multiplier > 0, got {self.decay_points}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")

    def to_dict(self):
        return asdict(self)


def lr_schedule(cfg: TrainConfig, epoch: int) -> float:
    mult = 1.0
    for start in sorted(cfg.decay_points):
        if epoch >= start:
            mult = cfg.decay_points[start]
    return cfg.lr0 * mult


def crop_or_extend(frames: np.ndarray, length: int, rng) -> np.ndarray:
    """Random ``length``-frame window, or cyclic repetition when the sequence is shorter."""
    n = frames.shape[1]
    if n > length:
        start = int(rng.integers(0, n - length + 1))
        return frames[:, start:start + length]
    return frames[:, np.arange(length) % n]


def make_batch(pool, labels, cfg: TrainConfig, rng, indices=None):
    """One crop length for the whole batch, drawn uniformly from [crop_min, crop_max].

    Returns (B, 64, L) float32 features, labels, and L.
    """
    if not len(pool):
        raise ValueError("empty training pool")
    if indices is None:
        indices = rng.integers(0, len(pool), size=min(cfg.batch_size, len(pool)))
    length = int(rng.integers(cfg.crop_min, cfg.crop_max + 1))
    batch = np.stack([crop_or_extend(np.asarray(getattr(pool[i], "frames", pool[i])), length, rng) for i in indices])
    return batch.astype(np.float32), np.asarray(labels)[indices], length


class SGD:
    """Momentum SGD with L2 weight decay folded into the gradient."""

    def __init__(self, named_params, momentum=0.9, weight_decay=1e-4, no_decay=()):
        self.params = list(named_params)
        self.momentum = momentum
        self.decay = {n: (0.0 if n in no_decay else weight_decay) for n, _ in self.params}
        self.velocity = {n: np.zeros_like(p.data) for n, p in self.params}

    def step(self, lr):
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad + self.decay[name] * p.data if self.decay[name] else p.grad
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p.data -= (lr * v).astype(p.dtype)

    def zero_grad(self):
        for _, p in self.params:
            p.zero_grad()


@dataclass
class TrainResult:
    history: list
    checkpoints: list


def train_step(model: LidModel, opt: SGD, x: np.ndarray, y: np.ndarray, lr: float):
    """Forward, backward and update on one batch; returns (loss, n_correct)."""
    opt.zero_grad()
    logits = model(Tensor(x.astype(model.dtype)))
    loss = ad.softmax_cross_entropy(logits, y)
    value = float(loss.data)
    if not math.isfinite(value):
        return value, 0
    loss.backward()
    opt.step(lr)
    return value, int((logits.data.argmax(axis=1) == y).sum())


def _all_finite(model: LidModel) -> bool:
    return all(np.isfinite(v).all() for v in model.state_dict().values())


def train(model: LidModel, pool, labels, cfg: TrainConfig, out_dir=None, log_path=None, config_hash=None) -> TrainResult:
    """Train in place.  Writes ``<epoch> <lr> <loss> <acc>`` per epoch to ``log_path``."""
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(cfg.seed)
    opt = SGD(model.named_parameters(), cfg.momentum, cfg.weight_decay, model.no_decay_names())
    out_dir = Path(out_dir) if out_dir else None
    log_file = open(log_path, "w") if log_path else None
    history, checkpoints = [], []
    last_good_state = {k: v.copy() for k, v in model.state_dict().items()}
    model.train()
    try:
        for epoch in range(cfg.epochs):
            lr = lr_schedule(cfg, epoch)
            order = rng.permutation(len(pool))
            total_loss, correct, seen = 0.0, 0, 0
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                x, y, _ = make_batch(pool, labels, cfg, rng, idx)
                loss, hits = train_step(model, opt, x, y, lr)
                if not math.isfinite(loss) or not _all_finite(model):
                    model.load_state_dict(last_good_state)
                    last = checkpoints[-1] if checkpoints else None
                    what = "loss" if not math.isfinite(loss) else "parameters"
                    raise TrainingDiverged(f"non-finite {what} at epoch {epoch}; parameters restored to end of epoch "
                                           f"{epoch - 1}", epoch, last)
                total_loss += loss * len(idx)
                correct += hits
                seen += len(idx)
            row = {"epoch": epoch, "lr": lr, "loss": total_loss / seen, "acc": correct / seen}
            history.append(row)
            line = f"{epoch} {lr:g} {row['loss']:.6f} {row['acc']:.4f}"
            log.info(line)
            if log_file:
                log_file.write(line + "\n")
                log_file.flush()
            last_good_state = {k: v.copy() for k, v in model.state_dict().items()}
            if out_dir and ((epoch + 1) % cfg.checkpoint_every == 0 or epoch + 1 == cfg.epochs):
                path = out_dir / ("final.ulck" if epoch + 1 == cfg.epochs else f"epoch{epoch + 1:03d}.ulck")
                save_checkpoint(model, path, epoch + 1, config_hash)
                checkpoints.append(path)
    finally:
        if log_file:
            log_file.close()
        model.eval()
    return TrainResult(history, checkpoints)


def read_train_log(path):
    rows = []
    for line in Path(path).read_text().splitlines():
        e, lr, loss, acc = line.split()
        rows.append({"epoch": int(e), "lr": float(lr), "loss": float(loss), "acc": float(acc)})
    return rows
