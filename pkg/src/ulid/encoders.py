"""Utterance-level encoding layers.

Each encoder maps a time-ordered (N, D_in, L) sequence to a fixed-size
(N, D_enc) vector whatever L is:

* TAP: mean over time, D_enc = D_in.
* GRU / LSTM: two stacked forward recurrences, last top-layer state, D_enc = D_in.
* LDE: soft assignment of every frame to C learned dictionary components,
  averaged residuals per component, D_enc = D_in * C.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Module, param

KINDS = ("tap", "gru", "lstm", "lde")


@dataclass
class EncoderSpec:
    kind: str
    d_in: int
    components: int = 64
    layers: int = 2
    hidden: int | None = None
    lde_norm: str = "frames"  # or "weights": divide by sum_t w_tc instead of L

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in KINDS:
            raise ValueError(f"unknown encoder {self.kind!r}; valid encoders: {', '.join(KINDS)}")
        if self.hidden is None:
            self.hidden = self.d_in
        if self.kind in ("gru", "lstm") and self.hidden != self.d_in:
            raise ValueError("recurrent hidden size must equal d_in")
        if self.components < 1:
            raise ValueError("LDE needs at least one component")
        if self.lde_norm not in ("frames", "weights"):
            raise ValueError(f"lde_norm must be 'frames' or 'weights', got {self.lde_norm!r}")

    @property
    def output_dim(self) -> int:
        return self.d_in * self.components if self.kind == "lde" else self.d_in

    def to_dict(self):
        return asdict(self)


def _batched(x):
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim == 2:
        return x.reshape(1, *x.shape), True
    return x, False


def encode_tap(x) -> Tensor:
    """Temporal average pooling of (D, L) or (N, D, L)."""
    xb, single = _batched(x)
    out = xb.mean(axis=2)
    return out[0] if single else out


# recurrent -------------------------------------------------------------------

class RecurrentLayer(Module):
    """One forward GRU or LSTM layer.

    Gate blocks are packed along the last axis of ``w_in`` / ``w_rec``:
    GRU (reset, update, candidate); LSTM (input, forget, cell, output).
    """

    def __init__(self, kind, d_in, hidden, rng, dtype=np.float32):
        super().__init__()
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "hidden", hidden)
        gates = 3 if kind == "gru" else 4
        bound = 1 / np.sqrt(hidden)
        self.w_in = param(rng.uniform(-bound, bound, (d_in, gates * hidden)).astype(dtype))
        self.w_rec = param(rng.uniform(-bound, bound, (hidden, gates * hidden)).astype(dtype))
        b = np.zeros(gates * hidden, dtype=dtype)
        if kind == "lstm":
            b[hidden:2 * hidden] = 1.0  # forget gate
        self.bias = param(b)

    def step(self, xproj: Tensor, state):
        """Advance one frame given the input projection ``x @ w_in + bias``."""
        H = self.hidden
        if self.kind == "gru":
            h = state
            rz = ad.sigmoid(xproj[:, : 2 * H] + h @ self.w_rec[:, : 2 * H])
            r, z = rz[:, :H], rz[:, H:]
            cand = ad.tanh(xproj[:, 2 * H:] + (r * h) @ self.w_rec[:, 2 * H:])
            h = z * h + (1 - z) * cand
            return h, h
        h, c = state
        pre = xproj + h @ self.w_rec
        i = ad.sigmoid(pre[:, :H])
        f = ad.sigmoid(pre[:, H:2 * H])
        g = ad.tanh(pre[:, 2 * H:3 * H])
        o = ad.sigmoid(pre[:, 3 * H:])
        c = f * c + i * g
        h = o * ad.tanh(c)
        return h, (h, c)

    def initial_state(self, n, dtype):
        zero = Tensor(np.zeros((n, self.hidden), dtype=dtype))
        return zero if self.kind == "gru" else (zero, zero)


class RecurrentEncoder(Module):
    def __init__(self, spec: EncoderSpec, rng, dtype=np.float32):
        super().__init__()
        object.__setattr__(self, "spec", spec)
        object.__setattr__(self, "cells", [])
        d = spec.d_in
        for i in range(spec.layers):
            cell = RecurrentLayer(spec.kind, d, spec.hidden, rng, dtype)
            setattr(self, f"rnn{i + 1}", cell)
            self.cells.append(cell)
            d = spec.hidden

    def forward(self, x):
        return encode_recurrent(x, self.cells)


def encode_recurrent(x, cells) -> Tensor:
    """Run stacked forward recurrences from a zero state; return the last top-layer output."""
    xb, single = _batched(x)
    n, _, length = xb.shape
    seq = xb.transpose(0, 2, 1)  # (N, L, D)
    first = cells[0]
    proj = ad.matmul(seq, first.w_in) + first.bias  # all frames at once for the bottom layer
    states = [c.initial_state(n, xb.dtype) for c in cells]
    out = None
    for t in range(length):
        inp = proj[:, t]
        for k, cell in enumerate(cells):
            if k > 0:
                inp = ad.matmul(out, cell.w_in) + cell.bias
            out, states[k] = cell.step(inp, states[k])
    return out[0] if single else out


# LDE -------------------------------------------------------------------------

class LDE(Module):
    """Learnable dictionary encoding with C components.

    Scales are stored as unconstrained ``scale_raw`` and mapped through
    softplus, so s_c > 0 always.
    """

    no_decay = ("scale_raw",)

    def __init__(self, d_in, components, rng, dtype=np.float32, norm="frames"):
        super().__init__()
        object.__setattr__(self, "norm", norm)
        bound = 1 / np.sqrt(components)
        self.mu = param(rng.uniform(-bound, bound, (components, d_in)).astype(dtype))
        self.scale_raw = param(np.full(components, np.log(np.expm1(1.0)), dtype=dtype))

    @property
    def scales(self):
        return ad.softplus(self.scale_raw)

    def forward(self, x):
        return encode_lde(x, self.mu, self.scale_raw, self.norm)


def lde_weights(x, mu, scale_raw) -> Tensor:
    """Soft assignment w[n, t, c] of each frame to each component."""
    xb, _ = _batched(x)
    r = xb.transpose(0, 2, 1).reshape(xb.shape[0], xb.shape[2], 1, xb.shape[1]) - mu
    d2 = ad.square(r).sum(axis=3)
    return ad.softmax(-(ad.softplus(scale_raw) * d2), axis=2), r


def encode_lde(x, mu, scale_raw, norm="frames") -> Tensor:
    xb, single = _batched(x)
    n, d, length = xb.shape
    w, r = lde_weights(xb, mu, scale_raw)  # (N, L, C), (N, L, C, D)
    acc = (w.reshape(n, length, -1, 1) * r).sum(axis=1)  # (N, C, D)
    if norm == "frames":
        e = acc * (1.0 / length)
    else:
        e = acc / w.sum(axis=1).reshape(n, -1, 1)
    out = e.reshape(n, -1)
    return out[0] if single else out


class TAP(Module):
    def forward(self, x):
        return encode_tap(x)


def build_encoder(spec: EncoderSpec, rng, dtype=np.float32) -> Module:
    if spec.kind == "tap":
        return TAP()
    if spec.kind == "lde":
        return LDE(spec.d_in, spec.components, rng, dtype, spec.lde_norm)
    return RecurrentEncoder(spec, rng, dtype)
