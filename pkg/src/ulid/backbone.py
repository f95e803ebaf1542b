"""Residual CNN front end and receptive-field arithmetic.

Feature maps are laid out (batch, channels, freq, time).  A ``ConvStackSpec``
drives both the network builder and the analytic receptive-field table, so
the two can never disagree about strides.
"""
from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, conv_output_size
from .nn import BatchNorm, Conv2d, Module

N_MELS = 64


@dataclass(frozen=True)
class LayerSpec:
    kernel: tuple = (3, 3)
    stride: tuple = (1, 1)
    channels: int = 16
    residual: bool = False
    pad: tuple | None = None  # None -> kernel // 2 on each axis

    def __post_init__(self):
        object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))
        object.__setattr__(self, "stride", tuple(int(s) for s in self.stride))
        if self.pad is not None:
            object.__setattr__(self, "pad", tuple(int(p) for p in self.pad))
        if min(self.kernel) < 1 or min(self.stride) < 1:
            raise ValueError(f"kernel and stride must be positive: {self}")
        if self.channels < 1:
            raise ValueError(f"channels must be positive: {self}")

    @property
    def padding(self):
        return self.pad if self.pad is not None else (self.kernel[0] // 2, self.kernel[1] // 2)

    def convs(self):
        """(kernel, stride, pad) of each conv on the main path."""
        if self.residual:
            return [(self.kernel, self.stride, self.padding), (self.kernel, (1, 1), self.padding)]
        return [(self.kernel, self.stride, self.padding)]


@dataclass
class ConvStackSpec:
    layers: list = field(default_factory=list)

    def __post_init__(self):
        self.layers = [l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in self.layers]
        if not self.layers:
            raise ValueError("conv stack needs at least one layer")

    @property
    def final_feature_dim(self) -> int:
        return self.layers[-1].channels

    @property
    def time_stride(self) -> int:
        return int(np.prod([l.stride[1] for l in self.layers]))

    @property
    def min_length(self) -> int:
        """Shortest input with at least one full time jump per output column."""
        return self.time_stride

    def output_shape(self, n_freq: int, length: int) -> tuple[int, int]:
        f, t = n_freq, length
        for layer in self.layers:
            for (kh, kw), (sh, sw), (ph, pw) in layer.convs():
                f, t = conv_output_size(f, kh, sh, ph), conv_output_size(t, kw, sw, pw)
        return f, t

    def output_length(self, length: int) -> int:
        return self.output_shape(N_MELS, length)[1]

    def to_dict(self):
        return {"layers": [asdict(l) for l in self.layers]}

    @classmethod
    def from_dict(cls, d):
        return cls([LayerSpec(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in l.items()})
                    for l in d["layers"]])

    def to_json(self):
        return json.dumps(self.to_dict())

    def to_string(self) -> str:
        parts = []
        for l in self.layers:
            s = f"{'r' if l.residual else 'c'}{l.kernel[0]}x{l.kernel[1]}/{l.stride[0]}x{l.stride[1]}@{l.channels}"
            if l.pad is not None:
                s += f"p{l.pad[0]}x{l.pad[1]}"
            parts.append(s)
        return " ".join(parts)

    @classmethod
    def parse(cls, text: str) -> "ConvStackSpec":
        """Parse layers like ``c3x3/1@16 r3x3/2@32``.

        ``c`` is a plain conv-norm-relu layer, ``r`` a residual block.  The
        stride may be one number (both axes) or ``SHxSW``; ``@C`` sets the
        channel count (default: previous layer's, or 16); ``pPHxPW`` overrides
        the default ``kernel // 2`` padding.
        """
        token = re.compile(
            r"(?P<kind>[cr])(?P<kh>\d+)x(?P<kw>\d+)"
            r"(?:/(?P<sh>\d+)(?:x(?P<sw>\d+))?)?"
            r"(?:@(?P<ch>\d+))?"
            r"(?:p(?P<ph>\d+)x(?P<pw>\d+))?"
        )
        sep = re.compile(r"[\s,;]+")
        layers, pos, channels = [], 0, 16
        m = sep.match(text, pos)
        if m:
            pos = m.end()
        while pos < len(text):
            m = token.match(text, pos)
            if not m:
                raise SpecParseError(text, pos)
            end = m.end()
            if end < len(text) and not sep.match(text, end):
                raise SpecParseError(text, end)
            g = m.groupdict()
            sh = int(g["sh"]) if g["sh"] else 1
            sw = int(g["sw"]) if g["sw"] else sh
            channels = int(g["ch"]) if g["ch"] else channels
            pad = (int(g["ph"]), int(g["pw"])) if g["ph"] else None
            try:
                layers.append(LayerSpec((int(g["kh"]), int(g["kw"])), (sh, sw), channels, g["kind"] == "r", pad))
            except ValueError as exc:
                raise SpecParseError(text, pos, str(exc)) from None
            s = sep.match(text, end)
            pos = s.end() if s else end
        if not layers:
            raise SpecParseError(text, 0, "empty spec")
        return cls(layers)


class SpecParseError(ValueError):
    def __init__(self, text, pos, reason="unexpected input"):
        self.text, self.pos = text, pos
        super().__init__(f"cannot parse conv spec at position {pos}: {reason}\n  {text}\n  {' ' * pos}^")


def default_spec() -> ConvStackSpec:
    """Stem conv plus four stride-2 residual stages, D_in = 128."""
    return ConvStackSpec([
        LayerSpec((3, 3), (1, 1), 16),
        LayerSpec((3, 3), (2, 2), 16, residual=True),
        LayerSpec((3, 3), (2, 2), 32, residual=True),
        LayerSpec((3, 3), (2, 2), 64, residual=True),
        LayerSpec((3, 3), (2, 2), 128, residual=True),
    ])


def fig3_spec() -> ConvStackSpec:
    """The five-layer toy stack: 3x3 kernels, stride 2."""
    return ConvStackSpec([LayerSpec((3, 3), (2, 2), 1) for _ in range(5)])


def receptive_field(spec: ConvStackSpec, length: int | None = None, n_freq: int = N_MELS):
    """Per-layer receptive field, jump and output shape, per axis (freq, time).

    rf_i = rf_{i-1} + (k_i - 1) * jump_{i-1};  jump_i = jump_{i-1} * s_i.
    Residual blocks contribute both convs of their main path.
    """
    rf, jump = [1, 1], [1, 1]
    shape = [n_freq, length]
    rows = []
    for i, layer in enumerate(spec.layers):
        for k, s, p in layer.convs():
            for a in range(2):
                rf[a] += (k[a] - 1) * jump[a]
                jump[a] *= s[a]
                if shape[a] is not None:
                    shape[a] = conv_output_size(shape[a], k[a], s[a], p[a])
        rows.append({
            "layer": f"{'res' if layer.residual else 'conv'}{i + 1}",
            "kernel": layer.kernel,
            "stride": layer.stride,
            "rf": tuple(rf),
            "jump": tuple(jump),
            "output_shape": tuple(shape),
        })
    return rows


def format_rf_table(rows, length=None) -> str:
    lines = [f"{'layer':<8}{'kernel':<10}{'stride':<10}{'RF':<12}{'jump':<10}shape"]
    lines.append(f"{'input':<8}{'':<10}{'':<10}{'1':<12}{'1':<10}(64, {length if length else 'L'})")
    for r in rows:
        k, s, rf, j, sh = r["kernel"], r["stride"], r["rf"], r["jump"], r["output_shape"]
        rf_s = str(rf[0]) if rf[0] == rf[1] else f"{rf[0]}x{rf[1]}"
        j_s = str(j[0]) if j[0] == j[1] else f"{j[0]}x{j[1]}"
        shape_s = f"({sh[0]}, {sh[1] if sh[1] is not None else 'L/' + str(j[1])})"
        lines.append(f"{r['layer']:<8}{k[0]}x{k[1]:<8}{s[0]}x{s[1]:<8}{rf_s:<12}{j_s:<10}{shape_s}")
    return "\n".join(lines)


class ConvLayer(Module):
    def __init__(self, c_in, layer: LayerSpec, rng, dtype):
        super().__init__()
        self.conv = Conv2d(c_in, layer.channels, layer.kernel, layer.stride, layer.padding, rng, bias=False, dtype=dtype)
        self.norm = BatchNorm(layer.channels, dtype=dtype)

    def forward(self, x):
        return ad.relu(self.norm(self.conv(x)))


class ResidualBlock(Module):
    """conv-norm-relu-conv-norm plus identity/projection shortcut, then relu."""

    def __init__(self, c_in, layer: LayerSpec, rng, dtype):
        super().__init__()
        c = layer.channels
        self.conv1 = Conv2d(c_in, c, layer.kernel, layer.stride, layer.padding, rng, bias=False, dtype=dtype)
        self.norm1 = BatchNorm(c, dtype=dtype)
        self.conv2 = Conv2d(c, c, layer.kernel, (1, 1), layer.padding, rng, bias=False, dtype=dtype)
        self.norm2 = BatchNorm(c, dtype=dtype)
        self.project = c_in != c or layer.stride != (1, 1)
        if self.project:
            self.proj = Conv2d(c_in, c, (1, 1), layer.stride, (0, 0), rng, bias=False, dtype=dtype)
            self.proj_norm = BatchNorm(c, dtype=dtype)

    def forward(self, x):
        h = ad.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        short = self.proj_norm(self.proj(x)) if self.project else x
        return ad.relu(h + short)


class Backbone(Module):
    def __init__(self, spec: ConvStackSpec, rng, dtype=np.float32, zero_init_residual=False):
        super().__init__()
        object.__setattr__(self, "spec", spec)
        object.__setattr__(self, "blocks", [])
        c_in = 1
        for i, layer in enumerate(spec.layers):
            block = (ResidualBlock if layer.residual else ConvLayer)(c_in, layer, rng, dtype)
            if zero_init_residual and layer.residual:
                block.norm2.gamma.data[:] = 0
            setattr(self, f"layer{i + 1}", block)
            self.blocks.append(block)
            c_in = layer.channels

    def forward(self, x):
        """(N, 64, L) features -> (N, D_in, L') time-ordered sequence."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        squeeze = x.ndim == 2
        if squeeze:
            x = x.reshape(1, *x.shape)
        length = x.shape[-1]
        if length < self.spec.min_length:
            raise ValueError(f"input of {length} frames is shorter than the minimum {self.spec.min_length} frames")
        h = x.reshape(x.shape[0], 1, x.shape[1], length)
        for block in self.blocks:
            h = block(h)
        out = h.mean(axis=2)  # pool the remaining frequency bins
        return out[0] if squeeze else out


@dataclass
class BackboneOutput:
    features: np.ndarray
    time_subsample: float


def build_backbone(spec: ConvStackSpec, rng_seed: int = 0, dtype=np.float32, zero_init_residual=False,
                   n_freq: int = N_MELS) -> Backbone:
    f = n_freq
    for i, layer in enumerate(spec.layers):
        for (kh, _), (sh, _), (ph, _) in layer.convs():
            f = conv_output_size(f, kh, sh, ph)
            if f < 1:
                raise ValueError(f"frequency axis collapses below 1 bin at layer {i + 1}")
    return Backbone(spec, np.random.default_rng(rng_seed), dtype, zero_init_residual)


def forward_backbone(net: Backbone, features) -> BackboneOutput:
    """Inference-mode forward of one (64, L) sequence."""
    frames = getattr(features, "frames", features)
    with ad.no_grad():
        out = net(Tensor(np.asarray(frames, dtype=net.layer1.conv.weight.dtype)))
    return BackboneOutput(out.data, frames.shape[-1] / out.shape[-1])
