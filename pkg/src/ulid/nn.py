"""Parameter containers and the basic layers shared by the model parts."""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Holds named parameters, buffers and child modules.

    Attribute assignment registers Tensors marked ``requires_grad`` as
    parameters and Module instances as children, in definition order.
    """

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "_children", OrderedDict())
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, value: np.ndarray):
        self._buffers[name] = name
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    no_decay = ()

    def no_decay_names(self, prefix=""):
        """Full names of parameters exempt from weight decay."""
        names = {prefix + n for n in self.no_decay}
        for cname, child in self._children.items():
            names |= child.no_decay_names(f"{prefix}{cname}.")
        return names

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((n, p.data) for n, p in self.named_parameters())
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state):
        for name, p in self.named_parameters():
            p.data = np.array(state[name], dtype=p.dtype).reshape(p.shape)
        for name, buf in list(self.named_buffers()):
            owner, attr = self._resolve(name)
            object.__setattr__(owner, attr, np.array(state[name], dtype=buf.dtype).reshape(buf.shape))

    def _resolve(self, dotted):
        *path, attr = dotted.split(".")
        owner = self
        for part in path:
            owner = owner._children[part]
        return owner, attr

    def train(self, mode=True):
        object.__setattr__(self, "training", mode)
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        for name, buf in list(self.named_buffers()):
            owner, attr = self._resolve(name)
            object.__setattr__(owner, attr, buf.astype(dtype))
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def param(data, name=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


class Linear(Module):
    def __init__(self, d_in, d_out, rng, dtype=np.float32):
        super().__init__()
        bound = 1 / np.sqrt(d_in)
        self.weight = param(rng.uniform(-bound, bound, (d_in, d_out)).astype(dtype))
        self.bias = param(np.zeros(d_out, dtype=dtype))

    def forward(self, x):
        return ad.matmul(x, self.weight) + self.bias


class Conv2d(Module):
    def __init__(self, c_in, c_out, kernel, stride, pad, rng, bias=True, dtype=np.float32):
        super().__init__()
        kh, kw = kernel
        self.stride, self.pad = tuple(stride), tuple(pad)
        std = np.sqrt(2.0 / (c_in * kh * kw))  # He init for relu stacks
        self.weight = param((rng.standard_normal((c_out, c_in, kh, kw)) * std).astype(dtype))
        self.bias = param(np.zeros(c_out, dtype=dtype)) if bias else None

    def forward(self, x):
        return ad.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class BatchNorm(Module):
    """Per-channel scale/shift with batch statistics in training mode."""

    no_decay = ("gamma", "beta")

    def __init__(self, channels, momentum=0.9, eps=1e-5, dtype=np.float32):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.gamma = param(np.ones(channels, dtype=dtype))
        self.beta = param(np.zeros(channels, dtype=dtype))
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x):
        if self.training:
            out, mean, var = ad.batch_norm(x, self.gamma, self.beta, eps=self.eps)
            m = self.momentum
            object.__setattr__(self, "running_mean", (m * self.running_mean + (1 - m) * mean).astype(self.running_mean.dtype))
            object.__setattr__(self, "running_var", (m * self.running_var + (1 - m) * var).astype(self.running_var.dtype))
            return out
        out, _, _ = ad.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var, self.eps)
        return out
