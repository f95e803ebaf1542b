"""Small dense-tensor engine with reverse-mode differentiation.

Tensors wrap a numpy array.  Every op records its parents and a closure that
pushes the output gradient back to them; ``Tensor.backward`` walks the graph
in reverse topological order.  Binary ops follow numpy broadcasting and
reduce the gradient back to each operand's shape.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field

import numpy as np

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_owned", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._owned = False
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None
        self._owned = False

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{', grad' if self.requires_grad else ''})"

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable tensor's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        _accumulate(self, np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(topological_order(self)):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return reduce(self, axis, "sum", keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce(self, axis, "mean", keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce(self, axis, "max", keepdims)


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, each placed after all of its parents."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _accumulate(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = g
        t._owned = False
    elif t._owned:
        t.grad += g
    else:
        t.grad = t.grad + g
        t._owned = True


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if grad_enabled():
        live = tuple(p for p in parents if p.requires_grad)
        if live:
            out.requires_grad = True
            out._parents = live
            out._backward = backward
    return out


def _binary_operands(a, b):
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    return a, b


# elementwise -----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(a.data / b.data, (a, b), backward)


def neg(x: Tensor) -> Tensor:
    return _make(-x.data, (x,), lambda g: _accumulate(x, -g))


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0)
    return _make(y, (x,), lambda g: _accumulate(x, np.where(y > 0, g, 0).astype(g.dtype, copy=False)))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: _accumulate(x, g * (1 - y * y)))


def sigmoid(x: Tensor) -> Tensor:
    # two-branch form avoids overflow in exp for large |x|
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
    return _make(y, (x,), lambda g: _accumulate(x, g * y * (1 - y)))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: _accumulate(x, g * y))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ValueError("log of a non-positive value")
    return _make(np.log(x.data), (x,), lambda g: _accumulate(x, g / x.data))


def softplus(x: Tensor) -> Tensor:
    d = x.data
    y = np.maximum(d, 0) + np.log1p(np.exp(-np.abs(d)))
    s = np.exp(-np.logaddexp(0, -d))
    return _make(y, (x,), lambda g: _accumulate(x, g * s))


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, (x,), lambda g: _accumulate(x, 2 * g * x.data))


_ELEMENTWISE = {
    "relu": relu, "tanh": tanh, "sigmoid": sigmoid, "log": log, "exp": exp,
    "neg": neg, "add": add, "mul": mul, "sub": sub,
}


def elementwise(x, f: str, y=None) -> Tensor:
    """Dispatch by name; binary ops take the second operand as ``y``."""
    try:
        fn = _ELEMENTWISE[f]
    except KeyError:
        raise ValueError(f"unknown elementwise op {f!r}; expected one of {sorted(_ELEMENTWISE)}") from None
    if f in ("add", "mul", "sub"):
        if y is None:
            raise ValueError(f"{f} needs two operands")
        return fn(x, y)
    return fn(x)


# linear algebra --------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _binary_operands(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner extents differ: {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _make(a.data @ b.data, (a, b), backward)


def conv_output_size(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=(1, 1), pad=(0, 0)) -> Tensor:
    """Cross-correlation of ``x`` (C,H,W) or (N,C,H,W) with ``w`` (Cout,C,kh,kw)."""
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects (N,C,H,W) input and 4-d kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = xd.shape
    cout, cin, kh, kw = w.shape
    if cin != c:
        raise ValueError(f"conv2d channel mismatch: input has {c}, kernel expects {cin}")
    sh, sw = stride
    ph, pw = pad
    ho = conv_output_size(h, kh, sh, ph)
    wo = conv_output_size(wd, kw, sw, pw)
    for axis, size in (("height", ho), ("width", wo)):
        if size < 1:
            raise ValueError(f"conv2d output {axis} would be {size} (< 1)")
    # im2col in channels-last order: rows are output positions, columns (kh, kw, c)
    xh = xd.transpose(0, 2, 3, 1)
    xp = np.pad(xh, ((0, 0), (ph, ph), (pw, pw), (0, 0))) if (ph or pw) else np.ascontiguousarray(xh)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, kh * kw * c)
    wmat = np.ascontiguousarray(w.data.transpose(0, 2, 3, 1)).reshape(cout, -1)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))
    if squeeze:
        out = out[0]

    def backward(g):
        g4 = g[None] if squeeze else g
        g2 = np.ascontiguousarray(g4.transpose(0, 2, 3, 1)).reshape(-1, cout)
        if w.requires_grad:
            _accumulate(w, (g2.T @ cols).reshape(cout, kh, kw, c).transpose(0, 3, 1, 2))
        if b is not None and b.requires_grad:
            _accumulate(b, g2.sum(axis=0))
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, kh, kw, c)
            dxp = np.zeros(xp.shape, dtype=xp.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i : i + (ho - 1) * sh + 1 : sh, j : j + (wo - 1) * sw + 1 : sw] += dcols[:, :, :, i, j]
            dx = np.ascontiguousarray(dxp[:, ph : ph + h, pw : pw + wd].transpose(0, 3, 1, 2))
            _accumulate(x, dx[0] if squeeze else dx)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, backward)


# shape -----------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: _accumulate(x, g.reshape(x.shape)))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)
    return _make(x.data.transpose(axes), (x,), lambda g: _accumulate(x, g.transpose(inv)))


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)


def getitem(x: Tensor, idx) -> Tensor:
    basic = _is_basic_index(idx)

    def backward(g):
        if x.grad is None or not x._owned:
            base = np.zeros(x.shape, dtype=x.dtype) if x.grad is None else x.grad.copy()
            x.grad, x._owned = base, True
        if basic:
            x.grad[idx] += g  # basic indexing never repeats an element
        else:
            np.add.at(x.grad, idx, g)

    return _make(x.data[idx], (x,), backward)


def concat(tensors, axis=0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(sl)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors, axis=0) -> Tensor:
    tensors = list(tensors)

    def backward(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                _accumulate(t, np.take(g, i, axis=axis))

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, backward)


# reductions ------------------------------------------------------------------

def reduce(x: Tensor, axis=None, mode: str = "sum", keepdims: bool = False) -> Tensor:
    """Sum, mean or max over ``axis`` (an int, tuple, or None for all)."""
    if axis is None:
        axes = tuple(range(x.ndim))
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % x.ndim if -x.ndim <= a < x.ndim else _bad_axis(a, x.ndim) for a in axes)
    count = 1
    for a in axes:
        count *= x.shape[a]
    if count == 0:
        raise ValueError(f"cannot reduce over an empty axis of shape {x.shape}")
    kept_shape = tuple(1 if i in axes else n for i, n in enumerate(x.shape))

    if mode == "sum":
        out = x.data.sum(axis=axes, keepdims=keepdims)

        def backward(g):
            _accumulate(x, np.broadcast_to(g.reshape(kept_shape), x.shape).copy())
    elif mode == "mean":
        out = x.data.mean(axis=axes, keepdims=keepdims)

        def backward(g):
            _accumulate(x, np.broadcast_to(g.reshape(kept_shape) / count, x.shape).astype(x.dtype))
    elif mode == "max":
        # move reduced axes to the end so argmax sees one flat axis
        rest = tuple(i for i in range(x.ndim) if i not in axes)
        moved = x.data.transpose(rest + axes).reshape(tuple(x.shape[i] for i in rest) + (count,))
        arg = moved.argmax(axis=-1)  # first occurrence on ties
        out = np.take_along_axis(moved, arg[..., None], axis=-1)[..., 0]
        if keepdims:
            out = out.reshape(kept_shape)

        def backward(g):
            flat = np.zeros(moved.shape, dtype=x.dtype)
            np.put_along_axis(flat, arg[..., None], g.reshape(arg.shape)[..., None], axis=-1)
            back = flat.reshape(tuple(x.shape[i] for i in rest) + tuple(x.shape[i] for i in axes))
            _accumulate(x, back.transpose(np.argsort(rest + axes)))
    else:
        raise ValueError(f"unknown reduce mode {mode!r}")
    return _make(np.asarray(out, dtype=x.dtype), (x,), backward)


def _bad_axis(a, ndim):
    raise ValueError(f"axis {a} out of range for rank {ndim}")


def softmax(x: Tensor, axis=-1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        _accumulate(x, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _make(y, (x,), backward)


def log_softmax(x: Tensor, axis=-1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def backward(g):
        _accumulate(x, g - p * g.sum(axis=axis, keepdims=True))

    return _make(y, (x,), backward)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if np.any((labels < 0) | (labels >= k)):
        raise ValueError(f"label out of range [0, {k}): {labels[(labels < 0) | (labels >= k)].tolist()}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(lse - z[rows, labels])

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1
        _accumulate(logits, (g / n * p).astype(logits.dtype))

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, mean=None, var=None, eps=1e-5):
    """Per-channel normalization of (N,C,...) input.

    With ``mean``/``var`` None the batch statistics are used (and returned so
    the caller can update running averages); otherwise the given statistics
    are treated as constants.
    """
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    batch_stats = mean is None
    if batch_stats:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(bshape)) * inv.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    m = x.data.size // x.shape[1]

    def backward(g):
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).sum(axis=axes))
        if beta.requires_grad:
            _accumulate(beta, g.sum(axis=axes))
        if x.requires_grad:
            gh = g * gamma.data.reshape(bshape)
            if batch_stats:
                dx = (gh - gh.mean(axis=axes, keepdims=True)
                      - xhat * (gh * xhat).mean(axis=axes, keepdims=True)) * inv.reshape(bshape)
            else:
                dx = gh * inv.reshape(bshape)
            _accumulate(x, dx.astype(x.dtype))

    out = _make(out.astype(x.dtype), (x, gamma, beta), backward)
    return out, mean, var * m / max(m - 1, 1)


# gradient checking -----------------------------------------------------------

@dataclass
class GradCheckReport:
    tol: float
    checked: int = 0
    max_error: float = 0.0
    violations: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations

    def __str__(self):
        status = "pass" if self.passed else f"{len(self.violations)} violations"
        return f"gradcheck: {self.checked} scalars, max err {self.max_error:.2e} (tol {self.tol:g}): {status}"


def check_gradients(loss_fn, params, eps=1e-5, tol=1e-6, max_per_param=None, seed=0) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``loss_fn`` rebuilds the graph and returns a scalar Tensor.  ``params`` is
    a list of tensors or a name->tensor mapping.  Error per scalar is
    ``|analytic - numeric| / max(1, |analytic|)``.  ``max_per_param`` samples
    that many entries of each tensor instead of checking all of them.
    """
    named = list(params.items()) if isinstance(params, dict) else [(f"p{i}", p) for i, p in enumerate(params)]
    for _, p in named:
        p.data = np.ascontiguousarray(p.data)
        p.zero_grad()
        p.requires_grad = True
    loss_fn().backward()
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol)
    for name, p in named:
        analytic = np.zeros(p.shape, dtype=np.float64) if p.grad is None else np.asarray(p.grad, dtype=np.float64)
        flat = p.data.reshape(-1)
        idxs = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            idxs = rng.choice(flat.size, size=max_per_param, replace=False)
        for i in idxs:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                up = float(loss_fn().data)
                flat[i] = orig - eps
                down = float(loss_fn().data)
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(1.0, abs(a))
            report.checked += 1
            report.max_error = max(report.max_error, err)
            if err > tol:
                report.violations.append((name, np.unravel_index(i, p.shape), float(a), numeric, err))
    return report
