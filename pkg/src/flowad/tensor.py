"""Dense float64 tensors with reverse-mode autodiff on a dynamic tape.

Every public operation keeps data in contiguous row-major float64 arrays.
The tape is rebuilt per loss evaluation: each op closes over its inputs and
records a backward closure; ``Tensor.backward`` walks the graph once in
reverse topological order. Wrap inference-only code in ``no_grad()`` to skip
tape construction entirely.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import ConfigError, NumericError

EPS_NORM = 1e-12

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the context (forward values only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled():
    return _grad_enabled


def _asarray(x):
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(g, shape):
    """Sum gradient `g` down to `shape` (reverses numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    """Row-major float64 array, optionally tracked on the autodiff tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = _asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self._parents = ()
        self._backward = None

    # -- graph plumbing ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, seed=None):
        """Reverse sweep from this node; accumulates into `.grad` of leaves."""
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.accumulate(np.ones_like(self.data) if seed is None else _asarray(seed))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)
                node._parents = ()
                node._backward = None
                node.grad = None if node is not self else node.grad

    # -- operator sugar ----------------------------------------------------

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return powi(self, p)

    def __getitem__(self, idx):
        return take(self, idx)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"


class Parameter(Tensor):
    """Trainable tensor: shares the Tensor machinery, owns a persistent grad.

    The optimizer zeroes `grad` at the start of each step; nothing else may
    mutate `data` once training starts.
    """

    __slots__ = ("trainable", "name")

    def __init__(self, data, name=None, trainable=True):
        super().__init__(data, requires_grad=trainable)
        self.trainable = trainable
        self.name = name
        # Parameters exist across tape lifetimes; requires_grad must not be
        # frozen off just because they were built inside no_grad().
        self.requires_grad = trainable

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.data.shape})"


def ensure(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward):
    parents = tuple(p for p in parents if isinstance(p, Tensor) and p.requires_grad)
    if _grad_enabled and parents:
        out = Tensor(data, requires_grad=True)
        out._parents = parents
        out._backward = backward
        return out
    return Tensor(data)


# -- arithmetic -------------------------------------------------------------


def add(a, b):
    a, b = ensure(a), ensure(b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.data.shape))

    return _node(data, (a, b), backward)


def sub(a, b):
    a, b = ensure(a), ensure(b)
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g, b.data.shape))

    return _node(data, (a, b), backward)


def mul(a, b):
    a, b = ensure(a), ensure(b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _node(data, (a, b), backward)


def div(a, b):
    a, b = ensure(a), ensure(b)
    data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(data, (a, b), backward)


def powi(a, p):
    a = ensure(a)
    p = float(p)
    data = a.data**p

    def backward(g):
        a.accumulate(g * p * a.data ** (p - 1.0))

    return _node(data, (a,), backward)


def matmul(a, b):
    a, b = ensure(a), ensure(b)
    ad, bd = a.data, b.data
    data = ad @ bd

    def backward(g):
        if ad.ndim == 2 and bd.ndim == 2:
            if a.requires_grad:
                a.accumulate(g @ bd.T)
            if b.requires_grad:
                b.accumulate(ad.T @ g)
        elif ad.ndim == 1 and bd.ndim == 2:
            if a.requires_grad:
                a.accumulate(bd @ g)
            if b.requires_grad:
                b.accumulate(np.outer(ad, g))
        elif ad.ndim == 2 and bd.ndim == 1:
            if a.requires_grad:
                a.accumulate(np.outer(g, bd))
            if b.requires_grad:
                b.accumulate(ad.T @ g)
        elif ad.ndim == 1 and bd.ndim == 1:
            if a.requires_grad:
                a.accumulate(g * bd)
            if b.requires_grad:
                b.accumulate(g * ad)
        else:
            raise ConfigError("matmul supports 1-D and 2-D operands only")

    return _node(data, (a, b), backward)


# -- reductions -------------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    a = ensure(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate(np.broadcast_to(g, a.data.shape).copy())

    return _node(data, (a,), backward)


def tmean(a, axis=None, keepdims=False):
    a = ensure(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def tmax(a):
    """Max over all entries; subgradient routes to the first argmax."""
    a = ensure(a)
    flat_idx = int(np.argmax(a.data))
    data = a.data.reshape(-1)[flat_idx]

    def backward(g):
        buf = np.zeros_like(a.data)
        buf.reshape(-1)[flat_idx] = g
        a.accumulate(buf)

    return _node(np.asarray(data), (a,), backward)


# -- elementwise ------------------------------------------------------------


def tanh(a):
    a = ensure(a)
    data = np.tanh(a.data)

    def backward(g):
        a.accumulate(g * (1.0 - data * data))

    return _node(data, (a,), backward)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus(a):
    """ln(1 + e^x), overflow-safe for large |x|."""
    a = ensure(a)
    data = np.logaddexp(0.0, a.data)

    def backward(g):
        a.accumulate(g * _sigmoid(a.data))

    return _node(data, (a,), backward)


def exp(a):
    a = ensure(a)
    data = np.exp(a.data)

    def backward(g):
        a.accumulate(g * data)

    return _node(data, (a,), backward)


def log(a):
    a = ensure(a)
    data = np.log(a.data)

    def backward(g):
        a.accumulate(g / a.data)

    return _node(data, (a,), backward)


def tabs(a):
    a = ensure(a)
    data = np.abs(a.data)

    def backward(g):
        a.accumulate(g * np.sign(a.data))

    return _node(data, (a,), backward)


def clamp(a, lo=None, hi=None):
    """Clip to [lo, hi]; gradient passes through only where unclipped."""
    a = ensure(a)
    data = np.clip(a.data, lo, hi)
    passthrough = np.ones_like(a.data)
    if lo is not None:
        passthrough *= a.data >= lo
    if hi is not None:
        passthrough *= a.data <= hi

    def backward(g):
        a.accumulate(g * passthrough)

    return _node(data, (a,), backward)


def activation(kind, x):
    """Elementwise nonlinearity dispatch; the two kinds the model uses."""
    if kind == "tanh":
        return tanh(x)
    if kind == "softplus":
        return softplus(x)
    raise ConfigError(f"unknown activation kind: {kind!r}")


# -- shape ops --------------------------------------------------------------


def reshape(a, *shape):
    a = ensure(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    data = a.data.reshape(shape)
    src_shape = a.data.shape

    def backward(g):
        a.accumulate(g.reshape(src_shape))

    return _node(data, (a,), backward)


def transpose(a, axes=None):
    a = ensure(a)
    data = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def backward(g):
        a.accumulate(np.transpose(g, inv))

    return _node(data, (a,), backward)


def concat(parts, axis=0):
    parts = [ensure(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                p.accumulate(g[tuple(sl)])

    return _node(data, tuple(parts), backward)


def take(a, idx):
    a = ensure(a)
    data = a.data[idx]

    def backward(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        a.accumulate(buf)

    return _node(np.array(data, dtype=np.float64), (a,), backward)


# -- normalization / softmax -------------------------------------------------


def softmax(a, axis=-1):
    """Stable softmax along `axis`; outputs sum to one per slice."""
    a = ensure(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        a.accumulate(data * (g - inner))

    return _node(data, (a,), backward)


def l2_normalize(a, axis=-1):
    """Scale each slice along `axis` to unit Euclidean norm.

    Slices with norm below EPS_NORM are returned (and back-propagated) as
    zero instead of dividing by ~0.
    """
    a = ensure(a)
    norms = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    keep = norms >= EPS_NORM
    safe = np.where(keep, norms, 1.0)
    data = np.where(keep, a.data / safe, 0.0)

    def backward(g):
        inner = (g * a.data).sum(axis=axis, keepdims=True)
        full = g / safe - a.data * inner / (safe**3)
        a.accumulate(np.where(keep, full, 0.0))

    return _node(data, (a,), backward)


def bilinear_upsample(a, out_h, out_w):
    """Align-corners bilinear resize of an (H, W, ch) tensor to (out_h, out_w, ch)."""
    from . import kernels

    a = ensure(a)
    src_h, src_w = a.data.shape[0], a.data.shape[1]
    data = kernels.bilinear_upsample(a.data, out_h, out_w)

    def backward(g):
        a.accumulate(kernels.bilinear_upsample_grad(g, src_h, src_w))

    return _node(data, (a,), backward)


# -- gradient checking -------------------------------------------------------


def check_gradients(f, params, h=1e-5, max_entries=None, seed=0):
    """Max relative error between reverse-mode and central-difference gradients.

    `f` rebuilds the scalar loss from scratch on every call. For each probed
    entry the relative error is |analytic - fd| / max(1, |fd|). When
    `max_entries` is given, at most that many entries per parameter are
    probed (deterministically chosen from `seed`).
    """
    params = list(params)
    for p in params:
        p.grad = None
    out = f()
    if not np.isfinite(out.data).all():
        raise NumericError("objective is non-finite at the evaluation point")
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    pick = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    worst = 0.0
    for p, ana in zip(params, analytic):
        n = p.data.size
        if max_entries is not None and n > max_entries:
            entries = pick.choice(n, size=max_entries, replace=False)
        else:
            entries = range(n)
        flat = p.data.reshape(-1)
        for j in entries:
            orig = flat[j]
            with no_grad():
                flat[j] = orig + h
                f_hi = float(f().data)
                flat[j] = orig - h
                f_lo = float(f().data)
            flat[j] = orig
            if not (np.isfinite(f_hi) and np.isfinite(f_lo)):
                name = getattr(p, "name", None) or f"param{params.index(p)}"
                raise NumericError(f"non-finite objective while probing {name}[{j}]")
            fd = (f_hi - f_lo) / (2.0 * h)
            rel = abs(ana.reshape(-1)[j] - fd) / max(1.0, abs(fd))
            worst = max(worst, rel)
    return worst
