"""A small dense-tensor library with reverse-mode automatic differentiation.

Values are float64 numpy arrays. Operations executed while a :class:`Tape` is
active (``with Tape() as tape:``) and touching at least one tensor that
requires a gradient are appended to that tape; :func:`backward` then walks the
tape in strict reverse order.

Example::

    w = Tensor(np.ones((2, 1)), requires_grad=True)
    with Tape() as tape:
        loss = huber(matmul(x, w), y, beta=2.0)
    grads = backward(tape, loss)
    grads[w]  # same shape as w
"""

import weakref

import numpy as np

from . import kernels

LN_EPS = 1e-5


class DimensionError(ValueError):
    pass


class ParameterError(ValueError):
    pass


class UsageError(RuntimeError):
    pass


_ACTIVE_TAPES = []


class Node:
    __slots__ = ("kind", "inputs", "output", "backward_fn")

    def __init__(self, kind, inputs, output, backward_fn):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Append-only record of differentiable operations."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, kind, inputs, output, backward_fn):
        output.node = len(self.nodes)
        output.tape = weakref.ref(self)  # weak: a strong link would form a tape <-> tensor cycle
        self.nodes.append(Node(kind, inputs, output, backward_fn))


def current_tape():
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "tape", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64, copy=True)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None
        self.tape = None
        self.name = name

    @classmethod
    def _wrap(cls, arr):
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.node = None
        t.tape = None
        t.name = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def values(self):
        return self.data.reshape(-1)

    @property
    def tape_id(self):
        return self.node

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=np.float64))


def _make(kind, out, inputs, backward_fn):
    """Wrap a result array and record it if any input needs a gradient."""
    t = Tensor._wrap(out)
    tape = current_tape()
    if tape is not None and any(i.requires_grad for i in inputs):
        t.requires_grad = True
        tape.record(kind, tuple(inputs), t, backward_fn)
    return t


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{kind}: shapes {a.shape} and {b.shape} are not compatible") from None


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _make("mul", ad * bd, (a, b), bw)


def scale(a, c):
    c = float(c)
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


def sigmoid(a):
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    return _make("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def relu(a):
    x = a.data
    mask = x > 0
    return _make("relu", np.where(mask, x, 0.0), (a,), lambda g: (g * mask,))


def gelu(a):
    x = a.data
    return _make("gelu", kernels.gelu_fwd(x), (a,), lambda g: (kernels.gelu_bwd(x, g),))


def tanh(a):
    y = np.tanh(a.data)
    return _make("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def exp(a):
    y = np.exp(a.data)
    return _make("exp", y, (a,), lambda g: (g * y,))


def log(a):
    x = a.data
    return _make("log", np.log(x), (a,), lambda g: (g / x,))


def elementwise(op, *args):
    """Dispatch an elementwise op by name."""
    table = {"add": add, "sub": sub, "mul": mul, "sigmoid": sigmoid, "relu": relu,
             "gelu": gelu, "exp": exp, "log": log, "tanh": tanh}
    try:
        fn = table[op]
    except KeyError:
        raise ParameterError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    ad, bd = a.data, b.data
    out = ad @ bd

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            if bd.ndim == 2:
                ga = g @ bd.T
            else:
                ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                k, n = bd.shape
                gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make("matmul", out, (a, b), bw)


def linear(x, w, b=None):
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ---------------------------------------------------------------- normalization

def layernorm(x, gamma, beta, eps=LN_EPS):
    d = x.shape[-1]
    if d == 0:
        raise DimensionError("layernorm: normalized axis has size 0")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layernorm: affine shapes {gamma.shape}, {beta.shape} vs D={d}")
    x2 = np.ascontiguousarray(x.data.reshape(-1, d))
    y, xhat, rstd = kernels.layernorm_fwd(x2, gamma.data, beta.data, float(eps))
    shape = x.shape
    gd = gamma.data

    def bw(g):
        dx, dg, db = kernels.layernorm_bwd(np.ascontiguousarray(g.reshape(-1, d)), xhat, rstd, gd)
        return dx.reshape(shape), dg, db

    return _make("layernorm", y.reshape(shape), (x, gamma, beta), bw)


def softmax(x):
    k = x.shape[-1]
    if k < 1:
        raise DimensionError("softmax: empty last axis")
    shape = x.shape
    y = kernels.softmax_fwd(np.ascontiguousarray(x.data.reshape(-1, k)))

    def bw(g):
        return (kernels.softmax_bwd(y, np.ascontiguousarray(g.reshape(-1, k))).reshape(shape),)

    return _make("softmax", y.reshape(shape), (x,), bw)


def huber(pred, target, beta):
    """Mean Huber loss; quadratic for |r| <= beta, linear beyond."""
    if not beta > 0:
        raise ParameterError(f"huber: beta must be positive, got {beta}")
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"huber: shapes {pred.shape} and {target.shape} differ")
    r = np.ascontiguousarray(pred.data - target.data)
    n = r.size
    val = kernels.huber_fwd(r, float(beta))

    def bw(g):
        d = kernels.huber_grad(r, float(beta)) * (float(g) / n)
        return d, -d

    return _make("huber", np.array(val), (pred, target), bw)


# ---------------------------------------------------------------- reductions

def tsum(x, axis=None, keepdims=False):
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make("sum", np.asarray(out), (x,), bw)


def mean(x, axis=None, keepdims=False):
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return scale(tsum(x, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------- shape ops

def reshape(x, shape):
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {old} as {shape}") from None
    return _make("reshape", out, (x,), lambda g: (g.reshape(old),))


def transpose(x, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _make("transpose", out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def getitem(x, idx):
    shape = x.shape
    out = np.ascontiguousarray(x.data[idx])
    advanced = any(isinstance(i, (list, np.ndarray)) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def bw(g):
        full = np.zeros(shape)
        if advanced:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _make("getitem", out, (x,), bw)


def take(x, indices, axis=0):
    indices = np.asarray(indices, dtype=np.int64)
    shape = x.shape
    out = np.take(x.data, indices, axis=axis)

    def bw(g):
        full = np.zeros(shape)
        gm = np.moveaxis(g, list(range(axis, axis + indices.ndim)),
                         list(range(indices.ndim))).reshape((-1,) + tuple(np.delete(shape, axis)))
        fm = np.moveaxis(full, axis, 0)
        np.add.at(fm, indices.reshape(-1), gm)
        return (full,)

    return _make("take", out, (x,), bw)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make("concat", out, tensors, lambda g: tuple(np.split(g, sizes, axis=axis)))


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return _make("stack", out, tensors,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def roll(x, shifts, axes):
    shifts = tuple(shifts)
    axes = tuple(axes)
    back = tuple(-s for s in shifts)
    return _make("roll", np.roll(x.data, shifts, axes), (x,),
                 lambda g: (np.roll(g, back, axes),))


# ---------------------------------------------------------------- backward

def _tape_of(t):
    return t.tape() if t.tape is not None else None


def backward(tape, root):
    """Reverse sweep from a scalar root.

    Returns a dict mapping each reached leaf tensor (requires_grad, not itself
    produced on the tape) to its gradient, and adds the same gradient into the
    leaf's ``.grad`` buffer. The tape is left untouched, so the sweep may be
    repeated.
    """
    if root.size != 1:
        raise UsageError(f"backward needs a scalar root, got shape {root.shape}")
    seed = np.ones(root.shape)
    leaves = {}
    if root.node is None or _tape_of(root) is not tape:
        if root.requires_grad:
            leaves[root] = seed
    else:
        grads = {id(root): seed}
        for node in reversed(tape.nodes[:root.node + 1]):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward_fn(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.node is None or _tape_of(inp) is not tape:
                    prev = leaves.get(inp)
                    leaves[inp] = gi.copy() if prev is None else prev + gi
                else:
                    key = id(inp)
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi
    for leaf, g in leaves.items():
        g = np.asarray(g, dtype=np.float64).reshape(leaf.shape)
        leaves[leaf] = g
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    return leaves


def numerical_grad(fn, x, step=1e-5, coords=None):
    """Central finite differences of scalar ``fn()`` wrt the array ``x`` (in place).

    ``coords`` restricts the probe to given flat indices; other entries are NaN.
    """
    flat = x.reshape(-1)
    out = np.full(flat.shape, np.nan) if coords is not None else np.zeros(flat.shape)
    idx = range(flat.size) if coords is None else coords
    for i in idx:
        old = flat[i]
        flat[i] = old + step
        fp = fn()
        flat[i] = old - step
        fm = fn()
        flat[i] = old
        out[i] = (fp - fm) / (2.0 * step)
    return out.reshape(x.shape)
