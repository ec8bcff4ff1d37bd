"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Each differentiable op returns a new :class:`Tensor` holding a :class:`Node`
that remembers its inputs and a closure mapping the output gradient to input
gradients. :func:`backward` linearizes the reachable graph into a
:class:`GradTape` (topological order) and sweeps it in reverse.

Storage is a numpy array; the kernels below are plain numpy calls.
"""

import contextlib
import threading

import numpy as np

from .errors import ContractError, DimensionError, TokenIndexError

GELU_C = 0.7978845608
GELU_A = 0.044715

_state = threading.local()


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them (thread-local)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    __slots__ = ("op", "inputs", "backward")

    def __init__(self, op, inputs, backward):
        self.op = op
        self.inputs = inputs
        self.backward = backward


class Tensor:
    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    __add__ = lambda self, other: add(self, _wrap(other))
    __radd__ = lambda self, other: add(_wrap(other), self)
    __sub__ = lambda self, other: sub(self, _wrap(other))
    __rsub__ = lambda self, other: sub(_wrap(other), self)
    __mul__ = lambda self, other: mul(self, _wrap(other))
    __rmul__ = lambda self, other: mul(_wrap(other), self)
    __neg__ = lambda self: scale(self, -1.0)
    __matmul__ = lambda self, other: matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("only division by a python scalar is supported")
        return scale(self, 1.0 / other)

    def sum(self):
        return tsum(self)


def _wrap(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _result(data, inputs, backward, op):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node = None
    out.requires_grad = False
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, tuple(inputs), backward)
    return out


class GradTape:
    """Topologically ordered list of tensors reachable from a root.

    Every tensor appears after all tensors that produced it.
    """

    def __init__(self, order):
        self.order = order

    @classmethod
    def record(cls, root):
        order = []
        seen = set()
        stack = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen or not t.requires_grad:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for parent in reversed(t.node.inputs):
                    if parent.requires_grad and id(parent) not in seen:
                        stack.append((parent, False))
        return cls(order)

    @property
    def ops(self):
        return [t.node.op for t in self.order if t.node is not None]

    def __len__(self):
        return len(self.order)


def backward(loss):
    if not isinstance(loss, Tensor) or loss.ndim != 0:
        shape = getattr(loss, "shape", None)
        raise ContractError(f"backward needs a scalar loss, got shape {shape}")
    tape = GradTape.record(loss)
    if len(tape) == 0:
        raise ContractError("loss does not depend on any tensor requiring grad; tape is empty")
    grads = {id(loss): np.ones_like(loss.data)}
    for t in reversed(tape.order):
        g = grads.get(id(t))
        if g is None:
            continue
        t.grad = g.copy() if t.grad is None else t.grad + g
        if t.node is None:
            continue
        in_grads = t.node.backward(g)
        for parent, pg in zip(t.node.inputs, in_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return tape


# ---------------------------------------------------------------- broadcasting

def _suffix_broadcast(a, b, op):
    """Return the output shape; the smaller operand must be a trailing suffix."""
    sa, sb = a.shape, b.shape
    if sa == sb:
        return sa
    if len(sb) <= len(sa) and sa[len(sa) - len(sb):] == sb:
        return sa
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return sb
    raise DimensionError(f"{op}: shapes {sa} and {sb} are not suffix-compatible")


def _unbroadcast(g, shape):
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


def add(a, b):
    _suffix_broadcast(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b):
    _suffix_broadcast(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b):
    _suffix_broadcast(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), bw, "mul")


def scale(a, c):
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def tsum(a):
    return _result(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def mean(a):
    n = a.size
    return scale(tsum(a), 1.0 / n)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    """``a[..., m, k] @ b[k, n]`` or ``a[..., m, k] @ b[..., k, n]`` with equal leading dims."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: need at least 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ for shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise DimensionError(f"matmul: leading dims differ for shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        if b.ndim == 2 and gb.ndim > 2:
            gb = gb.reshape(-1, *b.shape).sum(axis=0)
        return ga, gb

    return _result(out, (a, b), bw, "matmul")


def reshape(a, shape):
    shape = tuple(shape)
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, ax1=-1, ax2=-2):
    return _result(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),), "transpose")


def concat_rows(a, b):
    """Concatenate along the second-to-last axis; rows of ``a`` come first."""
    if a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"concat_rows: incompatible shapes {a.shape} and {b.shape}")
    p = a.shape[-2]
    out = np.concatenate([a.data, b.data], axis=-2)

    def bw(g):
        return g[..., :p, :], g[..., p:, :]

    return _result(out, (a, b), bw, "concat_rows")


def expand_leading(a, lead):
    """Broadcast ``a`` to ``(*lead, *a.shape)``; the gradient sums over ``lead``."""
    lead = tuple(lead)
    out = np.broadcast_to(a.data, lead + a.shape).copy()
    axes = tuple(range(len(lead)))
    return _result(out, (a,), lambda g: (g.sum(axis=axes),), "expand_leading")


def select_row(a, index):
    """``a[..., index, :]``; drops the row axis."""
    n = a.shape[-2]
    if not -n <= index < n:
        raise TokenIndexError(f"row index {index} out of range for {n} rows", index)

    def bw(g):
        full = np.zeros_like(a.data)
        full[..., index, :] = g
        return (full,)

    return _result(a.data[..., index, :].copy(), (a,), bw, "select_row")


def masked_fill(a, keep, value):
    """Replace entries where boolean ``keep`` is False by ``value``."""
    keep = np.broadcast_to(np.asarray(keep, dtype=bool), a.shape)
    out = np.where(keep, a.data, value)
    return _result(out, (a,), lambda g: (np.where(keep, g, 0.0),), "masked_fill")


# ---------------------------------------------------------------- nonlinearities

def softmax(a):
    if a.ndim == 0 or a.shape[-1] == 0:
        raise DimensionError(f"softmax: empty last axis in shape {a.shape}")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _result(s, (a,), bw, "softmax")


def layer_norm(a, gain, bias, eps=1e-5):
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs features {d}")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        gx = g * gain.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (a, gain, bias), bw, "layer_norm")


def relu(a):
    pos = a.data > 0
    return _result(np.where(pos, a.data, 0.0), (a,), lambda g: (np.where(pos, g, 0.0),), "relu")


def gelu(a):
    x = a.data
    t = np.tanh(GELU_C * (x + GELU_A * x ** 3))
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _result(out, (a,), bw, "gelu")


def tanh(a):
    t = np.tanh(a.data)
    return _result(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


ACTIVATIONS = {"gelu": gelu, "relu": relu, "tanh": tanh}


# ---------------------------------------------------------------- lookups and losses

def embedding_lookup(table, ids):
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError(f"ids must be integers, got dtype {ids.dtype}")
    n = table.shape[0]
    bad = ids[(ids < 0) | (ids >= n)]
    if bad.size:
        raise TokenIndexError(f"id {int(bad[0])} outside vocabulary of size {n}", int(bad[0]))

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _result(table.data[ids], (table,), bw, "embedding")


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under row-wise ``logits``."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n, c = logits.shape
    bad = labels[(labels < 0) | (labels >= c)]
    if bad.size:
        raise TokenIndexError(f"label {int(bad[0])} outside {c} classes", int(bad[0]))
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = -logp[np.arange(n), labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (p * (g / n),)

    return _result(np.asarray(loss), (logits,), bw, "cross_entropy")
