"""Dense numpy-backed tensors with a reverse-mode differentiation tape.

Every op returns a new :class:`Tensor`; when any input requires a gradient the
output records its parents and a backward rule mapping the output gradient to
one gradient per parent.  :func:`backward` walks the recorded graph in reverse
topological order, visiting each node exactly once.

Broadcasting is deliberately narrow.  Binary elementwise ops accept equal shapes
or a 0-d scalar on either side.  Anything else goes through :func:`expand`,
whose backward rule sums over the broadcast axes, so every reduction in a
backward pass is explicit.  Two fused ops also broadcast a trailing vector:
:func:`rmsnorm` (gain) and :func:`add_bias`.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DimensionError, NumericError, UsageError, ConfigError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "op")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    # -- introspection -----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    def __len__(self):
        return self.shape[0]

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
        if isinstance(other, Tensor):
            raise DimensionError("division by a Tensor is not supported; multiply by a reciprocal")
        return scale(self, 1.0 / other)

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
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self):
        backward(self)


def tensor(data, requires_grad=False, name=None, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name, dtype=dtype)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data, parents, backward_rule, op) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    req = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = req
    if req:
        out._parents = tuple(parents)
        out._backward = backward_rule
    else:
        out._parents = ()
        out._backward = None
    return out


# -- backward traversal ------------------------------------------------------

def _topological(root: Tensor) -> list[Tensor]:
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate dloss/dleaf into ``.grad`` of every leaf that requires it.

    Repeated calls without clearing ``.grad`` accumulate.
    """
    if loss.data.ndim != 0:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor that requires grad")
    order = _topological(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._parents:
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
        else:
            node.grad = np.array(g, dtype=node.dtype) if node.grad is None else node.grad + g


# -- elementwise -------------------------------------------------------------

def _check_binary(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible "
                             "(only equal shapes or a 0-d scalar); use expand()")


def _reduce_to(g, shape):
    return g.sum() if shape == () and g.shape != () else g


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_binary(a, b, "add")
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b),
                 lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_binary(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b),
                 lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_binary(a, b, "mul")
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b),
                 lambda g: (_reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)), "mul")


def neg(x: Tensor) -> Tensor:
    return _node(-x.data, (x,), lambda g: (-g,), "neg")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(x.data * c, (x,), lambda g: (g * c,), "scale")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _node(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NumericError("log of a non-positive value")
    xd = x.data
    return _node(np.log(xd), (x,), lambda g: (g / xd,), "log")


def _sigmoid(v):
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(v.dtype, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _node(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = _sigmoid(xd)
    return _node(xd * s, (x,), lambda g: (g * (s + xd * s * (1.0 - s)),), "silu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """GeLU, tanh approximation."""
    xd = x.data
    t = np.tanh(_GELU_C * (xd + 0.044715 * xd ** 3))
    y = 0.5 * xd * (1.0 + t)

    def rule(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * dt),)

    return _node(y, (x,), rule, "gelu")


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "scale": scale,
    "exp": exp, "silu": silu, "sigmoid": sigmoid, "neg": neg, "gelu": gelu,
}


def elementwise(kind: str, *operands) -> Tensor:
    """Dispatch by name: ``elementwise("silu", x)``, ``elementwise("scale", x, 0.5)``."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise UsageError(f"unknown elementwise kind {kind!r}") from None
    return fn(*operands)


# -- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product.

    ``a`` is (..., m, k).  ``b`` is either (..., k, n) with identical leading
    extents, or a plain (k, n) matrix shared across a's leading axes.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or (b.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    shared = b.ndim == 2 and a.ndim > 2

    def rule(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if shared:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _node(ad @ bd, (a, b), rule, "matmul")


def softmax_rows(s: Tensor) -> Tensor:
    """Softmax along the last axis, stabilised by subtracting the row max."""
    sd = s.data
    if not np.all(np.isfinite(sd)):
        raise NumericError("softmax_rows received non-finite scores")
    e = np.exp(sd - sd.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _node(y, (s,), rule, "softmax")


def rmsnorm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """x / sqrt(mean(x^2) + eps) * gain over the last axis."""
    if eps < 0:
        raise ConfigError("rmsnorm eps must be non-negative")
    if gain.shape != (x.shape[-1],):
        raise DimensionError(f"rmsnorm gain {gain.shape} does not match feature axis of {x.shape}")
    xd, gd = x.data, gain.data
    r = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    xhat = xd * r

    def rule(g):
        gh = g * gd
        gx = r * (gh - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        ggain = (g * xhat).reshape(-1, xd.shape[-1]).sum(axis=0)
        return gx, ggain

    return _node(xhat * gd, (x, gain), rule, "rmsnorm")


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """x + bias with ``bias`` a vector broadcast along x's last axis."""
    if bias.shape != (x.shape[-1],):
        raise DimensionError(f"bias {bias.shape} does not match last axis of {x.shape}")
    n = x.shape[-1]
    return _node(x.data + bias.data, (x, bias),
                 lambda g: (g, g.reshape(-1, n).sum(axis=0)), "add_bias")


# -- shape ops ---------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def expand(x: Tensor, shape) -> Tensor:
    """numpy-style broadcast to ``shape``; backward sums over broadcast axes."""
    shape = tuple(shape)
    src = x.shape
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise DimensionError(f"cannot expand {src} to {shape}") from None
    lead = len(shape) - len(src)

    def rule(g):
        if lead:
            g = g.sum(axis=tuple(range(lead)))
        axes = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _node(out, (x,), rule, "expand")


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    src = x.shape

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _node(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), rule, "sum")


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(tsum(x, axis, keepdims), 1.0 / n)


def getitem(x: Tensor, idx) -> Tensor:
    src, dtype = x.shape, x.dtype

    def rule(g):
        full = np.zeros(src, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _node(np.array(x.data[idx]), (x,), rule, "getitem")


def concat(tensors, axis=0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    cuts = np.cumsum(sizes)[:-1]
    return _node(out, tensors, lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; ``ids`` is an integer array of any shape."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DataError(f"token id out of range [0, {table.shape[0]})")
    shape, dtype = table.shape, table.dtype

    def rule(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _node(table.data[ids], (table,), rule, "embedding")


# -- stochastic and loss ops -------------------------------------------------

def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p); eval mode is identity."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) * (1.0 / (1.0 - p))
    return _node(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n_classes = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes
                        or not np.issubdtype(labels.dtype, np.integer)):
        raise DataError(f"labels must be integers in [0, {n_classes})")
    z = logits.data
    if not np.all(np.isfinite(z)):
        raise NumericError("cross_entropy received non-finite logits")
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(len(labels))
    loss = np.asarray((lse - shifted[rows, labels]).mean(), dtype=z.dtype)

    def rule(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / len(labels)),)

    return _node(loss, (logits,), rule, "cross_entropy")


# -- finite-difference checker -----------------------------------------------

@dataclass
class GradcheckReport:
    max_rel_error: dict = field(default_factory=dict)
    max_abs_error: dict = field(default_factory=dict)
    tol: float = 0.0

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return all(v < self.tol for v in self.max_rel_error.values())


def gradcheck(f, leaves, h=1e-5, tol=1e-4, floor=1e-6, names=None) -> GradcheckReport:
    """Compare analytic gradients of the scalar ``f()`` against central differences.

    Relative error per element is ``|a - n| / max(|a|, |n|, floor)``; ``floor``
    keeps elements whose true gradient is zero from dividing roundoff by zero.
    Leaves must be float64.
    """
    leaves = list(leaves)
    names = list(names) if names is not None else [t.name or f"leaf{i}" for i, t in enumerate(leaves)]
    for t in leaves:
        if t.dtype != np.float64:
            raise UsageError("gradcheck requires float64 leaves")
        t.zero_grad()
    out = f()
    again = f()
    if out.data.ndim != 0:
        raise UsageError("gradcheck target must return a scalar")
    if out.item() != again.item():
        raise NumericError("gradcheck target is not deterministic across calls")
    backward(out)
    report = GradcheckReport(tol=tol)
    with no_grad():
        for name, t in zip(names, leaves):
            analytic = np.zeros_like(t.data) if t.grad is None else t.grad
            flat = t.data.reshape(-1)
            worst_rel = worst_abs = 0.0
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = f().item()
                flat[i] = orig - h
                fm = f().item()
                flat[i] = orig
                num = (fp - fm) / (2 * h)
                a = analytic.reshape(-1)[i]
                err = abs(a - num)
                worst_abs = max(worst_abs, err)
                worst_rel = max(worst_rel, err / max(abs(a), abs(num), floor))
            key = name
            while key in report.max_rel_error:
                key += "'"
            report.max_rel_error[key] = worst_rel
            report.max_abs_error[key] = worst_abs
    for t in leaves:
        t.zero_grad()
    return report
