"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

The graph is built while the forward pass runs (define-by-run).  Every
operation returns a new :class:`Tensor` that remembers its parents and a
closure mapping the upstream gradient to one gradient per parent.
:func:`backward` sorts the reachable graph topologically and sweeps it once
in reverse.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

from .errors import ContractError, DegenerateRowError, DimensionError, DomainError

# Finite stand-in for -inf in masked softmax; exp() of it underflows to 0.
MASK_FILL = -1e30

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Run the enclosed block without recording operations."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _first_index(bad):
    idx = np.argwhere(bad)[0]
    return tuple(int(i) for i in idx)


class Tensor:
    """Dense n-d array of float64 with an optional link into the graph."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents = ()
        self._backward = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    def numpy(self):
        return self.data.copy()

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    # -- operator sugar ------------------------------------------------
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def square(self):
        return square(self)

    def abs(self):
        return absolute(self)

    def softplus(self):
        return softplus(self)

    def lgamma(self):
        return lgamma_op(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn, op):
    out = Tensor(data, op=op)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


# ---------------------------------------------------------------------------
# graph traversal


def tape(root):
    """Nodes reachable from ``root`` in topological order (inputs first)."""
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
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not connected to any parameter")
    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        "add",
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
        "sub",
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _node(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    zero = bd == 0
    if zero.any():
        raise DomainError("division by zero", _first_index(zero))
    out = ad / bd

    def _back(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _node(out, (a, b), _back, "div")


def neg(a):
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a):
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    ad = a.data
    bad = ad <= 0
    if bad.any():
        raise DomainError("log of non-positive value", _first_index(bad))
    return _node(np.log(ad), (a,), lambda g: (g / ad,), "log")


def tanh(a):
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a):
    out = _sigmoid(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def square(a):
    ad = a.data
    return _node(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def relu(a):
    ad = a.data
    return _node(np.maximum(ad, 0.0), (a,), lambda g: (g * (ad > 0),), "relu")


def absolute(a):
    ad = a.data
    return _node(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def _softplus(x):
    # max(x, 0) + log1p(exp(-|x|)) == x + log1p(exp(-x)) for x > 0, log1p(exp(x)) otherwise
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus(a):
    ad = a.data
    return _node(_softplus(ad), (a,), lambda g: (g * _sigmoid(ad),), "softplus")


def elementwise(op_tag, a, b=None):
    """Dispatch by name; ``b`` is required for the binary ops only."""
    binary = {"add": add, "sub": sub, "mul": mul, "div": div}
    unary = {
        "neg": neg,
        "exp": exp,
        "log": log,
        "tanh": tanh,
        "sigmoid": sigmoid,
        "square": square,
        "relu": relu,
        "abs": absolute,
        "softplus": softplus,
    }
    if op_tag in binary:
        if b is None:
            raise ContractError(f"{op_tag} needs two operands")
        return binary[op_tag](a, b)
    if op_tag in unary:
        return unary[op_tag](as_tensor(a))
    raise ContractError(f"unknown elementwise op {op_tag!r}")


def where(cond, a, b):
    """Select ``a`` where the constant boolean ``cond`` holds, else ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    sa, sb = a.shape, b.shape

    def _back(g):
        return (
            _unbroadcast(np.where(cond, g, 0.0), sa),
            _unbroadcast(np.where(cond, 0.0, g), sb),
        )

    return _node(np.where(cond, a.data, b.data), (a, b), _back, "where")


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def _back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and ad.ndim > 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return _unbroadcast(ga, ad.shape), gb

    return _node(ad @ bd, (a, b), _back, "matmul")


def tsum(a, axis=None, keepdims=False):
    shape = a.shape

    def _back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), _back, "sum")


def tmean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = math.prod(a.shape[ax] for ax in axes)
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a, shape):
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _node(
        np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose"
    )


def _is_basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(a, idx):
    shape = a.shape
    basic = _is_basic_index(idx)

    def _back(g):
        full = np.zeros(shape)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _node(a.data[idx], (a,), _back, "getitem")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _node(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, cuts, axis=axis)),
        "concat",
    )


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    n = len(tensors)

    def _back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _node(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), _back, "stack")


# ---------------------------------------------------------------------------
# attention normalisation


def masked_softmax(scores, mask, query_mask=None):
    """Softmax over the last axis restricted to valid keys.

    ``scores`` is ``B x ... x Tq x Tk`` and ``mask`` is ``B x Tk``.  Masked keys
    get exactly zero weight; rows belonging to masked queries are all zero.
    """
    mask = np.asarray(mask, dtype=bool)
    query_mask = mask if query_mask is None else np.asarray(query_mask, dtype=bool)
    sd = scores.data
    lead = (1,) * (sd.ndim - 3)
    B = sd.shape[0]
    keys = mask.reshape((B,) + lead + (1, sd.shape[-1]))
    queries = query_mask.reshape((B,) + lead + (sd.shape[-2], 1))

    n_keys = keys.sum(axis=-1, keepdims=True)
    degenerate = queries & (n_keys == 0)
    if degenerate.any():
        raise DegenerateRowError(
            f"valid query without any valid key at {_first_index(np.broadcast_to(degenerate, degenerate.shape))}"
        )

    filled = np.where(keys, sd, MASK_FILL)
    filled = filled - filled.max(axis=-1, keepdims=True)
    e = np.where(keys, np.exp(filled), 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    out = np.where(queries, e / np.where(denom > 0, denom, 1.0), 0.0)

    def _back(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return _node(out, (scores,), _back, "masked_softmax")


# ---------------------------------------------------------------------------
# special functions

_LANCZOS_G = 7.0
_LANCZOS_COEF = (
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
)
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def _check_positive(x, name):
    bad = ~(x > 0)
    if bad.any():
        raise DomainError(f"{name} requires x > 0", _first_index(bad) if x.ndim else ())


def lgamma(x):
    """log Gamma(x) for x > 0 (Lanczos, g=7, nine coefficients)."""
    scalar = np.ndim(x) == 0
    x = np.asarray(x, dtype=np.float64)
    _check_positive(x, "lgamma")
    z = x - 1.0
    series = np.full_like(z, _LANCZOS_COEF[0])
    for i in range(1, len(_LANCZOS_COEF)):
        series = series + _LANCZOS_COEF[i] / (z + i)
    t = z + _LANCZOS_G + 0.5
    out = _HALF_LOG_2PI + (z + 0.5) * np.log(t) - t + np.log(series)
    return float(out) if scalar else out


# Asymptotic coefficients B_2k / (2k) for the digamma series.
_DIGAMMA_ASYMPTOTIC = (
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
)


def digamma(x):
    """psi(x) = d/dx log Gamma(x) for x > 0 via upward recurrence + asymptotic series."""
    scalar = np.ndim(x) == 0
    x = np.asarray(x, dtype=np.float64)
    _check_positive(x, "digamma")
    x = x.copy()
    shift = np.zeros_like(x)
    small = x < 10.0
    while small.any():
        shift = shift + np.where(small, 1.0 / np.where(small, x, 1.0), 0.0)
        x = np.where(small, x + 1.0, x)
        small = x < 10.0
    inv2 = 1.0 / (x * x)
    tail = np.zeros_like(x)
    for c in reversed(_DIGAMMA_ASYMPTOTIC):
        tail = (tail + c) * inv2
    out = np.log(x) - 0.5 / x - tail - shift
    return float(out) if scalar else out


def lgamma_op(a):
    ad = a.data
    return _node(lgamma(ad), (a,), lambda g: (g * digamma(ad),), "lgamma")


# ---------------------------------------------------------------------------
# finite-difference checking


def numerical_gradient(fn, arrays, eps=1e-5):
    """Central differences of scalar ``fn(*arrays)`` w.r.t. each array."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(fn(*arrays))
            flat[i] = orig - eps
            down = float(fn(*arrays))
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * eps)
        grads.append(g)
    return grads


def gradcheck(fn, arrays, eps=1e-5, rtol=1e-4, atol=1e-7):
    """Compare autodiff against central differences.

    ``fn`` maps Tensors to a scalar Tensor.  Returns ``(ok, worst)`` where
    ``worst`` is the largest ``|analytic - numeric| - rtol * max(|a|, |n|)``.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*leaves)
    backward(out)
    analytic = [l.grad if l.grad is not None else np.zeros_like(l.data) for l in leaves]

    def scalar(*arrs):
        with no_grad():
            return fn(*[Tensor(a) for a in arrs]).item()

    numeric = numerical_gradient(scalar, arrays, eps)
    worst = -np.inf
    ok = True
    for an, nu in zip(analytic, numeric):
        slack = atol + rtol * np.maximum(np.abs(an), np.abs(nu))
        excess = np.abs(an - nu) - slack
        worst = max(worst, float(excess.max(initial=-np.inf)))
        ok = ok and bool((excess <= 0).all())
    return ok, worst
