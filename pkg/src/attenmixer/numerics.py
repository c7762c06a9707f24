"""Small reverse-mode differentiation core on top of float64 numpy arrays.

Only the operations the recommender needs are provided. A ``Tensor`` records
its parents and a backward rule only when at least one input requires a
gradient, so evaluation-only code paths build no graph at all.

Values are never mutated after creation; ``backward`` returns gradients in a
dictionary instead of writing them onto the tensors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import DegenerateNorm, InvalidP, NonFiniteError, NonFiniteGradient, ShapeError

DTYPE = np.float64
NORM_EPS = 1e-12


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __float__(self):
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(x, name=None) -> Tensor:
    arr = np.array(x, dtype=DTYPE)
    check_finite(arr, name or "parameter")
    return Tensor(arr, requires_grad=True, name=name)


def check_finite(arr, what="value"):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite entries in {what}")


def _make(out, parents, backward, op):
    check_finite(out, op)
    if any(p.requires_grad for p in parents):
        return Tensor(out, requires_grad=True, _parents=parents, _backward=backward)
    return Tensor(out)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make(out, (a, b), backward, "div")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    out = a.data**p

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (g * p * a.data ** (p - 1),)

    return _make(out, (a,), backward, "power")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    """Square root whose derivative at exactly 0 is taken as 0 (not infinity)."""
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def backward(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0),)

    return _make(out, (a,), backward, "sqrt")


# ---------------------------------------------------------------------------
# shape and linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul expects operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(np.matmul(a.data, b.data), (a, b), backward, "matmul")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def swapaxes(a, ax1=-1, ax2=-2) -> Tensor:
    a = as_tensor(a)
    return _make(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),), "swapaxes")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def concat(tensors: Sequence, axis=-1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, tuple(tensors), backward, "concat")


def stack(tensors: Sequence, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) if axis >= 0 else
                reshape(t, t.shape + (1,)) for t in tensors]
    return concat(expanded, axis=axis)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward, "sum")


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis), 1.0 / n)


def index(a, key) -> Tensor:
    """Numpy-style indexing; gradients of repeated indices accumulate."""
    a = as_tensor(a)

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, key, g)
        return (out,)

    return _make(a.data[key], (a,), backward, "index")


def gather_rows(table, idx) -> Tensor:
    return index(table, np.asarray(idx, dtype=np.intp))


# ---------------------------------------------------------------------------
# normalisations and reductions used by the readout
# ---------------------------------------------------------------------------

def l2_normalize(v, axis=-1) -> Tensor:
    """Scale ``v`` to unit Euclidean norm along ``axis``.

    Raises DegenerateNorm when any norm is below 1e-12.
    """
    v = as_tensor(v)
    norm = np.sqrt(np.sum(v.data * v.data, axis=axis, keepdims=True))
    if np.any(norm < NORM_EPS):
        raise DegenerateNorm(f"vector norm below {NORM_EPS:g}")
    out = v.data / norm

    def backward(g):
        return ((g - out * np.sum(g * out, axis=axis, keepdims=True)) / norm,)

    return _make(out, (v,), backward, "l2_normalize")


def softmax(x, scale=1.0, mask=None, axis=-1) -> Tensor:
    """``softmax(scale * x)`` along ``axis``.

    Entries that are ``-inf`` in ``x`` or False in ``mask`` get probability
    exactly 0. At least one entry per slice must remain unmasked.
    """
    if scale <= 0:
        raise ValueError("softmax scale must be positive")
    x = as_tensor(x)
    if np.any(np.isnan(x.data)) or np.any(x.data == np.inf):
        raise NonFiniteError("softmax input contains NaN or +inf")
    valid = np.isfinite(x.data)
    if mask is not None:
        valid = valid & np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if not np.all(np.any(valid, axis=axis)):
        raise ValueError("softmax slice with every entry masked")
    z = np.where(valid, scale * np.where(valid, x.data, 0.0), -np.inf)
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.where(valid, np.exp(z), 0.0)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (scale * out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _make(out, (x,), backward, "softmax")


def lp_pool(values, p: float, axis=-1, keepdims=False) -> Tensor:
    """Generalised pooling ``(sum v_i^p)^(1/p)`` over nonnegative ``values``.

    ``p == 1`` is computed as a plain sum. Otherwise the largest entry is
    factored out first so that large ``p`` neither underflows nor overflows.
    """
    if p < 1:
        raise InvalidP(f"pooling exponent must be >= 1, got {p}")
    values = as_tensor(values)
    if np.any(values.data < 0):
        raise ValueError("lp_pool expects nonnegative values")
    if p == 1:
        return tsum(values, axis=axis, keepdims=keepdims)
    x = values.data
    m = np.max(x, axis=axis, keepdims=True)
    safe_m = np.where(m > 0, m, 1.0)
    ratio = x / safe_m
    out_k = np.where(m > 0, m * np.sum(ratio**p, axis=axis, keepdims=True) ** (1.0 / p), 0.0)
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe_out = np.where(out_k > 0, out_k, 1.0)
        d = np.where(out_k > 0, (x / safe_out) ** (p - 1), 0.0)
        return (g * d,)

    return _make(out, (values,), backward, "lp_pool")


def max_pool(values, axis=-1, keepdims=False) -> Tensor:
    """Maximum along ``axis``; the gradient goes to the first maximal entry."""
    values = as_tensor(values)
    arg = np.argmax(values.data, axis=axis)
    arg_k = np.expand_dims(arg, axis)
    out_k = np.take_along_axis(values.data, arg_k, axis=axis)
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        grad = np.zeros_like(values.data)
        np.put_along_axis(grad, arg_k, g, axis=axis)
        return (grad,)

    return _make(out, (values,), backward, "max_pool")


def softmax_cross_entropy(logits, targets, scale=1.0) -> Tensor:
    """Mean of ``-log softmax(scale * logits)[target]`` over the rows of ``logits``.

    ``targets`` are column indices. Computed in log-sum-exp form.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.intp)
    z = scale * logits.data
    zmax = np.max(z, axis=-1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.sum(np.exp(shifted), axis=-1))
    rows = np.arange(z.shape[0])
    losses = lse - shifted[rows, targets]
    out = np.sum(losses) / z.shape[0]

    def backward(g):
        probs = np.exp(shifted - lse[:, None])
        probs[rows, targets] -= 1.0
        return (g * scale * probs / z.shape[0],)

    return _make(np.asarray(out), (logits,), backward, "softmax_cross_entropy")


# ---------------------------------------------------------------------------
# differentiation
# ---------------------------------------------------------------------------

def backward(loss: Tensor, wrt: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Reverse sweep from scalar ``loss``; returns gradients for ``wrt`` only."""
    if loss.data.size != 1:
        raise ShapeError("backward needs a scalar loss")
    order = []
    seen = set()
    stack_ = [(loss, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack_.append((parent, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None) if node._parents else grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg

    out = {}
    for name, t in wrt.items():
        g = grads.get(id(t))
        out[name] = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=DTYPE).reshape(t.shape)
    return out


@dataclass(frozen=True)
class GradientRecord:
    loss: float
    grads: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.grads[name]


def grad(loss_fn: Callable, params: Mapping[str, np.ndarray], inputs: Sequence = ()) -> GradientRecord:
    """Evaluate ``loss_fn(param_tensors, *inputs)`` and differentiate it.

    ``loss_fn`` receives a dict of parameter tensors and must return a scalar
    Tensor built from the operations in this module.
    """
    tensors = {name: parameter(value, name=name) for name, value in params.items()}
    loss = loss_fn(tensors, *inputs)
    grads = backward(loss, tensors)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {name!r}")
    return GradientRecord(loss=float(loss.data), grads=grads)


def evaluate_loss(loss_fn, params, inputs=()) -> float:
    tensors = {name: Tensor(value) for name, value in params.items()}
    return float(loss_fn(tensors, *inputs).data)


def finite_diff_check(loss_fn, params, inputs=(), step=1e-4) -> float:
    """Maximum relative error between ``grad`` and central differences.

    The relative error of one entry is ``|a - b| / max(|a|, |b|, 1e-8)``.
    """
    if not 1e-6 <= step <= 1e-3:
        raise ValueError("finite-difference step must lie in [1e-6, 1e-3]")
    analytic = grad(loss_fn, params, inputs).grads
    base = {name: np.array(v, dtype=DTYPE) for name, v in params.items()}
    worst = 0.0
    for name, value in base.items():
        flat = value.reshape(-1)
        g = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = evaluate_loss(loss_fn, base, inputs)
            flat[i] = orig - step
            down = evaluate_loss(loss_fn, base, inputs)
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            err = abs(numeric - g[i]) / max(abs(numeric), abs(g[i]), 1e-8)
            worst = max(worst, err)
    return worst
