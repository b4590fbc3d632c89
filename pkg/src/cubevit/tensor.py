"""Dense real-tensor engine with reverse-mode differentiation.

Tensors wrap row-major numpy arrays in float32 or float64. Every operation
records its inputs and a backward closure; calling :meth:`Tensor.backward`
on a scalar loss fills ``.grad`` on every reachable tensor that requires
gradients, accumulating in a fixed topological order so results are
bit-reproducible.

Forward values are plain numpy computations, so ``float64`` graphs can be
checked against central finite differences (see :func:`check_gradients`)
while ``float32`` graphs keep training cheap.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .errors import DegenerateInputError, UsageError

_ALLOWED = (np.dtype(np.float32), np.dtype(np.float64))

INV_SQRT2 = 1.0 / math.sqrt(2.0)
INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _as_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif arr.dtype not in _ALLOWED:
        arr = arr.astype(np.float64)
    return np.ascontiguousarray(arr)


class Tensor:
    """Immutable-by-convention dense array node in a differentiable graph."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy(), requires_grad=False)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    # -- graph plumbing ---------------------------------------------------

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Reverse-mode sweep from a scalar loss."""
        if self.data.size != 1:
            raise UsageError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward()

    # -- operator sugar ---------------------------------------------------

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

    @property
    def T(self):
        return transpose(self)


def _toposort(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _ensure_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data, parents, backward):
    """Create an op-output tensor; drops the tape when no parent needs it."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _accumulate(t, g):
    # Never mutates an existing grad in place, so aliased views stay safe.
    if not t.requires_grad:
        return
    g = _unbroadcast(np.asarray(g, dtype=t.data.dtype), t.data.shape)
    t.grad = g if t.grad is None else t.grad + g


# -- elementwise binary ----------------------------------------------------


def add(a, b):
    a = _ensure_tensor(a, b if isinstance(b, Tensor) else None)
    b = _ensure_tensor(b, a)

    def backward():
        if out.grad is None:
            return
        _accumulate(a, out.grad)
        _accumulate(b, out.grad)

    out = _node(a.data + b.data, (a, b), backward)
    return out


def sub(a, b):
    a = _ensure_tensor(a, b if isinstance(b, Tensor) else None)
    b = _ensure_tensor(b, a)

    def backward():
        if out.grad is None:
            return
        _accumulate(a, out.grad)
        _accumulate(b, -out.grad)

    out = _node(a.data - b.data, (a, b), backward)
    return out


def mul(a, b):
    a = _ensure_tensor(a, b if isinstance(b, Tensor) else None)
    b = _ensure_tensor(b, a)

    def backward():
        if out.grad is None:
            return
        _accumulate(a, out.grad * b.data)
        _accumulate(b, out.grad * a.data)

    out = _node(a.data * b.data, (a, b), backward)
    return out


def div(a, b):
    a = _ensure_tensor(a, b if isinstance(b, Tensor) else None)
    b = _ensure_tensor(b, a)

    def backward():
        if out.grad is None:
            return
        _accumulate(a, out.grad / b.data)
        _accumulate(b, -out.grad * a.data / (b.data * b.data))

    out = _node(a.data / b.data, (a, b), backward)
    return out


def neg(x):
    def backward():
        if out.grad is None:
            return
        _accumulate(x, -out.grad)

    out = _node(-x.data, (x,), backward)
    return out


def pow_const(x, p):
    """x ** p for a python-number exponent."""
    p = float(p)

    def backward():
        if out.grad is None:
            return
        _accumulate(x, out.grad * p * np.power(x.data, p - 1.0))

    out = _node(np.power(x.data, p), (x,), backward)
    return out


# -- elementwise unary -----------------------------------------------------


def exp(x):
    def backward():
        if out.grad is None:
            return
        _accumulate(x, out.grad * out.data)

    out = _node(np.exp(x.data), (x,), backward)
    return out


def log(x):
    def backward():
        if out.grad is None:
            return
        _accumulate(x, out.grad / x.data)

    out = _node(np.log(x.data), (x,), backward)
    return out


def sqrt(x):
    def backward():
        if out.grad is None:
            return
        _accumulate(x, out.grad * 0.5 / out.data)

    out = _node(np.sqrt(x.data), (x,), backward)
    return out


def relu(x):
    def backward():
        if out.grad is None:
            return
        _accumulate(x, out.grad * (x.data > 0))

    out = _node(np.maximum(x.data, 0), (x,), backward)
    return out


def absolute(x):
    """|x| with the sign subgradient (0 at the kink)."""

    def backward():
        if out.grad is None:
            return
        _accumulate(x, out.grad * np.sign(x.data))

    out = _node(np.abs(x.data), (x,), backward)
    return out


def gaussian_cdf(arr):
    """Standard normal CDF on a raw numpy array."""
    return 0.5 * (1.0 + erf(arr * INV_SQRT2))


def gelu(x):
    """Exact-CDF GELU: y = x * Phi(x)."""
    phi = gaussian_cdf(x.data)

    def backward():
        if out.grad is None:
            return
        density = np.exp(-0.5 * x.data * x.data) * INV_SQRT2PI
        _accumulate(x, out.grad * (phi + x.data * density))

    out = _node(x.data * phi, (x,), backward)
    return out


# -- reductions ------------------------------------------------------------


def tensor_sum(x, axis=None, keepdims=False):
    def backward():
        if out.grad is None:
            return
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.data.shape))

    out = _node(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward)
    return out


def mean(x, axis=None, keepdims=False):
    if axis is None:
        count = x.data.size
    else:
        count = x.data.shape[axis]

    def backward():
        if out.grad is None:
            return
        g = out.grad / count
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.data.shape))

    out = _node(x.data.mean(axis=axis, keepdims=keepdims), (x,), backward)
    return out


# -- shape manipulation ----------------------------------------------------


def reshape(x, shape):
    def backward():
        if out.grad is None:
            return
        _accumulate(x, out.grad.reshape(x.data.shape))

    out = _node(np.ascontiguousarray(x.data.reshape(shape)), (x,), backward)
    return out


def transpose(x):
    if x.data.ndim != 2:
        raise UsageError(f"transpose expects a matrix, got shape {x.data.shape}")

    def backward():
        if out.grad is None:
            return
        _accumulate(x, out.grad.T)

    out = _node(np.ascontiguousarray(x.data.T), (x,), backward)
    return out


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise UsageError("matmul expects two matrices")
    if a.data.shape[1] != b.data.shape[0]:
        raise UsageError(
            f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}"
        )

    def backward():
        if out.grad is None:
            return
        _accumulate(a, out.grad @ b.data.T)
        _accumulate(b, a.data.T @ out.grad)

    out = _node(a.data @ b.data, (a, b), backward)
    return out


def take_rows(x, indices):
    """Row gather along axis 0; gradient scatter-adds in index order."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise UsageError("take_rows expects a flat index list")
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[0]):
        raise UsageError("take_rows index out of range")

    def backward():
        if out.grad is None:
            return
        g = np.zeros_like(x.data)
        np.add.at(g, idx, out.grad)
        _accumulate(x, g)

    out = _node(np.ascontiguousarray(x.data[idx]), (x,), backward)
    return out


def concat_rows(parts):
    parts = list(parts)
    sizes = [p.data.shape[0] for p in parts]

    def backward():
        if out.grad is None:
            return
        start = 0
        for p, n in zip(parts, sizes):
            _accumulate(p, out.grad[start : start + n])
            start += n

    out = _node(np.concatenate([p.data for p in parts], axis=0), tuple(parts), backward)
    return out


def slice_cols(x, start, stop):
    if x.data.ndim != 2:
        raise UsageError("slice_cols expects a matrix")

    def backward():
        if out.grad is None:
            return
        g = np.zeros_like(x.data)
        g[:, start:stop] = out.grad
        _accumulate(x, g)

    out = _node(np.ascontiguousarray(x.data[:, start:stop]), (x,), backward)
    return out


def concat_cols(parts):
    parts = list(parts)
    sizes = [p.data.shape[1] for p in parts]

    def backward():
        if out.grad is None:
            return
        start = 0
        for p, n in zip(parts, sizes):
            _accumulate(p, out.grad[:, start : start + n])
            start += n

    out = _node(np.concatenate([p.data for p in parts], axis=1), tuple(parts), backward)
    return out


# -- softmax family ----------------------------------------------------------


def _check_axis(x, axis):
    if not isinstance(axis, int) or not -x.data.ndim <= axis < x.data.ndim:
        raise UsageError(f"axis {axis} invalid for shape {x.data.shape}")
    return axis % x.data.ndim


def softmax(x, axis=-1):
    """Shift-stable softmax along ``axis``; rows sum to one."""
    axis = _check_axis(x, axis)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward():
        if out.grad is None:
            return
        inner = (out.grad * y).sum(axis=axis, keepdims=True)
        _accumulate(x, y * (out.grad - inner))

    out = _node(y, (x,), backward)
    return out


def log_softmax(x, axis=-1):
    axis = _check_axis(x, axis)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def backward():
        if out.grad is None:
            return
        gsum = out.grad.sum(axis=axis, keepdims=True)
        _accumulate(x, out.grad - np.exp(y) * gsum)

    out = _node(y, (x,), backward)
    return out


# -- normalization ---------------------------------------------------------


def layer_norm(x, gain, bias, eps=1e-6):
    """Normalize the last axis to zero mean / unit population variance,
    then apply the affine map gain * y + bias."""
    if eps <= 0:
        raise UsageError("layer_norm eps must be positive")
    width = x.data.shape[-1]
    if gain.data.shape != (width,) or bias.data.shape != (width,):
        raise UsageError(
            f"layer_norm affine shapes {gain.data.shape}/{bias.data.shape} "
            f"do not match width {width}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def backward():
        if out.grad is None:
            return
        reduce_axes = tuple(range(out.grad.ndim - 1))
        _accumulate(gain, (out.grad * y).sum(axis=reduce_axes))
        _accumulate(bias, out.grad.sum(axis=reduce_axes))
        dy = out.grad * gain.data
        m1 = dy.mean(axis=-1, keepdims=True)
        m2 = (dy * y).mean(axis=-1, keepdims=True)
        _accumulate(x, inv * (dy - m1 - y * m2))

    out = _node(gain.data * y + bias.data, (x, gain, bias), backward)
    return out


# -- regularization ----------------------------------------------------------


def dropout(x, p, rng=None, train=False):
    """Inverted dropout: scales by 1/(1-p) at train time, identity at eval."""
    if not 0.0 <= p < 1.0:
        raise UsageError(f"dropout rate must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise UsageError("train-mode dropout needs an rng")
    keep = (rng.random(x.data.shape) >= p).astype(x.data.dtype) / (1.0 - p)

    def backward():
        if out.grad is None:
            return
        _accumulate(x, out.grad * keep)

    out = _node(x.data * keep, (x,), backward)
    return out


# -- similarity --------------------------------------------------------------


def _check_nonzero_rows(arr, label):
    norms = np.sqrt((arr * arr).sum(axis=-1))
    if np.any(norms == 0.0):
        raise DegenerateInputError(f"{label} contains a zero vector")


def l2_normalize_rows(x):
    _check_nonzero_rows(x.data, "l2_normalize_rows input")
    sq = tensor_sum(mul(x, x), axis=-1, keepdims=True)
    return div(x, sqrt(sq))


def cosine_similarity(a, b):
    """Cosine similarity of two nonzero vectors; scalar in [-1, 1]."""
    a = _ensure_tensor(a)
    b = _ensure_tensor(b)
    if a.data.ndim != 1 or b.data.ndim != 1 or a.data.shape != b.data.shape:
        raise UsageError("cosine_similarity expects two equal-length vectors")
    _check_nonzero_rows(a.data[None, :], "cosine_similarity a")
    _check_nonzero_rows(b.data[None, :], "cosine_similarity b")
    num = tensor_sum(mul(a, b))
    den = mul(sqrt(tensor_sum(mul(a, a))), sqrt(tensor_sum(mul(b, b))))
    return div(num, den)


def cosine_matrix(a, b):
    """Pairwise cosine similarities between rows of a (N x D) and b (M x D)."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[1]:
        raise UsageError("cosine_matrix expects two matrices with equal width")
    return matmul(l2_normalize_rows(a), transpose(l2_normalize_rows(b)))


def diagonal(x):
    """Main diagonal of a square matrix as a flat tensor."""
    n, m = x.data.shape
    if n != m:
        raise UsageError("diagonal expects a square matrix")
    return take_rows(reshape(x, (n * m,)), np.arange(n) * (n + 1))


# -- gradient extraction and checking ---------------------------------------


def gradient_of(loss, parameters):
    """Backward from a scalar loss; returns the adjoint of each parameter.

    Parameters may be a dict (name -> Tensor) or an iterable of tensors;
    the return mirrors the input container. Unreached parameters get zeros.
    """
    if not isinstance(loss, Tensor):
        raise UsageError("gradient_of expects a Tensor loss")
    named = isinstance(parameters, dict)
    tensors = list(parameters.values()) if named else list(parameters)
    for t in tensors:
        t.grad = None
    loss.backward()
    grads = [
        t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors
    ]
    if named:
        return dict(zip(parameters.keys(), grads))
    return grads


def central_difference(f, arrays, which, coord, eps):
    """(f(x+eps) - f(x-eps)) / (2 eps) along one coordinate of one input."""
    plus = [a.copy() for a in arrays]
    minus = [a.copy() for a in arrays]
    plus[which].flat[coord] += eps
    minus[which].flat[coord] -= eps
    return (f(plus) - f(minus)) / (2.0 * eps)


def check_gradients(f, arrays, probes=200, seed=0, eps=1e-6, rtol=1e-4):
    """Compare reverse-mode adjoints of ``f`` against central differences.

    ``f`` maps a list of float64 numpy arrays to a scalar; internally it is
    re-run on Tensors to obtain analytic gradients, then probed at random
    coordinates. Returns the worst relative error observed; raises
    AssertionError when any probe exceeds ``rtol``.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = f(tensors)
    grads = gradient_of(loss, tensors)

    def scalar_f(raw):
        return float(f([Tensor(a) for a in raw]).data)

    rng = np.random.default_rng(seed)
    sizes = np.array([a.size for a in arrays], dtype=np.float64)
    worst = 0.0
    for _ in range(probes):
        which = int(rng.integers(len(arrays))) if len(arrays) > 1 else 0
        if sizes[which] == 0:
            continue
        coord = int(rng.integers(int(sizes[which])))
        fd = central_difference(scalar_f, arrays, which, coord, eps)
        an = grads[which].flat[coord]
        rel = abs(an - fd) / (abs(fd) + 1e-8)
        worst = max(worst, rel)
        assert rel <= rtol, (
            f"gradient mismatch on input {which} coord {coord}: "
            f"analytic {an!r} vs central-difference {fd!r} (rel {rel:.3e})"
        )
    return worst
