"""Dense float64 tensors with a define-by-run reverse-mode tape.

Only the handful of operations the flow layers need are provided. Every op
works eagerly on numpy arrays; when a :class:`GradientTape` is active and at
least one input is tracked by it, the op also records a vector-Jacobian
product so that :func:`backward` can propagate gradients.

Layout convention is channels-last: ``[B, H, W, C]`` or ``[B, D, H, W, C]``.
"""

from __future__ import annotations

import itertools
import threading
import warnings
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.linalg
import scipy.special
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, SingularMatrixError

__all__ = [
    "Tensor",
    "GradientTape",
    "backward",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "sigmoid",
    "relu",
    "square",
    "sum",
    "sum_per_sample",
    "mean",
    "reshape",
    "transpose",
    "slice_channels",
    "concat_channels",
    "channel_mix",
    "log_abs_det",
    "lu_factor",
    "conv",
    "numerical_gradient",
]

SINGULAR_PIVOT_TOL = 1e-12

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


class Tensor:
    """An immutable float64 array value.

    Hashing is by identity, so tensors can key gradient dictionaries.
    """

    __slots__ = ("data", "name", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

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

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "inputs", "needs", "vjp")

    def __init__(self, out, inputs, needs, vjp):
        self.out = out
        self.inputs = inputs
        self.needs = needs
        self.vjp = vjp


class GradientTape:
    """Records operations on watched tensors while used as a context manager.

    >>> w = Tensor([1.0, 2.0])
    >>> with GradientTape() as tape:
    ...     tape.watch(w)
    ...     y = sum(w * w)
    >>> backward(tape, y)[w]
    array([2., 4.])
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._tracked: set[int] = set()
        self._watched: list[Tensor] = []

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            if not isinstance(t, Tensor):
                raise ContractError("only Tensor objects can be watched")
            if id(t) not in self._tracked:
                self._tracked.add(id(t))
                self._watched.append(t)

    @property
    def watched(self) -> list[Tensor]:
        return list(self._watched)

    def is_tracked(self, t) -> bool:
        return isinstance(t, Tensor) and id(t) in self._tracked

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().remove(self)
        return False

    def _record(self, out: Tensor, inputs: tuple, needs: tuple, vjp: Callable) -> None:
        self._tracked.add(id(out))
        self._nodes.append(_Node(out, inputs, needs, vjp))

    def gradient(self, output: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        grads = backward(self, output)
        return [grads.get(s, np.zeros_like(s.data)) for s in sources]


def backward(tape: GradientTape, output: Tensor) -> dict:
    """Gradients of scalar ``output`` with respect to every watched tensor.

    Nodes are visited once each, in reverse recording order (a valid reverse
    topological order for a define-by-run graph). Watched tensors that do not
    influence ``output`` get zero gradients.
    """
    if not isinstance(output, Tensor) or output.size != 1:
        raise ContractError("backward requires a scalar (single-element) output tensor")
    grads: dict[int, np.ndarray] = {}
    if tape.is_tracked(output):
        grads[id(output)] = np.ones_like(output.data)
    for node in reversed(tape._nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.vjp(g, node.needs)
        for t, need, gi in zip(node.inputs, node.needs, in_grads):
            if not need or gi is None:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    return {
        t: grads.get(id(t), np.zeros_like(t.data)).reshape(t.shape) for t in tape._watched
    }


def _make(data: np.ndarray, inputs: tuple, vjp: Callable) -> Tensor:
    out = Tensor(data)
    stack = _tape_stack()
    if not stack:
        return out
    tape = stack[-1]
    needs = tuple(tape.is_tracked(t) for t in inputs)
    if any(needs):
        tape._record(out, inputs, needs, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# elementwise -----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(g, b.shape) if needs[1] else None,
        )

    return _make(a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g, needs):
        return (
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(-g, b.shape) if needs[1] else None,
        )

    return _make(a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g, needs):
        return (
            _unbroadcast(g * b.data, a.shape) if needs[0] else None,
            _unbroadcast(g * a.data, b.shape) if needs[1] else None,
        )

    return _make(a.data * b.data, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def vjp(g, needs):
        return (
            _unbroadcast(g / b.data, a.shape) if needs[0] else None,
            _unbroadcast(-g * out / b.data, b.shape) if needs[1] else None,
        )

    return _make(out, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g, needs: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g, needs: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g, needs: (g / a.data,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = scipy.special.expit(a.data)
    return _make(out, (a,), lambda g, needs: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g, needs: (g * mask,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g, needs: (2.0 * g * a.data,))


# reductions and shape ops -----------------------------------------------------


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(g, needs):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), vjp)


def sum_per_sample(a) -> Tensor:
    """Sum over every axis except the leading batch axis."""
    a = as_tensor(a)
    return sum(a, axis=tuple(range(1, a.ndim)))


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum(a, axis=axis), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g, needs: (g.reshape(a.shape),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g, needs: (np.transpose(g, inv),))


def slice_channels(a, start: int, stop: int) -> Tensor:
    """``a[..., start:stop]`` on the trailing (channel) axis."""
    a = as_tensor(a)

    def vjp(g, needs):
        full = np.zeros(a.shape)
        full[..., start:stop] = g
        return (full,)

    return _make(a.data[..., start:stop], (a,), vjp)


def concat_channels(parts: Sequence) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    lead = parts[0].shape[:-1]
    if any(p.shape[:-1] != lead for p in parts):
        raise DimensionError("concat_channels: leading extents differ")
    bounds = np.cumsum([0] + [p.shape[-1] for p in parts])

    def vjp(g, needs):
        return tuple(g[..., bounds[i] : bounds[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.data for p in parts], axis=-1), parts, vjp)


# linear algebra ---------------------------------------------------------------


def channel_mix(x, K) -> Tensor:
    """``out[..., c] = sum_c' x[..., c'] * K[c', c]`` (1x1 / 1x1x1 convolution)."""
    x, K = as_tensor(x), as_tensor(K)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise DimensionError(f"kernel must be square, got {K.shape}")
    if x.shape[-1] != K.shape[0]:
        raise DimensionError(
            f"channel extent {x.shape[-1]} does not match kernel order {K.shape[0]}"
        )
    out = x.data @ K.data

    def vjp(g, needs):
        gx = g @ K.data.T if needs[0] else None
        gK = None
        if needs[1]:
            C = K.shape[0]
            gK = x.data.reshape(-1, C).T @ g.reshape(-1, C)
        return gx, gK

    return _make(out, (x, K), vjp)


def lu_factor(K: np.ndarray):
    """Partial-pivot LU of a square matrix; raises if any pivot is ~0."""
    K = np.asarray(K, dtype=np.float64)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {K.shape}")
    if not np.all(np.isfinite(K)):
        raise SingularMatrixError("matrix has non-finite entries")
    with warnings.catch_warnings():
        # singularity is reported below with our own tolerance
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(K, check_finite=False)
    pivots = np.abs(np.diag(lu))
    if np.any(pivots < SINGULAR_PIVOT_TOL):
        raise SingularMatrixError(f"singular matrix: smallest pivot {pivots.min():.3e}")
    return lu, piv


def log_abs_det(K) -> Tensor:
    """``log|det K|`` from an LU factorization, O(C^3)."""
    K = as_tensor(K)
    lu, piv = lu_factor(K.data)
    value = np.sum(np.log(np.abs(np.diag(lu))))

    def vjp(g, needs):
        # d log|det K| / dK = K^{-T}
        inv_t = scipy.linalg.lu_solve((lu, piv), np.eye(K.shape[0]), trans=0).T
        return (g * inv_t,)

    return _make(np.asarray(value), (K,), vjp)


# spatial convolution (coupling networks only) --------------------------------


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    nd = x.ndim - 2
    p = k // 2
    pad = [(0, 0)] + [(p, p)] * nd + [(0, 0)]
    xp = np.pad(x, pad)
    win = sliding_window_view(xp, (k,) * nd, axis=tuple(range(1, nd + 1)))
    # win: [B, *spatial, C, k, ..., k]
    return win.reshape(-1, x.shape[-1] * k**nd)


def conv(x, W, b=None) -> Tensor:
    """Same-padded, stride-1 convolution over all spatial axes.

    ``x`` is ``[B, *spatial, Cin]`` with 2 or 3 spatial axes, ``W`` is
    ``[k]*nd + [Cin, Cout]`` with odd ``k`` and ``b`` is ``[Cout]``.
    """
    x, W = as_tensor(x), as_tensor(W)
    b = as_tensor(b) if b is not None else None
    nd = x.ndim - 2
    if W.ndim != nd + 2:
        raise DimensionError(f"kernel rank {W.ndim} does not fit input rank {x.ndim}")
    k = W.shape[0]
    cin, cout = W.shape[-2], W.shape[-1]
    if x.shape[-1] != cin:
        raise DimensionError(f"input has {x.shape[-1]} channels, kernel expects {cin}")
    if k % 2 != 1 or any(s != k for s in W.shape[:nd]):
        raise DimensionError("kernel must be cubic with odd size")

    # kernel flattened in the (Cin, k, ..., k) order produced by _im2col
    wperm = (nd,) + tuple(range(nd)) + (nd + 1,)
    Wm = np.transpose(W.data, wperm).reshape(cin * k**nd, cout)
    if k == 1:
        cols = x.data.reshape(-1, cin)
    else:
        cols = _im2col(x.data, k)
    out = cols @ Wm
    if b is not None:
        out = out + b.data
    out = out.reshape(x.shape[:-1] + (cout,))

    def vjp(g, needs):
        g2 = g.reshape(-1, cout)
        gx = gW = gb = None
        if needs[1]:
            gWm = cols.T @ g2
            gW = np.transpose(
                gWm.reshape((cin,) + (k,) * nd + (cout,)), np.argsort(wperm)
            )
        if len(needs) > 2 and needs[2]:
            gb = g2.sum(axis=0)
        if needs[0]:
            gcols = g2 @ Wm.T
            if k == 1:
                gx = gcols.reshape(x.shape)
            else:
                spatial = x.shape[1:-1]
                gcols = gcols.reshape(x.shape + (k,) * nd)
                p = k // 2
                gxp = np.zeros((x.shape[0],) + tuple(s + 2 * p for s in spatial) + (cin,))
                for offs in itertools.product(range(k), repeat=nd):
                    region = (slice(None),) + tuple(
                        slice(o, o + s) for o, s in zip(offs, spatial)
                    )
                    gxp[region] += gcols[(Ellipsis,) + offs]
                crop = (slice(None),) + tuple(slice(p, p + s) for s in spatial)
                gx = gxp[crop]
        return gx, gW, gb

    inputs = (x, W) if b is None else (x, W, b)
    return _make(out, inputs, vjp)


def numerical_gradient(f: Callable[[], float], params: Iterable[Tensor], eps: float = 1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. each parameter entry.

    Parameters are perturbed in place and restored; intended for tests and
    gradient checks on small models only.
    """
    out = []
    for p in params:
        p.data = np.ascontiguousarray(p.data)
        g = np.zeros(p.shape)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f()
            flat[i] = orig - eps
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * eps)
        out.append(g)
    return out
