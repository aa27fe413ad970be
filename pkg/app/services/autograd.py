"""Dense tensors with define-by-run reverse-mode differentiation.

Every op below computes its value with numpy and, when any input
requires a gradient (and recording is enabled), attaches a closure that
maps the output gradient to one gradient per input. ``backward`` walks
the recorded graph in reverse topological order and sums the gradients
flowing into each tensor, so a tensor used k times receives the sum of
its k branch gradients.

Broadcasting is deliberately narrow: ``add`` accepts a 1-D bias over the
last axis, ``linear`` applies a 2-D weight to any leading shape, and
``softmax`` accepts a constant boolean mask broadcastable to its input.
All other ops require exactly matching shapes.
"""

import logging
import threading
from contextlib import contextmanager
from typing import Callable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from app.errors import NotScalar, ShapeMismatch

logger = logging.getLogger(__name__)

LAYERNORM_EPS = 1e-8

_DTYPES = {"f32": np.float32, "f64": np.float64}
_precision = "f64"
_local = threading.local()


# ---------------------------------------------------------------------------
# Precision and recording switches
# ---------------------------------------------------------------------------

def set_precision(tag: str) -> None:
    """Switch the global tensor precision ("f32" or "f64")."""
    global _precision
    if tag not in _DTYPES:
        raise ValueError(f"unknown precision '{tag}', expected one of {sorted(_DTYPES)}")
    _precision = tag


def get_precision() -> str:
    return _precision


def default_dtype():
    return _DTYPES[_precision]


@contextmanager
def precision(tag: str) -> Iterator[None]:
    """Temporarily switch precision."""
    previous = get_precision()
    set_precision(tag)
    try:
        yield
    finally:
        set_precision(previous)


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording in the current thread."""
    previous = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """A dense array with an optional gradient and graph linkage."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        *,
        _parents: Tuple["Tensor", ...] = (),
        _backward: Optional[BackwardFn] = None,
        op: str = "leaf",
    ):
        self.data = np.asarray(data, dtype=default_dtype())
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.op = op
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # Operator sugar for the common ops
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Tuple[Tensor, ...], backward_fn: BackwardFn, op: str) -> Tensor:
    """Wrap an op's value, recording it on the graph when needed."""
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn, op=op)
    return Tensor(data, op=op)


# ---------------------------------------------------------------------------
# Elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    """a + b, where b has a's shape or is a bias over a's last axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        n = b.shape[0]
        return _result(a.data + b.data, (a, b), lambda g: (g, g.reshape(-1, n).sum(axis=0)), "add")
    raise ShapeMismatch("add", a.shape, b.shape)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch("sub", a.shape, b.shape)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch("mul", a.shape, b.shape)
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch("reshape", a.shape, tuple(shape)) from None
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeMismatch("transpose", a.shape, axes)
    inverse = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeMismatch("concat")
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax
        ):
            raise ShapeMismatch("concat", *(t.shape for t in tensors))
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def _backward(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tensors, _backward, "concat")


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """a[..., start:stop, ...] along ``axis``."""
    a = as_tensor(a)
    ax = axis % a.ndim
    if not 0 <= start < stop <= a.shape[ax]:
        raise ShapeMismatch("slice", a.shape, (axis, start, stop))
    index = [slice(None)] * a.ndim
    index[ax] = slice(start, stop)
    index = tuple(index)

    def _backward(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return _result(a.data[index], (a,), _backward, "slice")


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., m, k) @ (..., k, n) with identical leading dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch("matmul", a.shape, b.shape)

    def _backward(g):
        return (g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g)

    return _result(a.data @ b.data, (a, b), _backward, "matmul")


def linear(x: Tensor, W: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """x @ W (+ b) with x (..., in), W (in, out), b (out,)."""
    x, W = as_tensor(x), as_tensor(W)
    if W.ndim != 2 or x.shape[-1] != W.shape[0] or (b is not None and b.shape != (W.shape[1],)):
        raise ShapeMismatch("linear", x.shape, W.shape, () if b is None else b.shape)
    out = x.data @ W.data
    if b is not None:
        out = out + b.data
    n_in, n_out = W.shape

    def _backward(g):
        g2 = g.reshape(-1, n_out)
        x2 = x.data.reshape(-1, n_in)
        grads = [g @ W.data.T, x2.T @ g2]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    parents = (x, W) if b is None else (x, W, b)
    return _result(out, parents, _backward, "linear")


def conv2d(x: Tensor, W: Tensor, b: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, x (B, C, H, W), W (O, C, k, k), via im2col."""
    x, W = as_tensor(x), as_tensor(W)
    if x.ndim != 4 or W.ndim != 4 or x.shape[1] != W.shape[1] or W.shape[2] != W.shape[3]:
        raise ShapeMismatch("conv2d", x.shape, W.shape)
    B, C, H, Wd = x.shape
    O, _, k, _ = W.shape
    Hp, Wp = H + 2 * padding, Wd + 2 * padding
    if Hp < k or Wp < k:
        raise ShapeMismatch("conv2d", x.shape, W.shape)
    Ho = (Hp - k) // stride + 1
    Wo = (Wp - k) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # windows: (B, C, Ho, Wo, k, k)
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * k * k)
    Wmat = W.data.reshape(O, C * k * k)
    out = cols @ Wmat.T
    if b is not None:
        out = out + b.data
    out = out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)

    def _backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        gW = (g2.T @ cols).reshape(W.shape)
        gcols = (g2 @ Wmat).reshape(B, Ho, Wo, C, k, k)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += (
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        gx = gxp[:, :, padding:padding + H, padding:padding + Wd]
        grads = [gx, gW]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    parents = (x, W) if b is None else (x, W, b)
    return _result(out, parents, _backward, "conv2d")


# ---------------------------------------------------------------------------
# Nonlinearities and normalization
# ---------------------------------------------------------------------------

def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x·Φ(x)."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x.data * x.data) / np.sqrt(2.0 * np.pi)
    return _result(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),), "gelu")


def softmax(x: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax along ``axis``; ``mask`` (True = keep) zeroes excluded entries.

    Every row must keep at least one entry.
    """
    x = as_tensor(x)
    logits = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        try:
            logits = np.where(mask, logits, -np.inf)
        except ValueError:
            raise ShapeMismatch("softmax", x.shape, mask.shape) from None
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def _backward(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _result(y, (x,), _backward, "softmax")


def layernorm(
    x: Tensor,
    gamma: Optional[Tensor] = None,
    beta: Optional[Tensor] = None,
    axis: int = -1,
    eps: float = LAYERNORM_EPS,
) -> Tensor:
    """Normalize along ``axis`` to zero mean / unit variance, then affine.

    The affine parameters act on the last axis, so they require
    ``axis`` to be the last axis.
    """
    x = as_tensor(x)
    ax = axis % x.ndim
    affine = gamma is not None or beta is not None
    if affine and ax != x.ndim - 1:
        raise ShapeMismatch("layernorm", x.shape, (axis,))
    for p in (gamma, beta):
        if p is not None and p.shape != (x.shape[-1],):
            raise ShapeMismatch("layernorm", x.shape, p.shape)

    n = x.shape[ax]
    mu = x.data.mean(axis=ax, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=ax, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data

    lead = tuple(range(x.ndim - 1))

    def _backward(g):
        gxhat = g * gamma.data if gamma is not None else g
        gx = (inv / n) * (
            n * gxhat
            - gxhat.sum(axis=ax, keepdims=True)
            - xhat * (gxhat * xhat).sum(axis=ax, keepdims=True)
        )
        grads = [gx]
        if gamma is not None:
            grads.append((g * xhat).sum(axis=lead))
        if beta is not None:
            grads.append(g.sum(axis=lead))
        return tuple(grads)

    parents = (x,) + tuple(p for p in (gamma, beta) if p is not None)
    return _result(out, parents, _backward, "layernorm")


# ---------------------------------------------------------------------------
# Reductions and losses
# ---------------------------------------------------------------------------

def _expand(g: np.ndarray, shape: Tuple[int, ...], axis) -> np.ndarray:
    if axis is None:
        return np.array(np.broadcast_to(g, shape))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    return np.array(np.broadcast_to(np.expand_dims(g, axes), shape))


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    return _result(x.data.sum(axis=axis), (x,), lambda g: (_expand(g, x.shape, axis),), "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    x = as_tensor(x)
    out = x.data.mean(axis=axis)
    count = x.size // max(out.size, 1)
    return _result(out, (x,), lambda g: (_expand(g, x.shape, axis) / count,), "mean")


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean of squared differences over all elements."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch("mse", a.shape, b.shape)
    diff = a.data - b.data
    n = diff.size

    def _backward(g):
        ga = g * (2.0 / n) * diff
        return (ga, -ga)

    return _result(np.mean(diff * diff), (a, b), _backward, "mse")


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def _topological_order(root: Tensor) -> List[Tensor]:
    """Post-order DFS over nodes that require grad; parents come first."""
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable leaf."""
    if loss.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    pending = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    tol: float = 1e-4,
) -> float:
    """Max relative error between backward grads and central differences.

    The denominator per coordinate is max(|analytic|, |numeric|, 1e-8).
    ``x`` must require grad; its ``.grad`` is reset by the check.
    """
    x.data = np.ascontiguousarray(x.data)
    x.grad = None
    loss = f(x)
    backward(loss)
    analytic = np.zeros_like(x.data) if x.grad is None else np.array(x.grad, dtype=np.float64)
    x.grad = None

    numeric = np.zeros(x.shape, dtype=np.float64)
    flat = x.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            plus = f(x).item()
            flat[i] = original - eps
            minus = f(x).item()
            flat[i] = original
            numeric.reshape(-1)[i] = (plus - minus) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    error = float(np.max(np.abs(analytic - numeric) / denom)) if x.size else 0.0
    if error > tol:
        logger.warning(f"grad_check: max relative error {error:.3e} exceeds tolerance {tol:.1e}")
    return error
