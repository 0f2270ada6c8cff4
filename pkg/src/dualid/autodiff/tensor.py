"""Reverse-mode automatic differentiation over numpy arrays.

The operation set is deliberately closed: every differentiable op lives in
this module and has a matching finite-difference test in
``tests/test_autodiff_ops.py``.  Layout conventions used by the rest of the
package:

* images and feature maps are channels-last, ``(N, H, W, C)``;
* token sequences are ``(N, L, D)``;
* "last axis" ops (softmax, layer norm, log-softmax) act on ``D``/``C``.

Elementwise binary ops follow numpy broadcasting; the backward pass sums the
incoming gradient back to each operand's shape.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (thread-local)."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


def _shape_error(op: str, *shapes) -> ShapeError:
    joined = " and ".join(str(tuple(s)) for s in shapes)
    return ShapeError(f"{op}: incompatible shapes {joined}")


class Tensor:
    """Dense array node in the autodiff graph.

    Parameters
    ----------
    data : array_like
        Values. Floating data keeps its precision; anything else is cast to
        ``dtype`` (float32 by default).
    requires_grad : bool
        Whether gradients should be accumulated into ``grad``.
    """

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = ""

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators --------------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

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

    def swap_last(self):
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return transpose(self, tuple(axes))

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    # -- backward ---------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``grad`` of every reachable node.

        Repeated calls add to existing gradients.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward: loss must be a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype)
            if grad.shape != self.shape:
                raise _shape_error("backward", grad.shape, self.shape)

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            node.grad = g if node.grad is None else node.grad + g
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg


# -- helpers ----------------------------------------------------------------

def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise _shape_error(op, a.shape, b.shape) from None


# -- elementwise --------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _broadcast_shape("subtract", a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return scale(a, float(b))
    if not isinstance(a, Tensor) and np.ndim(a) == 0:
        return scale(b, float(a))
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("multiply", a, b)

    def backward(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), backward, "mul")


def scale(a: Tensor, k: float) -> Tensor:
    """Multiply by a python scalar."""
    a = as_tensor(a)
    k = float(k)

    def backward(g):
        return (g * k,)

    return _make(a.data * a.dtype.type(k), (a,), backward, "scale")


def div(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _broadcast_shape("divide", a, b)
    out = a.data / b.data

    def backward(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "div")


def silu(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # exp overflow -> inf -> sig 0, the correct limit
        sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig

    def backward(g):
        return (g * (sig * (1.0 + x.data * (1.0 - sig))),)

    return _make(out, (x,), backward, "silu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    d = x.data
    inner = _GELU_C * (d + 0.044715 * d**3)
    th = np.tanh(inner)
    out = 0.5 * d * (1.0 + th)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * d**2)
        return (g * (0.5 * (1.0 + th) + 0.5 * d * (1.0 - th**2) * dinner),)

    return _make(out.astype(d.dtype, copy=False), (x,), backward, "gelu")


# -- shape ops ----------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise _shape_error("reshape", a.shape, shape) from None

    def backward(g):
        return (g.reshape(a.shape),)

    return _make(out, (a,), backward, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    if sorted(axes) != list(range(a.ndim)):
        raise _shape_error("transpose", a.shape, axes)
    inv = np.argsort(axes)

    def backward(g):
        return (g.transpose(inv),)

    return _make(a.data.transpose(axes), (a,), backward, "transpose")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, tensors[0].shape)) if i != ax
        ):
            raise _shape_error("concatenate", tensors[0].shape, t.shape)
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))
        )

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    basic = all(isinstance(i, (slice, int, type(None), type(Ellipsis)))
                for i in (idx if isinstance(idx, tuple) else (idx,)))

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out, copy=True), (a,), backward, "slice")


# -- reductions ---------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _expand(g: np.ndarray, shape, axes, keepdims):
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)

    def backward(g):
        return (np.array(_expand(g, a.shape, axes, keepdims)),)

    return _make(np.asarray(a.data.sum(axis=axes, keepdims=keepdims)), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1

    def backward(g):
        return (np.array(_expand(g, a.shape, axes, keepdims)) / n,)

    return _make(np.asarray(a.data.mean(axis=axes, keepdims=keepdims)), (a,), backward, "mean")


def l2_norm(a: Tensor, axis=None, keepdims=False) -> Tensor:
    """Euclidean (Frobenius) norm over ``axis``; gradient is 0 where the norm is 0."""
    axes = _norm_axis(axis, a.ndim)
    out = np.sqrt((a.data * a.data).sum(axis=axes, keepdims=True))

    def backward(g):
        g = g if keepdims else np.expand_dims(g, axes)
        safe = np.where(out > 0, out, 1.0)
        return (g * np.where(out > 0, a.data / safe, 0.0),)

    res = out if keepdims else np.squeeze(out, axis=axes)
    return _make(np.asarray(res), (a,), backward, "l2_norm")


def mse(pred: Tensor, target) -> Tensor:
    """Mean of squared differences over every element."""
    target = as_tensor(target, pred)
    if pred.shape != target.shape:
        raise _shape_error("mse", pred.shape, target.shape)
    diff = pred.data - target.data
    n = diff.size

    def backward(g):
        gd = g * (2.0 / n) * diff
        return gd, -gd

    return _make(np.asarray((diff * diff).mean()), (pred, target), backward, "mse")


# -- linear algebra -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise _shape_error("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise _shape_error("matmul", a.shape, b.shape) from None

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if a.ndim > 2 and b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight (+ bias)`` with weight stored ``(in, out)``."""
    if x.shape[-1] != weight.shape[0]:
        raise _shape_error("linear", x.shape, weight.shape)
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    if bias is not None:
        out = out + bias.data
    out = out.reshape(lead + (weight.shape[1],))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if bias.requires_grad else None)

    return _make(out, parents, backward, "linear")


# -- normalisation / probabilities ------------------------------------------

def _row_mean(x: np.ndarray) -> np.ndarray:
    """Mean over the last axis via a matmul (much faster than a reduce for short rows)."""
    d = x.shape[-1]
    return (x.reshape(-1, d) @ np.full((d, 1), 1.0 / d, dtype=x.dtype)).reshape(x.shape[:-1] + (1,))


def _row_sum(x: np.ndarray) -> np.ndarray:
    d = x.shape[-1]
    return (x.reshape(-1, d) @ np.ones((d, 1), dtype=x.dtype)).reshape(x.shape[:-1] + (1,))


def _row_max(x: np.ndarray) -> np.ndarray:
    d = x.shape[-1]
    m = x.reshape(-1, d)
    while m.shape[1] > 1:
        half = m.shape[1] // 2
        top = np.maximum(m[:, :half], m[:, half:2 * half])
        m = np.concatenate([top, m[:, 2 * half:]], axis=1) if m.shape[1] % 2 else top
    return m.reshape(x.shape[:-1] + (1,))


def softmax(a: Tensor) -> Tensor:
    e = np.exp(a.data - _row_max(a.data))
    out = e / _row_sum(e)

    def backward(g):
        return (out * (g - _row_sum(g * out)),)

    return _make(out, (a,), backward, "softmax")


def log_softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _make(out, (a,), backward, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply per-channel gain and bias."""
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise _shape_error("layer_norm", x.shape, gain.shape)
    xc = x.data - _row_mean(x.data)
    inv = 1.0 / np.sqrt(_row_mean(xc * xc) + x.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    d = x.shape[-1]

    def backward(g):
        gx = gg = gb = None
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - _row_mean(gh) - xhat * _row_mean(gh * xhat))
        return gx, gg, gb

    return _make(out, (x, gain, bias), backward, "layer_norm")


# -- lookup / spatial ---------------------------------------------------------

def embedding(weight: Tensor, ids) -> Tensor:
    """Row lookup ``weight[ids]``."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError(f"embedding: ids out of range for table of shape {weight.shape}")

    def backward(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (full,)

    return _make(weight.data[ids], (weight,), backward, "embedding")


def _conv3x3_flat(x: Tensor, weight: Tensor, bias, parents) -> Tensor:
    # Stride-1 conv on the zero-padded image flattened to rows: every tap is
    # then a contiguous row offset, so no patch copies are needed.  Outputs
    # are computed on the padded grid and the border rows dropped.
    n, h, w, cin = x.shape
    cout = weight.shape[3]
    w2 = w + 2
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0))).reshape(-1, cin)
    rows = xp.shape[0]
    m = rows - (2 * w2 + 2)
    offsets = [dy * w2 + dx for dy in range(3) for dx in range(3)]
    wk = weight.data.reshape(9, cin, cout)
    full = np.zeros((rows, cout), dtype=x.dtype)
    acc = full[:m]
    np.matmul(xp[:m], wk[0], out=acc)
    for k in range(1, 9):
        acc += xp[offsets[k]:offsets[k] + m] @ wk[k]
    out = full.reshape(n, h + 2, w2, cout)[:, :h, :w]
    if bias is not None:
        out = out + bias.data
    else:
        out = np.ascontiguousarray(out)

    def backward(g):
        gfull = np.zeros((n, h + 2, w2, cout), dtype=g.dtype)
        gfull[:, :h, :w] = g
        gm = gfull.reshape(-1, cout)[:m]
        gx = gw = None
        if weight.requires_grad:
            gw = np.empty_like(wk)
            for k in range(9):
                gw[k] = xp[offsets[k]:offsets[k] + m].T @ gm
            gw = gw.reshape(weight.shape)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for k in range(9):
                gxp[offsets[k]:offsets[k] + m] += gm @ wk[k].T
            gx = gxp.reshape(n, h + 2, w2, cin)[:, 1:-1, 1:-1, :]
        if bias is None:
            return gx, gw
        return gx, gw, (g.reshape(-1, cout).sum(axis=0) if bias.requires_grad else None)

    return _make(out, parents, backward, "conv3x3")


def conv3x3(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """3x3 convolution, zero padding 1, channels-last.

    ``x`` is ``(N, H, W, Cin)``, ``weight`` is ``(3, 3, Cin, Cout)``.  With
    ``stride=2`` the spatial size is halved (H, W must be even).
    """
    if x.ndim != 4 or weight.shape[:3] != (3, 3, x.shape[3]):
        raise _shape_error("conv3x3", x.shape, weight.shape)
    if stride not in (1, 2):
        raise ValueError("conv3x3: stride must be 1 or 2")
    n, h, w, cin = x.shape
    if stride == 2 and (h % 2 or w % 2):
        raise _shape_error("conv3x3(stride=2)", x.shape, weight.shape)
    cout = weight.shape[3]
    parents = (x, weight) if bias is None else (x, weight, bias)
    if stride == 1:
        return _conv3x3_flat(x, weight, bias, parents)
    ho, wo = h // 2, w // 2
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))

    def patch(k):
        dy, dx = divmod(k, 3)
        return np.ascontiguousarray(xp[:, dy:dy + 2 * ho:2, dx:dx + 2 * wo:2, :]).reshape(-1, cin)

    out = np.zeros((n * ho * wo, cout), dtype=x.dtype)
    for k in range(9):
        out += patch(k) @ weight.data[k // 3, k % 3]
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, cout)

    def backward(g):
        g2 = g.reshape(-1, cout)
        gx = gw = None
        if weight.requires_grad:
            gw = np.empty_like(weight.data)
            for k in range(9):
                gw[k // 3, k % 3] = patch(k).T @ g2
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for k in range(9):
                dy, dx = divmod(k, 3)
                gxp[:, dy:dy + 2 * ho:2, dx:dx + 2 * wo:2, :] += (g2 @ weight.data[dy, dx].T).reshape(n, ho, wo, cin)
            gx = gxp[:, 1:-1, 1:-1, :]
        if bias is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if bias.requires_grad else None)

    return _make(out, parents, backward, "conv3x3")


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour x2 upsampling of ``(N, H, W, C)``."""
    if x.ndim != 4:
        raise _shape_error("upsample2x", x.shape)
    n, h, w, c = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def backward(g):
        return (g.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4)),)

    return _make(out, (x,), backward, "upsample2x")


# -- composites (built from the ops above; no backward of their own) ---------

def cross_entropy(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    lp = log_softmax(logits)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(labels)), labels] = 1.0
    return scale(sum_(mul(lp, Tensor(onehot))), -1.0 / len(labels))


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int = 1) -> Tensor:
    """Scaled dot-product attention.

    ``q`` is ``(N, Lq, D)``, ``k``/``v`` are ``(N, Lk, D)``; returns
    ``(N, Lq, D)``.  Heads split ``D`` evenly.
    """
    n, lq, d = q.shape
    lk = k.shape[1]
    if k.shape != (n, lk, d) or v.shape != (n, lk, d):
        raise _shape_error("attention", q.shape, k.shape, v.shape)
    dh = d // heads
    if heads == 1:
        scores = scale(matmul(q, k.swap_last()), 1.0 / np.sqrt(dh))
        return matmul(softmax(scores), v)
    qh = transpose(reshape(q, (n, lq, heads, dh)), (0, 2, 1, 3))
    kh = transpose(reshape(k, (n, lk, heads, dh)), (0, 2, 3, 1))
    vh = transpose(reshape(v, (n, lk, heads, dh)), (0, 2, 1, 3))
    probs = softmax(scale(matmul(qh, kh), 1.0 / np.sqrt(dh)))
    out = transpose(matmul(probs, vh), (0, 2, 1, 3))
    return reshape(out, (n, lq, d))
