"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every network, loss and projection in the package is expressed with the
operations below. A node is recorded only when one of its inputs requires a
gradient, so evaluation of frozen networks under :func:`no_grad` costs no
more than plain numpy.

Broadcasting is deliberately narrow: a binary elementwise op accepts two
tensors of identical shape, a scalar with a tensor, or a tensor with a
trailing-axis vector (the bias case). Anything else raises
:class:`ShapeError`.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "GraphError",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "relu",
    "tanh",
    "exp",
    "log",
    "sum",
    "mean",
    "softmax",
    "log_softmax",
    "maximum",
    "minimum",
    "clamp",
    "reshape",
    "conv2d",
    "conv_transpose2d",
    "max_pool2d",
    "instance_norm",
    "pad2d",
    "forward_op",
    "backward",
    "finite_difference_grad",
]

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NonFiniteError(FloatingPointError):
    """An operation received NaN or Inf."""


class GraphError(RuntimeError):
    """Backward was requested on something that is not a recorded scalar root."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """An n-dimensional float64 array with an optional gradient slot.

    ``data`` is a C-contiguous ``np.ndarray``; ``grad`` is ``None`` until a
    backward pass reaches the tensor. Nodes produced by operations keep a
    reference to their parents and a closure that maps the output gradient
    to input gradients; both are dropped once backward has run.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = _contiguous(data)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        out.op = "leaf"
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op})"

    def __len__(self) -> int:
        return self.data.shape[0]

    __add__ = lambda self, other: add(self, other)  # noqa: E731
    __radd__ = lambda self, other: add(other, self)  # noqa: E731
    __sub__ = lambda self, other: sub(self, other)  # noqa: E731
    __rsub__ = lambda self, other: sub(other, self)  # noqa: E731
    __mul__ = lambda self, other: mul(self, other)  # noqa: E731
    __rmul__ = lambda self, other: mul(other, self)  # noqa: E731
    __neg__ = lambda self: neg(self)  # noqa: E731
    __matmul__ = lambda self, other: matmul(self, other)  # noqa: E731

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _contiguous(data) -> np.ndarray:
    # np.ascontiguousarray would promote 0-d arrays to 1-d
    arr = np.asarray(data, dtype=DTYPE)
    return arr if arr.flags.c_contiguous else arr.copy()


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _check_finite(*arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.isfinite(a).all():
            raise NonFiniteError("operation received NaN or Inf input")


def _make(data: np.ndarray, parents: Iterable[Tensor], back, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = _contiguous(data)
    out.grad = None
    out._parents = ()
    out._backward = None
    out.op = op
    parents = tuple(parents)
    needs = is_grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = parents
        out._backward = back
    return out


# --------------------------------------------------------------------------
# elementwise arithmetic


def _broadcast_kind(a: np.ndarray, b: np.ndarray) -> str:
    if a.shape == b.shape:
        return "same"
    if b.ndim == 0 or b.size == 1 and b.ndim <= 1:
        return "b_scalar"
    if a.ndim == 0 or a.size == 1 and a.ndim <= 1:
        return "a_scalar"
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return "b_trailing"
    if a.ndim == 1 and b.ndim >= 1 and b.shape[-1] == a.shape[0]:
        return "a_trailing"
    raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if len(shape) == 0 or int(np.prod(shape)) == 1:
        return np.asarray(grad.sum()).reshape(shape)
    return grad.reshape(-1, shape[-1]).sum(axis=0).reshape(shape)


def _binary(a, b, fwd, grad_a, grad_b, op: str) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_kind(a.data, b.data)
    _check_finite(a.data, b.data)
    ad, bd = a.data, b.data
    out = fwd(ad, bd)

    def back(g):
        ga = _reduce_to(grad_a(g, ad, bd), ad.shape) if a.requires_grad else None
        gb = _reduce_to(grad_b(g, ad, bd), bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), back, op)


def add(a, b) -> Tensor:
    return _binary(a, b, np.add, lambda g, x, y: g, lambda g, x, y: g, "add")


def sub(a, b) -> Tensor:
    return _binary(a, b, np.subtract, lambda g, x, y: g, lambda g, x, y: -g, "sub")


def mul(a, b) -> Tensor:
    return _binary(a, b, np.multiply, lambda g, x, y: g * y, lambda g, x, y: g * x, "mul")


def neg(a) -> Tensor:
    a = _wrap(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def maximum(a, b) -> Tensor:
    """Elementwise max; on ties the gradient goes to ``a``."""
    return _binary(
        a, b, np.maximum,
        lambda g, x, y: g * (x >= y),
        lambda g, x, y: g * (x < y),
        "maximum",
    )


def minimum(a, b) -> Tensor:
    """Elementwise min; on ties the gradient goes to ``a``."""
    return _binary(
        a, b, np.minimum,
        lambda g, x, y: g * (x <= y),
        lambda g, x, y: g * (x > y),
        "minimum",
    )


def clamp(x, lo=None, hi=None) -> Tensor:
    """Clip into ``[lo, hi]``. Gradient passes where the bound is inactive."""
    out = _wrap(x)
    if lo is not None:
        out = maximum(out, lo)
    if hi is not None:
        out = minimum(out, hi)
    return out


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul needs (n,k)@(k,m), got {a.shape} and {b.shape}")
    _check_finite(a.data, b.data)
    ad, bd = a.data, b.data

    def back(g):
        return (g @ bd.T if a.requires_grad else None, ad.T @ g if b.requires_grad else None)

    return _make(ad @ bd, (a, b), back, "matmul")


# --------------------------------------------------------------------------
# unary


def relu(x) -> Tensor:
    x = _wrap(x)
    _check_finite(x.data)
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def tanh(x) -> Tensor:
    x = _wrap(x)
    _check_finite(x.data)
    t = np.tanh(x.data)
    return _make(t, (x,), lambda g: (g * (1.0 - t * t),), "tanh")


def exp(x) -> Tensor:
    x = _wrap(x)
    _check_finite(x.data)
    e = np.exp(x.data)
    if not np.isfinite(e).all():
        raise NonFiniteError("exp overflowed")
    return _make(e, (x,), lambda g: (g * e,), "exp")


def log(x) -> Tensor:
    x = _wrap(x)
    _check_finite(x.data)
    if (x.data <= 0).any():
        raise NonFiniteError("log of a nonpositive value")
    d = x.data
    return _make(np.log(d), (x,), lambda g: (g / d,), "log")


def reshape(x, shape) -> Tensor:
    x = _wrap(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {old} to {tuple(shape)}") from exc
    return _make(out, (x,), lambda g: (g.reshape(old),), "reshape")


# --------------------------------------------------------------------------
# reductions


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = _wrap(x)
    _check_finite(x.data)
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(x.data, axis=axes, keepdims=keepdims), (x,), back, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _wrap(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum(x, axis=axes, keepdims=keepdims), 1.0 / count)


def softmax(x) -> Tensor:
    """Softmax over the last axis, computed with the max shift."""
    x = _wrap(x)
    _check_finite(x.data)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (x,), back, "softmax")


def log_softmax(x) -> Tensor:
    x = _wrap(x)
    _check_finite(x.data)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def back(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), back, "log_softmax")


# --------------------------------------------------------------------------
# convolution family; layout is NCHW throughout


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _conv_out(size: int, k: int, s: int, p: int) -> int:
    return (size + 2 * p - k) // s + 1


def _im2col(xt: np.ndarray, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    """Gather (C, N, Hp, Wp) into columns of shape (C, kh, kw, N, ho, wo)."""
    c, n = xt.shape[:2]
    cols = np.empty((c, kh, kw, n, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw]
    return cols


def _col2im(cols: np.ndarray, out: np.ndarray, sh: int, sw: int) -> np.ndarray:
    """Scatter-add columns (C, kh, kw, N, ho, wo) into ``out`` (C, N, Hp, Wp)."""
    _, kh, kw, _, ho, wo = cols.shape
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw] += cols[:, i, j]
    return out


def conv2d(x, w, b=None, stride=1, padding=0) -> Tensor:
    """Cross-correlation of ``x`` (N,C,H,W) with ``w`` (O,C,kh,kw), zero padding."""
    x, w = _wrap(x), _wrap(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d input {x.shape} incompatible with kernel {w.shape}")
    if b is not None:
        b = _wrap(b)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"conv2d bias {b.shape} does not match kernel {w.shape}")
    _check_finite(x.data, w.data)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho, wo = _conv_out(h, kh, sh, ph), _conv_out(wd, kw, sw, pw)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d kernel {w.shape} larger than padded input {x.shape}")
    xt = x.data.transpose(1, 0, 2, 3)
    if ph or pw:
        xt = np.pad(xt, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = _im2col(xt, kh, kw, sh, sw, ho, wo).reshape(c * kh * kw, n * ho * wo)
    wmat = w.data.reshape(o, -1)
    out = (wmat @ cols).reshape(o, n, ho, wo)
    if b is not None:
        out += b.data[:, None, None, None]
    out = out.transpose(1, 0, 2, 3)
    padded_shape = xt.shape

    def back(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, -1)
        gw = (g2 @ cols.T).reshape(w.shape) if w.requires_grad else None
        gb = g2.sum(axis=1) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (wmat.T @ g2).reshape(c, kh, kw, n, ho, wo)
            gxt = _col2im(dcols, np.zeros(padded_shape), sh, sw)
            gx = gxt[:, :, ph:ph + h, pw:pw + wd].transpose(1, 0, 2, 3)
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _make(out, parents, back, "conv2d")


def conv_transpose2d(x, w, b=None, stride=1, padding=0, output_padding=0) -> Tensor:
    """Transposed convolution; ``w`` has shape (C_in, C_out, kh, kw).

    Output size per spatial axis is ``(in - 1) * stride - 2 * padding + k + output_padding``.
    """
    x, w = _wrap(x), _wrap(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"conv_transpose2d input {x.shape} incompatible with kernel {w.shape}")
    if b is not None:
        b = _wrap(b)
        if b.shape != (w.shape[1],):
            raise ShapeError(f"conv_transpose2d bias {b.shape} does not match kernel {w.shape}")
    _check_finite(x.data, w.data)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    oph, opw = _pair(output_padding)
    n, ci, h, wd = x.shape
    _, co, kh, kw = w.shape
    fh, fw = (h - 1) * sh + kh + oph, (wd - 1) * sw + kw + opw
    ho, wo = fh - 2 * ph, fw - 2 * pw
    if ho < 1 or wo < 1:
        raise ShapeError("conv_transpose2d output would be empty")
    xmat = np.ascontiguousarray(x.data.transpose(1, 0, 2, 3)).reshape(ci, -1)
    wmat = w.data.reshape(ci, -1)
    cols = (wmat.T @ xmat).reshape(co, kh, kw, n, h, wd)
    full = _col2im(cols, np.zeros((co, n, fh, fw)), sh, sw)
    out = full[:, :, ph:ph + ho, pw:pw + wo]
    if b is not None:
        out = out + b.data[:, None, None, None]
    out = out.transpose(1, 0, 2, 3)

    def back(g):
        gfull = np.zeros((co, n, fh, fw))
        gfull[:, :, ph:ph + ho, pw:pw + wo] = g.transpose(1, 0, 2, 3)
        gcols = _im2col(gfull, kh, kw, sh, sw, h, wd).reshape(co * kh * kw, -1)
        gx = (wmat @ gcols).reshape(ci, n, h, wd).transpose(1, 0, 2, 3) if x.requires_grad else None
        gw = (xmat @ gcols.T).reshape(w.shape) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if b is not None and b.requires_grad else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _make(out, parents, back, "conv_transpose2d")


def max_pool2d(x, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties resolve to the first element in the window."""
    x = _wrap(x)
    _check_finite(x.data)
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ShapeError(f"max_pool2d size {size} does not divide spatial shape {x.shape}")
    ho, wo = h // size, w // size
    blocks = x.data.reshape(n, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, size * size)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def back(g):
        gb = np.zeros((n, c, ho, wo, size * size))
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return _make(out, (x,), back, "max_pool2d")


def instance_norm(x, weight=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel normalization over the spatial axes of NCHW input."""
    x = _wrap(x)
    if x.ndim != 4:
        raise ShapeError(f"instance_norm expects NCHW input, got {x.shape}")
    _check_finite(x.data)
    c = x.shape[1]
    for p in (weight, bias):
        if p is not None and _wrap(p).shape != (c,):
            raise ShapeError(f"instance_norm affine parameter must have shape ({c},)")
    weight = _wrap(weight) if weight is not None else None
    bias = _wrap(bias) if bias is not None else None
    m = x.shape[2] * x.shape[3]
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gamma = weight.data[None, :, None, None] if weight is not None else 1.0
    out = xhat * gamma
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def back(g):
        gw = (g * xhat).sum(axis=(0, 2, 3)) if weight is not None and weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gamma
            gx = inv / m * (m * gh - gh.sum(axis=(2, 3), keepdims=True)
                            - xhat * (gh * xhat).sum(axis=(2, 3), keepdims=True))
        grads = [gx]
        if weight is not None:
            grads.append(gw)
        if bias is not None:
            grads.append(gb)
        return tuple(grads)

    parents = tuple(p for p in (x, weight, bias) if p is not None)
    return _make(out, parents, back, "instance_norm")


def pad2d(x, pad: int, mode: str = "zero") -> Tensor:
    """Pad both spatial axes of NCHW input by ``pad`` with zeros or by reflection."""
    x = _wrap(x)
    if x.ndim != 4:
        raise ShapeError(f"pad2d expects NCHW input, got {x.shape}")
    if pad == 0:
        return x
    h, w = x.shape[2:]
    if mode == "reflect":
        if pad >= h or pad >= w:
            raise ShapeError(f"reflect pad {pad} too large for spatial shape {(h, w)}")
        # index map: padded position -> source position
        rows = np.pad(np.arange(h), pad, mode="reflect")
        cols = np.pad(np.arange(w), pad, mode="reflect")
        out = x.data[:, :, rows][:, :, :, cols]

        def back(g):
            gx = np.zeros(x.shape)
            tmp = np.zeros(x.shape[:2] + (h, g.shape[3]))
            np.add.at(tmp, (slice(None), slice(None), rows), g)
            np.add.at(gx, (slice(None), slice(None), slice(None), cols), tmp)
            return (gx,)
    elif mode == "zero":
        out = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))

        def back(g):
            return (g[:, :, pad:pad + h, pad:pad + w],)
    else:
        raise ValueError(f"unknown pad mode {mode!r}")
    return _make(out, (x,), back, f"pad2d_{mode}")


# --------------------------------------------------------------------------
# dispatch by name

_OPS: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "neg": neg,
    "matmul": matmul,
    "relu": relu,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "sum": sum,
    "mean": mean,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "max": maximum,
    "min": minimum,
    "clamp": clamp,
    "reshape": reshape,
    "conv2d": conv2d,
    "conv_transpose2d": conv_transpose2d,
    "max_pool2d": max_pool2d,
    "instance_norm": instance_norm,
    "pad2d": pad2d,
}


def forward_op(op_kind: str, *inputs, **kwargs) -> Tensor:
    """Apply a registered operation by name, e.g. ``forward_op("relu", x)``."""
    try:
        fn = _OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op {op_kind!r}; known: {sorted(_OPS)}") from None
    return fn(*inputs, **kwargs)


# --------------------------------------------------------------------------
# reverse pass


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every leaf that requires it.

    Gradients add onto any existing ``.grad``. The tape below ``root`` is
    released afterwards, so a second call on the same root raises.
    """
    if root.size != 1:
        raise GraphError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise GraphError("root does not require grad (detached or built under no_grad)")
    if root.op.startswith("freed:"):
        raise GraphError("graph below this root was already released by an earlier backward")
    if root.is_leaf:
        root.grad = np.ones(root.shape) if root.grad is None else root.grad + 1.0
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node.is_leaf:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
        node._parents = ()
        node._backward = None
        node.op = "freed:" + node.op


def finite_difference_grad(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if h <= 0:
        raise ValueError("h must be positive")
    base = np.array(x.data, dtype=DTYPE)
    flat = base.reshape(-1)
    out = np.empty_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = _wrap(f(Tensor(base))).item()
            flat[i] = orig - h
            fm = _wrap(f(Tensor(base))).item()
            flat[i] = orig
            out[i] = (fp - fm) / (2.0 * h)
    return Tensor(out.reshape(base.shape))
