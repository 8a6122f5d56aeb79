"""Dense float32 tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a contiguous ``float32`` ndarray.  Operations on
tensors that require gradients record their parents and a backward closure;
:func:`backward` walks that graph in reverse topological order.

Only same-shape elementwise arithmetic (plus python scalars) is supported.
The one broadcast is the per-channel bias add inside :func:`conv2d`.

:func:`precision` switches new tensors to float64 for gradient checking.
"""
from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels

_DTYPE = [np.float32]


@contextmanager
def precision(dtype):
    """Temporarily build tensors in ``dtype`` (process-wide; not for use while training)."""
    prev = _DTYPE[0]
    _DTYPE[0] = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE[0] = prev


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""

    def __init__(self, message: str, *shapes: Sequence[int]):
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{message}: " + " vs ".join(str(list(s)) for s in self.shapes))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None, op: str = "leaf"):
        arr = np.ascontiguousarray(data, dtype=_DTYPE[0])
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if 0 in arr.shape:
            raise ShapeError("tensor dimensions must be >= 1", arr.shape)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={list(self.shape)}, op={self.op}, requires_grad={self.requires_grad})"

    # arithmetic sugar
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
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return pow_scalar(self, exponent)

    def sum(self, axis=None):
        return sum_(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple, backward_fn: Callable, op: str) -> Tensor:
    tracked = tuple(p for p in parents if isinstance(p, Tensor) and p.requires_grad)
    if not tracked:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn, op=op)


def _check_same(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: operand shapes differ", a.shape, b.shape)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        c = np.float32(b)
        return _make(a.data + c, (a,), lambda g: (g,), "add_scalar")
    if not isinstance(a, Tensor):
        return add(b, a)
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        b = as_tensor(b)
        c = np.float32(a)
        return _make(c - b.data, (b,), lambda g: (-g,), "rsub_scalar")
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        c = np.float32(b)
        return _make(a.data * c, (a,), lambda g: (g * c,), "mul_scalar")
    if not isinstance(a, Tensor):
        return mul(b, a)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return mul(a, 1.0 / float(b))
    a = as_tensor(a)
    _check_same(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


def pow_scalar(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    p = np.float32(exponent)
    if exponent == 0:
        return Tensor(np.ones_like(ad), op="pow0")
    out = ad ** p

    def bw(g):
        return (g * p * ad ** (p - np.float32(1.0)),)

    return _make(out, (a,), bw, "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def leaky_relu(a: Tensor, slope: float) -> Tensor:
    """``x`` where ``x >= 0`` else ``slope * x``."""
    a = as_tensor(a)
    s = np.float32(slope)
    neg = a.data < 0
    out = np.where(neg, a.data * s, a.data)
    return _make(out, (a,), lambda g: (np.where(neg, g * s, g),), "leaky_relu")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    out = np.where(pos, a.data, np.float32(0.0))
    return _make(out, (a,), lambda g: (np.where(pos, g, np.float32(0.0)),), "relu")


# ---------------------------------------------------------------------------
# shape / reduction


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def sum_(a: Tensor, axis=None) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=True)
    kept = out.shape
    out = out.reshape(-1) if axis is None else out.squeeze(axis=axis)

    def bw(g):
        return (np.broadcast_to(g.reshape(kept), shape).astype(g.dtype, copy=True),)

    return _make(out, (a,), bw, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum_(a, axis), 1.0 / n)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    for t in tensors[1:]:
        ref, other = list(tensors[0].shape), list(t.shape)
        ref[axis] = other[axis] = 0
        if ref != other:
            raise ShapeError("concat: shapes differ outside the concat axis", tensors[0].shape, t.shape)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), bw, "concat")


def log_softmax(a: Tensor, axis: int = 1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bw(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), bw, "log_softmax")


# ---------------------------------------------------------------------------
# convolution


def _conv_geometry(x_shape, w_shape, stride, padding):
    n, cin, h, w = x_shape
    cout, wcin, kh, kw = w_shape
    if wcin != cin:
        raise ShapeError("conv2d: input channels do not match weight Cin (input [N,Cin,H,W] vs weight [Cout,Cin,k,k])",
                         x_shape, w_shape)
    if kh != kw or kh % 2 == 0:
        raise ShapeError("conv2d: kernel must be square with odd size", w_shape)
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: need stride >= 1 and padding >= 0, got stride={stride} padding={padding}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d: kernel larger than padded input", x_shape, w_shape)
    return n, cin, cout, kh, ho, wo


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv2d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None, stride: int = 1,
                   padding: int = 0) -> np.ndarray:
    """Cross-correlation of ``x`` (N,Cin,H,W) with ``weight`` (Cout,Cin,k,k)."""
    out, _ = _conv_fwd(x, weight, bias, stride, padding)
    return out


def _conv_fwd(x, weight, bias, stride, padding):
    n, cin, cout, k, ho, wo = _conv_geometry(x.shape, weight.shape, stride, padding)
    xp = _pad(np.asarray(x, dtype=_DTYPE[0]), padding)
    if k == 1 and stride == 1:
        cols = np.ascontiguousarray(xp.transpose(1, 0, 2, 3)).reshape(cin, n * ho * wo)
    else:
        cols = kernels.im2col(xp, k, stride, ho, wo)
    out = weight.reshape(cout, -1) @ cols
    if bias is not None:
        out += bias.reshape(cout, 1)
    out = np.ascontiguousarray(out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3))
    return out, (cols, xp.shape)


def conv2d_backward(grad_out: np.ndarray, x: np.ndarray, weight: np.ndarray, stride: int = 1, padding: int = 0,
                    _cache=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of a conv2d w.r.t. input, weight and bias."""
    n, cin, cout, k, ho, wo = _conv_geometry(x.shape, weight.shape, stride, padding)
    if grad_out.shape != (n, cout, ho, wo):
        raise ShapeError("conv2d_backward: grad_out does not match the conv2d output shape",
                         grad_out.shape, (n, cout, ho, wo))
    if _cache is None:
        _, _cache = _conv_fwd(x, weight, None, stride, padding)
    cols, padded_shape = _cache
    g2 = np.ascontiguousarray(grad_out.transpose(1, 0, 2, 3)).reshape(cout, -1)
    grad_b = g2.sum(axis=1)
    grad_w = (g2 @ cols.T).reshape(weight.shape)
    dcols = weight.reshape(cout, -1).T @ g2
    if k == 1 and stride == 1:
        dxp = np.ascontiguousarray(dcols.reshape(cin, n, ho, wo).transpose(1, 0, 2, 3))
    else:
        dxp = kernels.col2im(dcols, padded_shape, k, stride, ho, wo)
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(dxp), grad_w, grad_b


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    x, weight = as_tensor(x), as_tensor(weight)
    out, cache = _conv_fwd(x.data, weight.data, None if bias is None else bias.data, stride, padding)

    def bw(g):
        gx, gw, gb = conv2d_backward(g, x.data, weight.data, stride, padding, _cache=cache)
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw, "conv2d")


# ---------------------------------------------------------------------------
# pooling / upsampling / normalization


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties route the gradient to the first maximum."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError("max_pool2d: spatial size must be even", x.shape)
    out, idx = kernels.maxpool2(x.data)
    return _make(out, (x,), lambda g: (kernels.maxpool2_backward(g, idx),), "max_pool2d")


def upsample2d(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling."""
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bw(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(out, (x,), bw, "upsample2d")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               train: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    In training mode the running statistics arrays are updated in place
    (unbiased variance, as in the usual framework convention).
    """
    xd = x.data
    c = xd.shape[1]
    view = (1, c, 1, 1)
    if train:
        m = xd.size // c
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        unbiased = var * (m / max(m - 1, 1))
        running_mean *= np.float32(1 - momentum)
        running_mean += np.float32(momentum) * mu
        running_var *= np.float32(1 - momentum)
        running_var += np.float32(momentum) * unbiased.astype(np.float32)
    else:
        mu, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + np.float32(eps))).astype(xd.dtype)
    xhat = (xd - mu.reshape(view)) * inv.reshape(view)
    g_d = gamma.data
    out = xhat * g_d.reshape(view) + beta.data.reshape(view)

    def bw(g):
        dbeta = g.sum(axis=(0, 2, 3))
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        if train:
            mcount = np.float32(xd.size // c)
            dx = (g_d * inv).reshape(view) / mcount * (
                mcount * g - dbeta.reshape(view) - xhat * dgamma.reshape(view))
        else:
            dx = g * (g_d * inv).reshape(view)
        return dx.astype(xd.dtype), dgamma, dbeta

    return _make(out, (x, gamma, beta), bw, "batch_norm")


# ---------------------------------------------------------------------------
# plain-array helpers


def frobenius_norm(x) -> float:
    """Square root of the sum of squared elements (accumulated in float64)."""
    d = x.data if isinstance(x, Tensor) else np.asarray(x)
    return float(np.sqrt(np.sum(np.square(d, dtype=np.float64))))


# ---------------------------------------------------------------------------
# reverse pass


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` ordered so every parent precedes its children."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if isinstance(p, Tensor) and p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Back-propagate from a scalar ``loss``.

    Leaf tensors with ``requires_grad`` get their ``.grad`` set (accumulated
    if already present).  Returns the gradient map keyed by ``id(node)``.
    """
    if loss.size != 1:
        raise ShapeError("backward: loss must be a scalar", loss.shape)
    if not loss.requires_grad:
        raise ValueError("backward: loss does not depend on any tensor requiring gradients")
    order = topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.data.dtype)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if not (isinstance(p, Tensor) and p.requires_grad) or pg is None:
                continue
            pg = np.asarray(pg, dtype=_DTYPE[0])
            if pg.shape != p.shape:
                raise ShapeError(f"backward: gradient shape mismatch in op {node.op}", pg.shape, p.shape)
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg
    return grads


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
