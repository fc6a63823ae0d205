"""Dense NCHW tensors with reverse-mode gradients.

Every operation records a closure that maps the output gradient back onto
its inputs; :meth:`Tensor.backward` walks the graph in reverse topological
order. Data lives in a numpy array (float32 unless asked otherwise).

Broadcasting is deliberately narrow: binary ops take equal shapes, a Python
scalar, or a rank-0 tensor (scalar scale). Anything else goes through an
explicit :func:`expand` or :func:`reshape`.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
MAGIC = b"SSDT"


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """A shaped float array that optionally tracks gradients."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=dtype or DEFAULT_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- basic properties -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def astype(self, dtype) -> "Tensor":
        out = _make(self.data.astype(dtype), (self,))
        if out.requires_grad:
            src_dtype = self.data.dtype
            out._backward = lambda g: _accum(self, g.astype(src_dtype))
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- autograd -----------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
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
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            _CURRENT.append(grads)
            try:
                node._backward(g)
            finally:
                _CURRENT.pop()

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return mul(reciprocal(self), other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


# Gradient routing: while a node's backward closure runs, _accum writes into
# the pending-gradient dict of the enclosing backward() call.
_CURRENT: list[dict[int, np.ndarray]] = []


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.shape != t.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match tensor shape {t.shape}")
    grads = _CURRENT[-1]
    key = id(t)
    if key in grads:
        grads[key] = grads[key] + g
    else:
        grads[key] = g


def _make(data: np.ndarray, parents: Sequence[Tensor]) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out._parents = tuple(parents) if out.requires_grad else ()
    out._backward = None
    return out


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def zeros(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad, dtype=dtype)


def ones(shape, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad, dtype=dtype)


# ---------------------------------------------------------------------------
# Elementwise ops
# ---------------------------------------------------------------------------


def _is_scalar_tensor(t: Tensor) -> bool:
    return t.ndim == 0


def _binary_operands(a, b, opname: str) -> tuple[Tensor, Tensor | float]:
    a = as_tensor(a)
    if isinstance(b, Tensor):
        if a.shape != b.shape and not (_is_scalar_tensor(a) or _is_scalar_tensor(b)):
            raise ShapeError(f"{opname}: shape mismatch {a.shape} vs {b.shape}")
        return a, b
    return a, float(b)


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    # only rank-0 operands are ever broadcast
    if t.ndim == 0 and g.ndim != 0:
        return np.asarray(g.sum(), dtype=t.dtype)
    return g.astype(t.dtype, copy=False)


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")
    if not isinstance(b, Tensor):
        out = _make(a.data + np.asarray(b, dtype=a.dtype), (a,))
        if out.requires_grad:
            out._backward = lambda g: _accum(a, g)
        return out
    if _is_scalar_tensor(a) and not _is_scalar_tensor(b):
        a, b = b, a
    out = _make(a.data + b.data, (a, b))
    if out.requires_grad:
        def backward(g):
            _accum(a, _reduce_to(g, a))
            _accum(b, _reduce_to(g, b))
        out._backward = backward
    return out


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = _make(-a.data, (a,))
    if out.requires_grad:
        out._backward = lambda g: _accum(a, -g)
    return out


def sub(a, b) -> Tensor:
    if isinstance(b, Tensor):
        return add(a, neg(b))
    return add(a, -float(b))


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")
    if not isinstance(b, Tensor):
        return scale(a, b)
    if _is_scalar_tensor(a) and not _is_scalar_tensor(b):
        a, b = b, a
    out = _make(a.data * b.data, (a, b))
    if out.requires_grad:
        def backward(g):
            _accum(a, _reduce_to(g * b.data, a))
            _accum(b, _reduce_to(g * a.data, b))
        out._backward = backward
    return out


def scale(a, s: float) -> Tensor:
    """Multiply by a Python scalar."""
    a = as_tensor(a)
    s = float(s)
    out = _make(a.data * np.asarray(s, dtype=a.dtype), (a,))
    if out.requires_grad:
        out._backward = lambda g: _accum(a, g * np.asarray(s, dtype=a.dtype))
    return out


def reciprocal(a) -> Tensor:
    a = as_tensor(a)
    inv = 1.0 / a.data
    out = _make(inv, (a,))
    if out.requires_grad:
        out._backward = lambda g: _accum(a, -g * inv * inv)
    return out


def div(a, b) -> Tensor:
    if isinstance(b, Tensor):
        return mul(a, reciprocal(b))
    return scale(a, 1.0 / float(b))


def _unary(a, fwd: Callable[[np.ndarray], np.ndarray], dfwd: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> Tensor:
    a = as_tensor(a)
    y = fwd(a.data)
    out = _make(y, (a,))
    if out.requires_grad:
        out._backward = lambda g: _accum(a, (g * dfwd(a.data, y)).astype(a.dtype, copy=False))
    return out


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    return _unary(a, _sigmoid_np, lambda x, y: y * (1.0 - y))


def relu(a) -> Tensor:
    return _unary(a, lambda x: np.maximum(x, 0), lambda x, y: (x > 0).astype(x.dtype))


def exp(a) -> Tensor:
    return _unary(a, np.exp, lambda x, y: y)


def log(a) -> Tensor:
    return _unary(a, np.log, lambda x, y: 1.0 / x)


def sqrt(a) -> Tensor:
    return _unary(a, np.sqrt, lambda x, y: 0.5 / y)


def sin(a) -> Tensor:
    return _unary(a, np.sin, lambda x, y: np.cos(x))


def arcsin(a) -> Tensor:
    return _unary(a, np.arcsin, lambda x, y: 1.0 / np.sqrt(1.0 - x * x))


def absolute(a) -> Tensor:
    return _unary(a, np.abs, lambda x, y: np.sign(x))


def power(a, exponent: float) -> Tensor:
    e = float(exponent)
    if e == 0.0:
        return _unary(a, np.ones_like, lambda x, y: np.zeros_like(x))
    if e == 1.0:
        return _unary(a, np.copy, lambda x, y: np.ones_like(x))

    def dfwd(x, y):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = e * x ** (e - 1.0)
        # d/dx x**e at 0 is 0 for e > 1; keep it finite
        return np.where(x == 0, 0.0, d) if e > 1.0 else d

    return _unary(a, lambda x: x ** e, dfwd)


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip values; the gradient is passed only where no clipping occurred."""
    lo_v = -np.inf if lo is None else lo
    hi_v = np.inf if hi is None else hi
    return _unary(
        a,
        lambda x: np.clip(x, lo_v, hi_v),
        lambda x, y: ((x >= lo_v) & (x <= hi_v)).astype(x.dtype),
    )


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = _binary_operands(a, b, "maximum")
    b = as_tensor(b, dtype=a.dtype) if not isinstance(b, Tensor) else b
    if a.shape != b.shape:
        raise ShapeError(f"maximum: shape mismatch {a.shape} vs {b.shape}")
    pick_a = a.data >= b.data
    out = _make(np.where(pick_a, a.data, b.data), (a, b))
    if out.requires_grad:
        def backward(g):
            _accum(a, np.where(pick_a, g, 0).astype(a.dtype))
            _accum(b, np.where(pick_a, 0, g).astype(b.dtype))
        out._backward = backward
    return out


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    return neg(maximum(neg(a), neg(b)))


def where(cond: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.dtype)
    if a.shape != b.shape or np.shape(cond) != a.shape:
        raise ShapeError(f"where: shape mismatch {np.shape(cond)}, {a.shape}, {b.shape}")
    cond = np.asarray(cond, dtype=bool)
    out = _make(np.where(cond, a.data, b.data), (a, b))
    if out.requires_grad:
        def backward(g):
            _accum(a, np.where(cond, g, 0).astype(a.dtype))
            _accum(b, np.where(cond, 0, g).astype(b.dtype))
        out._backward = backward
    return out


_ELEMENTWISE = {
    "sigmoid": sigmoid,
    "relu": relu,
    "add": add,
    "mul": mul,
    "scale": scale,
}


def elementwise(kind: str, *args) -> Tensor:
    """Dispatch one of ``sigmoid``, ``relu``, ``add``, ``mul``, ``scale`` by name."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {kind!r}; expected one of {sorted(_ELEMENTWISE)}") from None
    return fn(*args)


# ---------------------------------------------------------------------------
# Reductions and shape ops
# ---------------------------------------------------------------------------


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = _make(np.asarray(a.data.sum(axis=axes, keepdims=keepdims)), (a,))
    if out.requires_grad:
        def backward(g):
            if not keepdims:
                g = np.expand_dims(g, axes) if axes else g
            _accum(a, np.broadcast_to(g, a.shape).astype(a.dtype))
        out._backward = backward
    return out


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return scale(tsum(a, axis, keepdims), 1.0 / count)


def tmax(a, axis: int, keepdims: bool = False) -> Tensor:
    """Max over one axis; the gradient goes to the first maximal element."""
    a = as_tensor(a)
    axis = axis % a.ndim
    idx = np.argmax(a.data, axis=axis)
    vals = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
    out = _make(vals if keepdims else np.squeeze(vals, axis), (a,))
    if out.requires_grad:
        def backward(g):
            full = np.zeros_like(a.data)
            gk = g if keepdims else np.expand_dims(g, axis)
            np.put_along_axis(full, np.expand_dims(idx, axis), gk, axis=axis)
            _accum(a, full)
        out._backward = backward
    return out


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    out = _make(a.data.reshape(tuple(shape)), (a,))
    if out.requires_grad:
        out._backward = lambda g: _accum(a, g.reshape(a.shape))
    return out


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = _make(np.ascontiguousarray(a.data.transpose(axes)), (a,))
    if out.requires_grad:
        out._backward = lambda g: _accum(a, g.transpose(inv))
    return out


def expand(a, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast of size-1 axes (same rank) up to ``shape``."""
    a = as_tensor(a)
    shape = tuple(shape)
    if len(shape) != a.ndim or any(s != t and s != 1 for s, t in zip(a.shape, shape)):
        raise ShapeError(f"expand: cannot expand {a.shape} to {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(a.shape, shape)) if s != t)
    out = _make(np.ascontiguousarray(np.broadcast_to(a.data, shape)), (a,))
    if out.requires_grad:
        out._backward = lambda g: _accum(a, g.sum(axis=axes, keepdims=True).astype(a.dtype))
    return out


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    if isinstance(index, Tensor):
        raise TypeError("index with numpy arrays, not Tensors")
    out = _make(np.array(a.data[index]), (a,))
    if out.requires_grad:
        basic = _is_basic_index(index)

        def backward(g):
            full = np.zeros_like(a.data)
            if basic:
                full[index] = g
            else:
                np.add.at(full, index, g)
            _accum(a, full)
        out._backward = backward
    return out


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0]
    axis = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref.shape)) if i != axis):
            raise ShapeError(f"concat: incompatible shapes {ref.shape} and {t.shape} along axis {axis}")
    out = _make(np.concatenate([t.data for t in tensors], axis=axis), tensors)
    if out.requires_grad:
        bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

        def backward(g):
            for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accum(t, np.ascontiguousarray(g[tuple(sl)]))

        out._backward = backward
    return out


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


# ---------------------------------------------------------------------------
# Convolution, pooling, resampling
# ---------------------------------------------------------------------------


def _check_nchw(x: Tensor, opname: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{opname}: expected NCHW input, got shape {x.shape}")


def conv2d(x, kernel, bias=None, stride: int = 1, pad: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation with zero padding.

    Args:
        x: input of shape (N, C, H, W).
        kernel: weights of shape (O, C // groups, kh, kw); kh and kw odd.
        bias: optional (O,) tensor.
        stride: positive step.
        pad: zero padding on each spatial side.
        groups: channel groups; ``groups == C`` gives a depthwise conv.

    Returns:
        Tensor of shape (N, O, (H + 2*pad - kh)//stride + 1, ...).
    """
    x = as_tensor(x)
    kernel = as_tensor(kernel)
    _check_nchw(x, "conv2d")
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be (O, I, kh, kw), got {kernel.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = kernel.shape
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d: invalid stride={stride} / pad={pad}")
    if c % groups or o % groups or ci != c // groups:
        raise ShapeError(
            f"conv2d: input shape {x.shape} incompatible with kernel shape {kernel.shape} (groups={groups})"
        )
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel spatial extent must be odd, got kernel shape {kernel.shape}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input shape {x.shape} too small for kernel shape {kernel.shape}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} does not match kernel shape {kernel.shape}")

    dtype = np.result_type(x.dtype, kernel.dtype)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    xp = xp.astype(dtype, copy=False)
    wk = kernel.data.astype(dtype, copy=False)
    g = groups
    cg, og = c // g, o // g
    xg = xp.reshape(n, g, cg, h + 2 * pad, w + 2 * pad)
    wg = wk.reshape(g, og, cg, kh, kw)
    hs = (ho - 1) * stride + 1
    ws = (wo - 1) * stride + 1

    out = np.zeros((n, g, og, ho, wo), dtype=dtype)
    for i in range(kh):
        for j in range(kw):
            patch = xg[:, :, :, i : i + hs : stride, j : j + ws : stride]
            out += _group_contract(patch, wg[:, :, :, i, j])
    out = out.reshape(n, o, ho, wo)
    parents: list[Tensor] = [x, kernel]
    if bias is not None:
        out = out + bias.data.astype(dtype).reshape(1, o, 1, 1)
        parents.append(bias)
    result = _make(out, parents)
    if result.requires_grad:
        def backward(grad):
            gg = grad.reshape(n, g, og, ho, wo)
            if bias is not None and bias.requires_grad:
                _accum(bias, grad.sum(axis=(0, 2, 3)).astype(bias.dtype))
            if kernel.requires_grad:
                dw = np.empty_like(wg)
                for i in range(kh):
                    for j in range(kw):
                        patch = xg[:, :, :, i : i + hs : stride, j : j + ws : stride]
                        # (n,g,cg,ho,wo) x (n,g,og,ho,wo) -> (g,og,cg)
                        dw[:, :, :, i, j] = np.einsum("ngchw,ngohw->goc", patch, gg, optimize=True)
                _accum(kernel, dw.reshape(kernel.shape).astype(kernel.dtype))
            if x.requires_grad:
                dxp = np.zeros_like(xg)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, :, i : i + hs : stride, j : j + ws : stride] += _group_contract_t(
                            gg, wg[:, :, :, i, j]
                        )
                dxp = dxp.reshape(n, c, h + 2 * pad, w + 2 * pad)
                if pad:
                    dxp = dxp[:, :, pad:-pad, pad:-pad]
                _accum(x, np.ascontiguousarray(dxp).astype(x.dtype))

        result._backward = backward
    return result


def _group_contract(patch: np.ndarray, wij: np.ndarray) -> np.ndarray:
    # patch (n,g,cg,h,w), wij (g,og,cg) -> (n,g,og,h,w)
    n, g, cg, h, w = patch.shape
    og = wij.shape[1]
    if g == 1:
        res = np.tensordot(wij[0], patch[:, 0], axes=([1], [1]))  # (og, n, h, w)
        return res.transpose(1, 0, 2, 3)[:, None]
    if cg == 1 and og == 1:
        return patch * wij.reshape(1, g, 1, 1, 1)
    return np.einsum("ngchw,goc->ngohw", patch, wij, optimize=True)


def _group_contract_t(grad: np.ndarray, wij: np.ndarray) -> np.ndarray:
    # grad (n,g,og,h,w), wij (g,og,cg) -> (n,g,cg,h,w)
    n, g, og, h, w = grad.shape
    if g == 1:
        res = np.tensordot(wij[0], grad[:, 0], axes=([0], [1]))  # (cg, n, h, w)
        return res.transpose(1, 0, 2, 3)[:, None]
    if og == 1 and wij.shape[2] == 1:
        return grad * wij.reshape(1, g, 1, 1, 1)
    return np.einsum("ngohw,goc->ngchw", grad, wij, optimize=True)


def global_avg_pool(x) -> Tensor:
    x = as_tensor(x)
    _check_nchw(x, "global_avg_pool")
    return tmean(x, axis=(2, 3), keepdims=True)


def global_max_pool(x) -> Tensor:
    x = as_tensor(x)
    _check_nchw(x, "global_max_pool")
    n, c, h, w = x.shape
    return reshape(tmax(reshape(x, (n, c, h * w)), axis=2, keepdims=True), (n, c, 1, 1))


def group_norm(x, groups: int, gain=None, shift=None, eps: float = 1e-5) -> Tensor:
    """Per-sample normalization over channel groups, then per-channel ``gain`` and ``shift`` of shape (C,)."""
    x = as_tensor(x)
    _check_nchw(x, "group_norm")
    n, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible into {groups} groups")
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(xg.var(axis=2, keepdims=True) + eps)
    y = ((xg - mu) * inv).reshape(n, c, h, w)
    gain = as_tensor(gain) if gain is not None else None
    shift = as_tensor(shift) if shift is not None else None
    for name, t in (("gain", gain), ("shift", shift)):
        if t is not None and t.shape != (c,):
            raise ShapeError(f"group_norm: {name} must have shape ({c},), got {t.shape}")
    gd = gain.data.reshape(1, c, 1, 1) if gain is not None else 1.0
    sd = shift.data.reshape(1, c, 1, 1) if shift is not None else 0.0
    parents = tuple(t for t in (x, gain, shift) if t is not None)
    out = _make((y * gd + sd).astype(x.dtype, copy=False), parents)
    if out.requires_grad:
        def backward(g):
            if gain is not None:
                _accum(gain, (g * y).sum(axis=(0, 2, 3)).astype(gain.dtype))
            if shift is not None:
                _accum(shift, g.sum(axis=(0, 2, 3)).astype(shift.dtype))
            if x.requires_grad:
                gy = (g * gd).reshape(n, groups, -1)
                yg = y.reshape(n, groups, -1)
                dx = inv * (gy - gy.mean(axis=2, keepdims=True) - yg * (gy * yg).mean(axis=2, keepdims=True))
                _accum(x, dx.reshape(n, c, h, w).astype(x.dtype, copy=False))
        out._backward = backward
    return out


def upsample_nearest2x(x) -> Tensor:
    x = as_tensor(x)
    _check_nchw(x, "upsample_nearest2x")
    out = _make(np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3), (x,))
    if out.requires_grad:
        n, c, h, w = x.shape
        out._backward = lambda g: _accum(x, g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))
    return out


def avg_pool2x(x) -> Tensor:
    """2x2 average pooling with stride 2 (even H and W required)."""
    x = as_tensor(x)
    _check_nchw(x, "avg_pool2x")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2x: spatial size must be even, got shape {x.shape}")
    out = _make(x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5)), (x,))
    if out.requires_grad:
        def backward(g):
            up = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
            _accum(x, up.astype(x.dtype))
        out._backward = backward
    return out


_POOLS = {
    "global_avg_pool": global_avg_pool,
    "global_max_pool": global_max_pool,
    "upsample_nearest2x": upsample_nearest2x,
}


def pool_and_resample(kind: str, x) -> Tensor:
    """Dispatch ``global_avg_pool``, ``global_max_pool`` or ``upsample_nearest2x`` by name."""
    try:
        fn = _POOLS[kind]
    except KeyError:
        raise ValueError(f"unknown pool/resample kind {kind!r}; expected one of {sorted(_POOLS)}") from None
    return fn(x)


# ---------------------------------------------------------------------------
# Verification and serialization
# ---------------------------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-3) -> float:
    """Compare the analytic gradient of scalar ``f`` at ``x`` with central differences.

    Evaluation happens in float64. Returns
    ``max |analytic - numeric| / max(1, |analytic|)`` over all coordinates.
    """
    if not 1e-4 <= eps <= 1e-2:
        raise ValueError(f"eps must lie in [1e-4, 1e-2], got {eps}")
    x0 = np.array(as_tensor(x).data, dtype=np.float64)
    if not np.all(np.isfinite(x0)):
        raise ValueError("grad_check: input contains non-finite values")

    leaf = Tensor(x0, requires_grad=True, dtype=np.float64)
    y = f(leaf)
    if y.size != 1:
        raise ShapeError(f"grad_check: f must return a scalar, got shape {y.shape}")
    if not np.isfinite(y.data).all():
        raise ValueError("grad_check: f(x) is not finite")
    y.backward()
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x0)
    if not np.all(np.isfinite(analytic)):
        raise ValueError("grad_check: analytic gradient is not finite")

    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        fp = float(f(Tensor(x0, dtype=np.float64)).data)
        flat[k] = orig - eps
        fm = float(f(Tensor(x0, dtype=np.float64)).data)
        flat[k] = orig
        numeric.reshape(-1)[k] = (fp - fm) / (2 * eps)
    if not np.all(np.isfinite(numeric)):
        raise ValueError("grad_check: finite differences are not finite")
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0


HEADER_BYTES = 16
MAX_RANK = 5


def dump(t: Tensor | np.ndarray, path: str | Path) -> None:
    """Write ``t`` as a flat little-endian float32 file.

    Header (16 bytes): b"SSDT", uint16 rank, five uint16 extents (unused
    slots zero). Data follows in C order.
    """
    arr = np.asarray(t.data if isinstance(t, Tensor) else t, dtype="<f4")
    if arr.ndim > MAX_RANK or any(d > 0xFFFF for d in arr.shape):
        raise ShapeError(f"dump: shape {arr.shape} exceeds the header limits (rank <= 5, extents < 65536)")
    extents = list(arr.shape) + [0] * (MAX_RANK - arr.ndim)
    header = MAGIC + struct.pack("<H5H", arr.ndim, *extents)
    Path(path).write_bytes(header + arr.tobytes(order="C"))


def load(path: str | Path) -> Tensor:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER_BYTES or raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a tensor dump (bad magic {raw[:4]!r})")
    rank, *extents = struct.unpack_from("<H5H", raw, 4)
    if rank > MAX_RANK:
        raise ValueError(f"{path}: invalid rank {rank}")
    shape = tuple(extents[:rank])
    data = np.frombuffer(raw, dtype="<f4", offset=HEADER_BYTES)
    expected = int(np.prod(shape)) if rank else 1
    if data.size != expected:
        raise ValueError(f"{path}: expected {expected} values for shape {shape}, found {data.size}")
    return Tensor(data.reshape(shape).astype(np.float32))


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
