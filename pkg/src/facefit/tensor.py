"""Reverse-mode automatic differentiation over dense float64 arrays.

Every optimized quantity in the toolkit (albedo maps, illumination maps,
model coefficients, camera pose) flows through the :class:`Tensor` type
defined here.  The implementation is a classic Wengert tape: each tensor
produced by an operation holds a node recording its parents and one
vector-Jacobian product per parent; ``backward`` walks the recorded graph
once in reverse topological order.

All arithmetic is 64-bit.  Gradient checks at 1e-4 relative tolerance are
not reliable in float32, and verifiability is the point of this package.
"""

from __future__ import annotations

import warnings
from typing import Callable, Sequence

import numpy as np


class EmptyMaskWarning(UserWarning):
    """Raised (as a warning) when a masked reduction sees an all-zero mask."""


class TapeNode:
    """Backward-pass record: parent tensors plus one VJP callable each.

    Nodes are created only when some operand requires grad, so detached
    tensors never pay for bookkeeping.
    """

    __slots__ = ("parents", "vjps")

    def __init__(self, parents: list["Tensor"], vjps: list[Callable[[np.ndarray], np.ndarray]]):
        self.parents = parents
        self.vjps = vjps


class Tensor:
    """N-dimensional float64 array with optional autodiff tracking.

    The wrapped array should be treated as immutable once the tensor has
    entered a computation; optimizers mutate leaf ``.data`` only between
    tape builds.
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "_backward_done")

    def __init__(self, data, requires_grad: bool = False, node: TapeNode | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad) or node is not None
        self.grad: np.ndarray | None = None
        self.node = node
        self._backward_done = False

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(astensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(astensor(other), self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self) -> "Tensor":
        return mean(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def astensor(x) -> Tensor:
    """Wrap plain data as a constant Tensor; pass Tensors through."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _make(out_data: np.ndarray, parents_vjps: Sequence[tuple[Tensor, Callable]]) -> Tensor:
    """Build the output tensor, recording a tape node iff a parent needs grad."""
    tracked = [(p, vjp) for p, vjp in parents_vjps if isinstance(p, Tensor) and p.requires_grad]
    if not tracked:
        return Tensor(out_data)
    node = TapeNode([p for p, _ in tracked], [v for _, v in tracked])
    return Tensor(out_data, requires_grad=True, node=node)


# -- elementwise ops ---------------------------------------------------------


def _check_binary_shapes(a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    _check_binary_shapes(a.data, b.data)
    out = a.data + b.data
    return _make(out, [(a, lambda g: _unbroadcast(g, a.shape)),
                       (b, lambda g: _unbroadcast(g, b.shape))])


def sub(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    _check_binary_shapes(a.data, b.data)
    out = a.data - b.data
    return _make(out, [(a, lambda g: _unbroadcast(g, a.shape)),
                       (b, lambda g: _unbroadcast(-g, b.shape))])


def mul(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    _check_binary_shapes(a.data, b.data)
    out = a.data * b.data
    return _make(out, [(a, lambda g: _unbroadcast(g * b.data, a.shape)),
                       (b, lambda g: _unbroadcast(g * a.data, b.shape))])


def div(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    _check_binary_shapes(a.data, b.data)
    if np.any(b.data == 0.0):
        raise ZeroDivisionError("division by exact zero")
    out = a.data / b.data
    return _make(out, [(a, lambda g: _unbroadcast(g / b.data, a.shape)),
                       (b, lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.shape))])


def pow2(a) -> Tensor:
    a = astensor(a)
    return _make(a.data * a.data, [(a, lambda g: g * 2.0 * a.data)])


def abs_(a) -> Tensor:
    # Subgradient 0 at the kink: np.sign(0) == 0.
    a = astensor(a)
    return _make(np.abs(a.data), [(a, lambda g: g * np.sign(a.data))])


def exp(a) -> Tensor:
    a = astensor(a)
    out = np.exp(a.data)
    return _make(out, [(a, lambda g: g * out)])


def sqrt(a) -> Tensor:
    a = astensor(a)
    if np.any(a.data < 0.0):
        raise ValueError("sqrt of negative value")
    out = np.sqrt(a.data)
    return _make(out, [(a, lambda g: g * 0.5 / np.where(out == 0.0, np.inf, out))])


def neg(a) -> Tensor:
    a = astensor(a)
    return _make(-a.data, [(a, lambda g: -g)])


def max0(a) -> Tensor:
    # ReLU; subgradient 0 at 0.
    a = astensor(a)
    return _make(np.maximum(a.data, 0.0), [(a, lambda g: g * (a.data > 0.0))])


def sin(a) -> Tensor:
    a = astensor(a)
    return _make(np.sin(a.data), [(a, lambda g: g * np.cos(a.data))])


def cos(a) -> Tensor:
    a = astensor(a)
    return _make(np.cos(a.data), [(a, lambda g: -g * np.sin(a.data))])


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "pow2": pow2,
    "abs": abs_,
    "exp": exp,
    "sqrt": sqrt,
    "neg": neg,
    "max0": max0,
    "sin": sin,
    "cos": cos,
}

# Unary kinds take a single operand.
_UNARY_KINDS = {"pow2", "abs", "exp", "sqrt", "neg", "max0", "sin", "cos"}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch an elementwise op by name.

    ``kind`` must be one of add, sub, mul, div (binary; equal shapes or
    scalar second operand) or pow2, abs, exp, sqrt, neg, max0, sin, cos
    (unary).
    """
    if kind not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise op kind: {kind!r}")
    if kind in _UNARY_KINDS:
        if b is not None:
            raise ValueError(f"{kind} is unary")
        return _ELEMENTWISE[kind](a)
    if b is None:
        raise ValueError(f"{kind} is binary")
    return _ELEMENTWISE[kind](a, b)


# -- reductions ---------------------------------------------------------------

MASKED_MEAN_EPS = 1e-12


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = astensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g: np.ndarray) -> np.ndarray:
        if axis is None:
            return np.broadcast_to(g, a.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.shape).copy()

    return _make(np.asarray(out, dtype=np.float64), [(a, vjp)])


def mean(a) -> Tensor:
    a = astensor(a)
    n = float(a.data.size)
    return div(sum_(a), Tensor(n))


def masked_mean(a, mask) -> Tensor:
    """Mean of ``a`` over entries where ``mask`` (broadcast to a) is nonzero.

    The denominator counts broadcast mask entries, so a 1xHxW mask applied
    to a CxHxW tensor weights every channel of a masked texel.  An all-zero
    mask yields 0 with zero gradient and emits :class:`EmptyMaskWarning`.
    The mask is always treated as a constant.
    """
    a = astensor(a)
    m = np.broadcast_to(_as_array(mask), a.shape)
    denom = float(m.sum())
    if denom == 0.0:
        warnings.warn("masked_mean over an empty mask; returning 0", EmptyMaskWarning)
    denom = max(denom, MASKED_MEAN_EPS)
    out = float((m * a.data).sum() / denom)
    return _make(np.float64(out), [(a, lambda g: g * m / denom)])


def reduce(kind: str, a, mask=None) -> Tensor:
    """Spec-surface reduction dispatcher: sum | mean | masked_mean -> scalar."""
    if kind == "sum":
        return sum_(a)
    if kind == "mean":
        return mean(a)
    if kind == "masked_mean":
        if mask is None:
            raise ValueError("masked_mean requires a mask")
        return masked_mean(a, mask)
    raise ValueError(f"unknown reduce kind: {kind!r}")


# -- structural ops -----------------------------------------------------------


def flip_horizontal(a) -> Tensor:
    """Reverse the last (width) axis; the adjoint is the same permutation."""
    a = astensor(a)
    if a.data.ndim < 2:
        raise ValueError("flip_horizontal needs at least 2 dims")
    out = a.data[..., ::-1].copy()
    return _make(out, [(a, lambda g: g[..., ::-1].copy())])


def shift(a, dx: int, dy: int) -> Tensor:
    """Translate the last two axes by (dx right, dy down) with zero fill.

    Shifts are limited to one texel so the adjoint (the inverse translation)
    stays trivially exact.
    """
    if abs(dx) > 1 or abs(dy) > 1:
        raise ValueError("shift supports |dx|,|dy| <= 1")
    a = astensor(a)
    if a.data.ndim < 2:
        raise ValueError("shift needs at least 2 dims")
    return _make(_shift_array(a.data, dx, dy), [(a, lambda g: _shift_array(g, -dx, -dy))])


def _shift_array(arr: np.ndarray, dx: int, dy: int) -> np.ndarray:
    out = np.zeros_like(arr)
    h, w = arr.shape[-2], arr.shape[-1]
    ys_dst = slice(max(dy, 0), h + min(dy, 0))
    ys_src = slice(max(-dy, 0), h + min(-dy, 0))
    xs_dst = slice(max(dx, 0), w + min(dx, 0))
    xs_src = slice(max(-dx, 0), w + min(-dx, 0))
    out[..., ys_dst, xs_dst] = arr[..., ys_src, xs_src]
    return out


def bilinear_sample(map_t, coords) -> Tensor:
    """Sample a CxHxW map at K continuous (x, y) pixel positions -> CxK.

    Integer coordinates hit texel centers exactly; out-of-range positions
    clamp to the border.  Sampling is linear in the map values, so the
    gradient w.r.t. the map is the exact scatter of the bilinear weights.
    Coordinates are treated as constants (geometry carries no gradient).
    """
    map_t = astensor(map_t)
    xy = _as_array(coords)
    if xy.ndim != 2 or xy.shape[1] != 2:
        raise ValueError("coords must be Kx2")
    if not np.all(np.isfinite(xy)):
        raise ValueError("non-finite sample coordinates")
    c, h, w = map_t.shape
    x = np.clip(xy[:, 0], 0.0, w - 1.0)
    y = np.clip(xy[:, 1], 0.0, h - 1.0)
    x0 = np.clip(np.floor(x).astype(np.intp), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(y).astype(np.intp), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    w00 = (1.0 - fx) * (1.0 - fy)
    w01 = fx * (1.0 - fy)
    w10 = (1.0 - fx) * fy
    w11 = fx * fy
    d = map_t.data
    out = (d[:, y0, x0] * w00 + d[:, y0, x1] * w01 +
           d[:, y1, x0] * w10 + d[:, y1, x1] * w11)

    def vjp(g: np.ndarray) -> np.ndarray:
        grad = np.zeros_like(d)
        np.add.at(grad, (slice(None), y0, x0), g * w00)
        np.add.at(grad, (slice(None), y0, x1), g * w01)
        np.add.at(grad, (slice(None), y1, x0), g * w10)
        np.add.at(grad, (slice(None), y1, x1), g * w11)
        return grad

    return _make(out, [(map_t, vjp)])


def matmul(a, b) -> Tensor:
    """2D/1D matrix product with standard adjoints."""
    a, b = astensor(a), astensor(b)
    ad, bd = a.data, b.data
    out = ad @ bd

    def vjp_a(g: np.ndarray) -> np.ndarray:
        if ad.ndim == 1:
            return g @ bd.T if bd.ndim == 2 else g * bd
        if bd.ndim == 1:
            return np.outer(g, bd)
        return g @ bd.T

    def vjp_b(g: np.ndarray) -> np.ndarray:
        if bd.ndim == 1:
            return ad.T @ g if ad.ndim == 2 else g * ad
        if ad.ndim == 1:
            return np.outer(ad, g)
        return ad.T @ g

    return _make(out, [(a, vjp_a), (b, vjp_b)])


def linear_map(basis, coeff, offset) -> Tensor:
    """offset + basis @ coeff, the affine decode at the heart of the morphable model."""
    basis_t, coeff_t, offset_t = astensor(basis), astensor(coeff), astensor(offset)
    if basis_t.shape[-1] != coeff_t.shape[0] or basis_t.shape[0] != offset_t.shape[0]:
        raise ValueError(
            f"shape mismatch: basis {basis_t.shape}, coeff {coeff_t.shape}, offset {offset_t.shape}")
    return add(matmul(basis_t, coeff_t), offset_t)


def take(a, idx) -> Tensor:
    """Numpy-style indexing; the adjoint scatters back with accumulation."""
    a = astensor(a)
    out = a.data[idx]

    def vjp(g: np.ndarray) -> np.ndarray:
        grad = np.zeros_like(a.data)
        np.add.at(grad, idx, g)
        return grad

    return _make(np.asarray(out, dtype=np.float64), [(a, vjp)])


def reshape(a, shape) -> Tensor:
    a = astensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), [(a, lambda g: g.reshape(old))])


def transpose(a, axes=None) -> Tensor:
    a = astensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inverse = np.argsort(axes)
    return _make(np.transpose(a.data, axes).copy(),
                 [(a, lambda g: np.transpose(g, inverse).copy())])


def broadcast_to(a, shape) -> Tensor:
    a = astensor(a)
    out = np.broadcast_to(a.data, shape).copy()
    return _make(out, [(a, lambda g: _unbroadcast(g, a.shape))])


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [astensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i: int):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g: np.ndarray) -> np.ndarray:
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            return g[tuple(sl)]

        return vjp

    return _make(out, [(t, make_vjp(i)) for i, t in enumerate(ts)])


def stack(tensors, axis: int = 0) -> Tensor:
    ts = [astensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def make_vjp(i: int):
        def vjp(g: np.ndarray) -> np.ndarray:
            return np.take(g, i, axis=axis)

        return vjp

    return _make(out, [(t, make_vjp(i)) for i, t in enumerate(ts)])


def scatter_image(values, rows, cols, height: int, width: int) -> Tensor:
    """Place CxK pixel values into a zero CxHxW image at (rows, cols).

    Each destination pixel must be written at most once (the rasterizer
    guarantees this), making the adjoint a plain gather.
    """
    values = astensor(values)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    c = values.shape[0]
    out = np.zeros((c, height, width), dtype=np.float64)
    out[:, rows, cols] = values.data
    return _make(out, [(values, lambda g: g[:, rows, cols])])


# -- backward pass ------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tracked leaf.

    The graph below ``loss`` is swept exactly once in reverse topological
    order.  Calling backward twice on the same loss is an error; rebuild
    the graph (re-run the forward pass) instead.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ValueError("backward requires a scalar loss")
    if not loss.requires_grad:
        raise ValueError("loss is detached from the tape")
    if loss._backward_done:
        raise RuntimeError("backward already ran for this loss; rebuild the graph first")
    loss._backward_done = True

    # Iterative DFS topological order over tape nodes.
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack_:
        t, expanded = stack_.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack_.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                if id(p) not in seen:
                    stack_.append((p, False))

    adjoint: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        g = adjoint.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            if t.requires_grad:
                t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for parent, vjp in zip(t.node.parents, t.node.vjps):
            contrib = vjp(g)
            key = id(parent)
            if key in adjoint:
                adjoint[key] = adjoint[key] + contrib
            else:
                adjoint[key] = contrib


def zero_grad(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


# -- numerical gradient oracle -------------------------------------------------


def finite_diff_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-6) -> float:
    """Max relative error of the tape gradient against central differences.

    ``f`` must be deterministic and scalar-valued; determinism is verified
    by running the forward pass twice.  The error per coordinate is
    |fd - g| / max(1, |g|), and the max over coordinates is returned.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x0 = _as_array(x).copy()
    leaf = Tensor(x0, requires_grad=True)
    y1 = f(leaf)
    y2 = f(Tensor(x0, requires_grad=True))
    if not np.array_equal(y1.data, y2.data):
        raise RuntimeError("function is not deterministic across forward passes")
    backward(y1)
    g = leaf.grad
    if g is None:
        g = np.zeros_like(x0)

    flat = x0.ravel()
    fd = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(Tensor(x0)).data)
        flat[i] = orig - step
        fm = float(f(Tensor(x0)).data)
        flat[i] = orig
        fd[i] = (fp - fm) / (2.0 * step)
    gf = g.ravel()
    rel = np.abs(fd - gf) / np.maximum(1.0, np.abs(gf))
    return float(rel.max()) if rel.size else 0.0
