"""Dense tensors with explicit per-operation backward functions.

Every differentiable operation is a pair: a numpy forward and a numpy
backward that maps the output gradient to input/parameter gradients.  The
:class:`Tensor` wrapper only records which backward to call, so a network is
differentiated by replaying those companions in reverse topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_PRECISIONS = {"float32": np.float32, "float64": np.float64}
_dtype = np.float32
_grad_enabled = True


class ShapeError(ValueError):
    """Raised when an operation receives inputs of incompatible shape."""


def set_precision(mode: str) -> None:
    global _dtype
    if mode not in _PRECISIONS:
        raise ValueError(f"unknown precision {mode!r}; expected one of {sorted(_PRECISIONS)}")
    _dtype = _PRECISIONS[mode]


def get_dtype():
    return _dtype


def get_precision() -> str:
    return "float64" if _dtype == np.float64 else "float32"


@contextlib.contextmanager
def precision(mode: str):
    old = get_precision()
    set_precision(mode)
    try:
        yield
    finally:
        set_precision(old)


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    old = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = old


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(_dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- metadata -----------------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # -- autograd -----------------------------------------------------------------
    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise ShapeError(f"backward produced gradient {pg.shape} for value {parent.shape}")
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- operator sugar -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


class Parameter(Tensor):
    """A leaf tensor that an optimizer updates."""

    def __init__(self, data, name: str | None = None):
        super().__init__(np.asarray(data, dtype=_dtype), requires_grad=True, name=name)


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=_dtype))


def make_op(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    """Wrap a forward result, recording ``backward`` when any parent needs gradients."""
    parents = tuple(parents)
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------------
# elementwise and structural operations
# ---------------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return make_op(a.data + b.data, (a, b),
                   lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def neg(a: Tensor) -> Tensor:
    return make_op(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return make_op(a.data * b.data, (a, b),
                   lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_op(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def sigmoid_forward(v: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid_backward(grad_out: np.ndarray, out: np.ndarray) -> np.ndarray:
    return grad_out * out * (1.0 - out)


def sigmoid(a: Tensor) -> Tensor:
    out = sigmoid_forward(a.data)
    return make_op(out, (a,), lambda g: (sigmoid_backward(g, out),))


def reshape(a: Tensor, shape) -> Tensor:
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    inverse = np.argsort(axes)
    return make_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def getitem(a: Tensor, index) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.data)
        if _is_advanced(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return make_op(a.data[index], (a,), backward)


def _is_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_op(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched product over the last two axes (numpy ``@`` broadcasting)."""

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return make_op(a.data @ b.data, (a, b), backward)


# ---------------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight + bias`` over the last axis; ``weight`` is [in, out]."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input features {x.shape[-1]} != weight rows {weight.shape[0]}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias shape {bias.shape} != ({weight.shape[1]},)")
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    if bias is not None:
        out = out + bias.data
    out_shape = x.shape[:-1] + (weight.shape[1],)

    def backward(g):
        g2 = g.reshape(-1, weight.shape[1])
        gx = (g2 @ weight.data.T).reshape(x.shape)
        gw = x2.T @ g2
        gb = g2.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_op(out.reshape(out_shape), parents, backward)


def softmax_forward(v: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = v - v.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(grad_out: np.ndarray, out: np.ndarray, axis: int = -1) -> np.ndarray:
    return out * (grad_out - (grad_out * out).sum(axis=axis, keepdims=True))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    out = softmax_forward(a.data, axis)
    return make_op(out, (a,), lambda g: (softmax_backward(g, out, axis),))


def pool_channel(x: Tensor, mode: str = "avg") -> Tensor:
    """Reduce the channel axis of a [B, C, H, W] map to [B, 1, H, W]."""
    if x.ndim != 4:
        raise ShapeError(f"pool_channel expects rank-4 input, got shape {x.shape}")
    if mode == "avg":
        c = x.shape[1]
        return make_op(x.data.mean(axis=1, keepdims=True), (x,),
                       lambda g: (np.broadcast_to(g / c, x.shape).copy(),))
    if mode == "max":
        # np.argmax returns the first maximum: ties go to the lowest channel index
        idx = x.data.argmax(axis=1)[:, None]
        out = np.take_along_axis(x.data, idx, axis=1)

        def backward(g):
            gx = np.zeros_like(x.data)
            np.put_along_axis(gx, idx, g, axis=1)
            return (gx,)

        return make_op(out, (x,), backward)
    raise ValueError(f"unknown pooling mode {mode!r}")


def pool_spatial(x: Tensor, mode: str = "avg") -> Tensor:
    """Reduce H and W of a [B, C, H, W] map to [B, C, 1, 1]."""
    if x.ndim != 4:
        raise ShapeError(f"pool_spatial expects rank-4 input, got shape {x.shape}")
    b, c, h, w = x.shape
    if mode == "avg":
        return make_op(x.data.mean(axis=(2, 3), keepdims=True), (x,),
                       lambda g: (np.broadcast_to(g / (h * w), x.shape).copy(),))
    if mode == "max":
        flat = x.data.reshape(b, c, h * w)
        idx = flat.argmax(axis=2)[..., None]
        out = np.take_along_axis(flat, idx, axis=2).reshape(b, c, 1, 1)

        def backward(g):
            gx = np.zeros_like(flat)
            np.put_along_axis(gx, idx, g.reshape(b, c, 1), axis=2)
            return (gx.reshape(x.shape),)

        return make_op(out, (x,), backward)
    raise ValueError(f"unknown pooling mode {mode!r}")


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        gxhat = g * weight.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(x.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return make_op(xhat * weight.data + bias.data, (x, weight, bias), backward)


def group_norm(x: Tensor, groups: int, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    b, c, h, w = x.shape
    if c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible into {groups} groups")
    xg = x.data.reshape(b, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(x.shape)
    scale = weight.data.reshape(1, c, 1, 1)

    def backward(g):
        gxhat = (g * scale).reshape(b, groups, -1)
        xh = xhat.reshape(b, groups, -1)
        gx = inv * (gxhat - gxhat.mean(axis=2, keepdims=True)
                    - xh * (gxhat * xh).mean(axis=2, keepdims=True))
        return gx.reshape(x.shape), (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    out = xhat * scale + bias.data.reshape(1, c, 1, 1)
    return make_op(out, (x, weight, bias), backward)


# ---------------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------------

def conv_output_size(size: int, kernel: int, stride: int, padding: int, dilation: int = 1) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int, dilation: int) -> np.ndarray:
    """[B, C, H, W] -> [B, Ho, Wo, C, kh, kw] patches (a copy)."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    span_h = dilation * (kh - 1) + 1
    span_w = dilation * (kw - 1) + 1
    win = sliding_window_view(x, (span_h, span_w), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, ::dilation, ::dilation]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))


def col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, padding: int,
           dilation: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add [B, Ho, Wo, C, kh, kw] into [B, C, H, W]."""
    b, c, h, w = x_shape
    _, ho, wo = cols.shape[:3]
    out = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            y0, x0 = i * dilation, j * dilation
            out[:, :, y0:y0 + stride * (ho - 1) + 1:stride, x0:x0 + stride * (wo - 1) + 1:stride] += \
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if padding:
        out = out[:, :, padding:padding + h, padding:padding + w]
    return out


def conv2d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None,
                   stride: int = 1, padding: int = 0, dilation: int = 1):
    """Returns the output and the patch matrix the backward needs."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 input, got shape {x.shape}")
    o, c, kh, kw = weight.shape
    if x.shape[1] != c:
        raise ShapeError(f"conv2d: input channels {x.shape[1]} != weight in-channels {c}")
    b, _, h, w = x.shape
    ho = conv_output_size(h, kh, stride, padding, dilation)
    wo = conv_output_size(w, kw, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: output spatial size {ho}x{wo} from input {h}x{w} is empty")
    cols = im2col(x, kh, kw, stride, padding, dilation).reshape(b * ho * wo, c * kh * kw)
    out = cols @ weight.reshape(o, -1).T
    if bias is not None:
        out += bias
    return out.reshape(b, ho, wo, o).transpose(0, 3, 1, 2), cols


def conv2d_backward(grad_out: np.ndarray, cols: np.ndarray, x_shape, weight: np.ndarray,
                    stride: int = 1, padding: int = 0, dilation: int = 1):
    """Gradients (input, weight, bias) of :func:`conv2d_forward`."""
    o, c, kh, kw = weight.shape
    b, _, ho, wo = grad_out.shape
    g2 = grad_out.transpose(0, 2, 3, 1).reshape(-1, o)
    gw = (g2.T @ cols).reshape(weight.shape)
    gb = g2.sum(axis=0)
    gcols = (g2 @ weight.reshape(o, -1)).reshape(b, ho, wo, c, kh, kw)
    gx = col2im(gcols, x_shape, kh, kw, stride, padding, dilation)
    return gx, gw, gb


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, dilation: int = 1) -> Tensor:
    out, cols = conv2d_forward(x.data, weight.data, None if bias is None else bias.data,
                               stride, padding, dilation)

    def backward(g):
        gx, gw, gb = conv2d_backward(g, cols, x.shape, weight.data, stride, padding, dilation)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_op(out, parents, backward)


# ---------------------------------------------------------------------------------
# finite-difference gradient check
# ---------------------------------------------------------------------------------

class GradCheckError(RuntimeError):
    """A gradient (analytic or numeric) was not finite."""


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], eps: float = 1e-5,
               seed: int = 0, max_coords: int = 10_000, sample: int = 1_000,
               skip: Callable[[int, tuple], bool] | None = None) -> float:
    """Max relative error between backward gradients and central differences.

    ``fn`` maps input tensors to any tensor; it is reduced to a scalar through a
    fixed random projection.  When the inputs hold more than ``max_coords``
    coordinates in total, a seeded subsample of ``sample`` coordinates is checked.
    ``skip(input_index, coord)`` can exclude coordinates sitting on a kink.
    """
    if get_dtype() != np.float64:
        raise RuntimeError("grad_check requires 64-bit precision mode")
    # salted so the projection never coincides with inputs drawn from the same seed
    rng = np.random.default_rng([seed, 0x5EED])
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*tensors)
    proj = rng.standard_normal(out.shape)
    out.backward(proj)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    def value() -> float:
        with no_grad():
            res = fn(*[Tensor(a) for a in arrays])
        return float((res.data * proj).sum())

    coords = [(i, c) for i, a in enumerate(arrays) for c in np.ndindex(a.shape)]
    if len(coords) > max_coords:
        pick = rng.choice(len(coords), size=sample, replace=False)
        coords = [coords[k] for k in sorted(pick)]

    worst = 0.0
    for i, c in coords:
        if skip is not None and skip(i, c):
            continue
        old = arrays[i][c]
        arrays[i][c] = old + eps
        fp = value()
        arrays[i][c] = old - eps
        fm = value()
        arrays[i][c] = old
        numeric = (fp - fm) / (2 * eps)
        a = float(analytic[i][c])
        if not (np.isfinite(a) and np.isfinite(numeric)):
            raise GradCheckError(f"non-finite gradient at input {i} coordinate {c}: "
                                 f"analytic={a}, numeric={numeric}")
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
