"""Dense float32 tensors with a reverse-mode tape.

Backward rules are written with the same differentiable ops as the forward
pass, so gradients can themselves be differentiated (``grad(...,
create_graph=True)``). Hessian-vector products in :mod:`fpqlab.probes` rely
on this.

Broadcasting is deliberately narrow: a binary op's output shape must equal
the shape of one of its operands, and the other operand must broadcast onto
it under numpy rules. Anything else is a :class:`ShapeError`.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float32

_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes violate an operator's contract."""

    def __init__(self, op: str, detail: str):
        super().__init__(f"{op}: {detail}")
        self.op = op
        self.detail = detail


class NonFiniteError(FloatingPointError):
    """A NaN or Inf reached a graph boundary."""

    def __init__(self, where: str):
        super().__init__(f"non-finite values in {where}")
        self.where = where


@contextlib.contextmanager
def set_grad_enabled(enabled: bool):
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = enabled
    try:
        yield
    finally:
        _grad_enabled = prev


def no_grad():
    return set_grad_enabled(False)


def is_grad_enabled() -> bool:
    return _grad_enabled


def _check_finite(data: np.ndarray, where: str) -> None:
    if not np.isfinite(data).all():
        raise NonFiniteError(where)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=DTYPE)
        _check_finite(arr, "tensor input")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- construction -----------------------------------------------------
    @classmethod
    def _make(cls, data: np.ndarray, parents: tuple, backward: Callable, op: str) -> "Tensor":
        # Finiteness is checked where data enters (constructor) and at the
        # loss in backward(); per-op checks cost ~15% of a training step.
        data = np.asarray(data, dtype=DTYPE)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        track = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = parents if track else ()
        out._backward = backward if track else None
        return out

    # -- introspection ----------------------------------------------------
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
        if self.data.size != 1:
            raise ShapeError("item", f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        out.op = "detach"
        return out

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.shape[0]

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
        return neg(self)

    def __pow__(self, k):
        return power(self, k)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def relu(self):
        return relu(self)

    def tanh(self):
        return tanh(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def square(self):
        return square(self)

    def backward(self, grad=None):
        backward(self, grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _const(arr: np.ndarray) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(arr, dtype=DTYPE)
    out.grad = None
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    out.op = "const"
    return out


# ---------------------------------------------------------------------------
# broadcasting helpers
# ---------------------------------------------------------------------------

def _binary_shape(op: str, a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    try:
        out = np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(op, f"cannot combine shapes {a} and {b}") from None
    if out != a and out != b:
        raise ShapeError(op, f"shapes {a} and {b} would both broadcast (to {out})")
    return out


def broadcast_to(x: Tensor, shape: tuple) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    try:
        data = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError("broadcast_to", f"{x.shape} -> {shape}") from None

    def bw(g):
        return (sum_to(g, x.shape),)

    return Tensor._make(data, (x,), bw, "broadcast_to")


def sum_to(x: Tensor, shape: tuple) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(shape) if n == 1 and x.shape[i + lead] != 1
    )
    data = x.data.sum(axis=axes, keepdims=True)
    if lead:
        data = data.reshape(data.shape[lead:])

    def bw(g):
        return (broadcast_to(g, x.shape),)

    return Tensor._make(data, (x,), bw, "sum_to")


def _unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    return g if g.shape == shape else sum_to(g, shape)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("add", a.shape, b.shape)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("sub", a.shape, b.shape)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(neg(g), b.shape)

    return Tensor._make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("mul", a.shape, b.shape)

    def bw(g):
        ga = _unbroadcast(g * b, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shape("div", a.shape, b.shape)

    def bw(g):
        ga = _unbroadcast(g / b, a.shape) if a.requires_grad else None
        gb = _unbroadcast(neg(g * a) / (b * b), b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(a.data / b.data, (a, b), bw, "div")


def neg(x) -> Tensor:
    x = as_tensor(x)
    return Tensor._make(-x.data, (x,), lambda g: (neg(g),), "neg")


def power(x, k: float) -> Tensor:
    x = as_tensor(x)
    k = float(k)

    def bw(g):
        return (g * (k * power(x, k - 1.0)),)

    return Tensor._make(x.data ** DTYPE(k), (x,), bw, "pow")


def square(x) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        return (g * (2.0 * x),)

    return Tensor._make(x.data * x.data, (x,), bw, "square")


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    if (x.data < 0).any():
        raise NonFiniteError("sqrt of negative input")

    def bw(g):
        return (g / (2.0 * out),)

    out = Tensor._make(np.sqrt(x.data), (x,), bw, "sqrt")
    return out


def exp(x) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        return (g * out,)

    out = Tensor._make(np.exp(x.data), (x,), bw, "exp")
    return out


def log(x) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        return (g / x,)

    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(x.data)
    return Tensor._make(data, (x,), bw, "log")


def tanh(x) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        return (g * (1.0 - out * out),)

    out = Tensor._make(np.tanh(x.data), (x,), bw, "tanh")
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        return (g * (out * (1.0 - out)),)

    out = Tensor._make(0.5 * (1.0 + np.tanh(0.5 * x.data)), (x,), bw, "sigmoid")
    return out


def softplus(x, beta: float = 1.0) -> Tensor:
    """log(1 + exp(beta * x)) / beta, a smooth stand-in for relu."""
    x = as_tensor(x)

    def bw(g):
        return (g * sigmoid(x * beta),)

    return Tensor._make(np.logaddexp(0.0, beta * x.data) / beta, (x,), bw, "softplus")


def relu(x) -> Tensor:
    # subgradient at 0 is 0
    x = as_tensor(x)
    mask = x.data > 0

    def bw(g):
        return (g * _const(mask),)

    return Tensor._make(np.where(mask, x.data, 0.0), (x,), bw, "relu")


def mask_mul(x, mask: np.ndarray) -> Tensor:
    """Multiply by a constant array (no gradient flows into ``mask``)."""
    return mul(x, _const(mask))


# ---------------------------------------------------------------------------
# shape ops and reductions
# ---------------------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {x.shape} into {tuple(shape)}") from None

    def bw(g):
        return (reshape(g, x.shape),)

    return Tensor._make(data, (x,), bw, "reshape")


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (transpose(g, inv),)

    return Tensor._make(np.transpose(x.data, axes), (x,), bw, "transpose")


def _norm_axes(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    kept = tuple(1 if i in axes else n for i, n in enumerate(x.shape))

    def bw(g):
        return (broadcast_to(reshape(g, kept), x.shape),)

    data = x.data.sum(axis=axes, keepdims=keepdims, dtype=np.float64)
    return Tensor._make(data, (x,), bw, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return sum_(x, axes, keepdims) * (1.0 / count)


def var(x, axis=None, keepdims: bool = False) -> Tensor:
    """Population variance (divides by the element count)."""
    x = as_tensor(x)
    centered = x - mean(x, axis, keepdims=True)
    return mean(square(centered), axis, keepdims)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul", f"expected 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", f"inner dims differ: {a.shape} @ {b.shape}")

    def bw(g):
        ga = matmul(g, transpose(b)) if a.requires_grad else None
        gb = matmul(transpose(a), g) if b.requires_grad else None
        return ga, gb

    return Tensor._make(a.data @ b.data, (a, b), bw, "matmul")


# ---------------------------------------------------------------------------
# convolution via patch extraction
# ---------------------------------------------------------------------------

def conv_out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _im2col_np(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    n, c, h, w = x.shape
    oh, ow = conv_out_size(h, kh, stride, pad), conv_out_size(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, : stride * (oh - 1) + 1 : stride, : stride * (ow - 1) + 1 : stride]
    # (n, c, oh, ow, kh, kw) -> (n, oh, ow, c, kh, kw)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c * kh * kw)


def _col2im_np(cols: np.ndarray, xshape: tuple, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    n, c, h, w = xshape
    oh, ow = conv_out_size(h, kh, stride, pad), conv_out_size(w, kw, stride, pad)
    g = cols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += g[:, :, i, j]
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return out


def im2col(x, kh: int, kw: int, stride: int = 1, pad: int = 0) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("im2col", f"expected NCHW input, got {x.shape}")
    oh = conv_out_size(x.shape[2], kh, stride, pad)
    ow = conv_out_size(x.shape[3], kw, stride, pad)
    if oh < 1 or ow < 1:
        raise ShapeError("conv2d", f"kernel {kh}x{kw} does not fit input {x.shape[2:]} with pad {pad}")
    xshape = x.shape

    def bw(g):
        return (col2im(g, xshape, kh, kw, stride, pad),)

    return Tensor._make(_im2col_np(x.data, kh, kw, stride, pad), (x,), bw, "im2col")


def col2im(cols, xshape: tuple, kh: int, kw: int, stride: int = 1, pad: int = 0) -> Tensor:
    cols = as_tensor(cols)

    def bw(g):
        return (im2col(g, kh, kw, stride, pad),)

    return Tensor._make(_col2im_np(cols.data, xshape, kh, kw, stride, pad), (cols,), bw, "col2im")


def conv2d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d", f"expected 4-D input and kernel, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", f"input channels {x.shape[1]} != kernel channels {w.shape[1]}")
    n, _, h, wd = x.shape
    o, _, kh, kw = w.shape
    cols = im2col(x, kh, kw, stride, padding)
    oh, ow = conv_out_size(h, kh, stride, padding), conv_out_size(wd, kw, stride, padding)
    y = matmul(cols, transpose(reshape(w, (o, -1))))
    return transpose(reshape(y, (n, oh, ow, o)), (0, 3, 1, 2))


# ---------------------------------------------------------------------------
# composite layers and losses
# ---------------------------------------------------------------------------

def _channel_shape(x: Tensor, axis: int = 1) -> tuple:
    return tuple(n if i == axis else 1 for i, n in enumerate(x.shape))


def scale_shift(x, gamma, beta, axis: int = 1) -> Tensor:
    """Per-channel affine map ``gamma * x + beta`` along ``axis``."""
    x = as_tensor(x)
    cs = _channel_shape(x, axis)
    if as_tensor(gamma).size != x.shape[axis] or as_tensor(beta).size != x.shape[axis]:
        raise ShapeError("scale_shift", f"{x.shape[axis]} channels vs gamma {as_tensor(gamma).shape}")
    return x * reshape(gamma, cs) + reshape(beta, cs)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    shifted = x.data - m
    data = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - exp(out) * sum_(g, axis, keepdims=True),)

    out = Tensor._make(data, (x,), bw, "log_softmax")
    return out


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"label out of range [0, {num_classes})")
    out = np.zeros((labels.size, num_classes), dtype=DTYPE)
    out[np.arange(labels.size), labels] = 1.0
    return out


def cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy over the batch."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError("cross_entropy", f"expected (batch, classes) logits, got {logits.shape}")
    labels = np.atleast_1d(np.asarray(labels))
    if labels.shape[0] != logits.shape[0]:
        raise ShapeError("cross_entropy", f"{labels.shape[0]} labels for batch {logits.shape[0]}")
    oh = _const(one_hot(labels, logits.shape[1]))
    return neg(mean(sum_(oh * log_softmax(logits, 1), 1)))


# ---------------------------------------------------------------------------
# operator registry
# ---------------------------------------------------------------------------

OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "conv2d": conv2d,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "relu": relu,
    "tanh": tanh,
    "softplus": softplus,
    "sigmoid": sigmoid,
    "exp": exp,
    "log": log,
    "mean": mean,
    "sum": sum_,
    "var": var,
    "scale_shift": scale_shift,
    "softmax_cross_entropy": cross_entropy,
    "square": square,
    "sqrt": sqrt,
    "reshape": reshape,
    "transpose": transpose,
}


def forward_op(kind: str, inputs: Sequence, **kwargs) -> Tensor:
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown operator {kind!r}; known: {sorted(OPS)}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def _toposort(root: Tensor) -> list[Tensor]:
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
    return order


def _backprop(root: Tensor, seed: Tensor, create_graph: bool) -> tuple[list[Tensor], dict[int, Tensor]]:
    order = _toposort(root)
    grads: dict[int, Tensor] = {id(root): seed}
    with set_grad_enabled(create_graph):
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg
    return order, grads


def backward(loss: Tensor, grad=None) -> None:
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf's ``.grad``."""
    if grad is None:
        if loss.size != 1:
            raise ShapeError("backward", f"loss must be scalar, got shape {loss.shape}")
        seed = _const(np.ones(loss.shape, dtype=DTYPE))
    else:
        seed = _const(np.broadcast_to(np.asarray(grad, dtype=DTYPE), loss.shape))
    if not loss.requires_grad:
        return
    _check_finite(loss.data, "loss")
    order, grads = _backprop(loss, seed, create_graph=False)
    for node in order:
        if node.is_leaf and id(node) in grads:
            g = grads[id(node)].data
            node.grad = g.copy() if node.grad is None else node.grad + g


def grad(output: Tensor, inputs: Iterable[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of a scalar ``output`` w.r.t. ``inputs`` as tensors.

    With ``create_graph=True`` the returned tensors carry their own tape, so
    they can be differentiated again. Unused inputs get zeros.
    """
    inputs = list(inputs)
    if output.size != 1:
        raise ShapeError("grad", f"output must be scalar, got shape {output.shape}")
    if not output.requires_grad:
        return [_const(np.zeros_like(t.data)) for t in inputs]
    seed = _const(np.ones(output.shape, dtype=DTYPE))
    _, grads = _backprop(output, seed, create_graph)
    return [grads.get(id(t), _const(np.zeros_like(t.data))) for t in inputs]
