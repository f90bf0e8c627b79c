"""Dense float64 tensors with a reverse-mode differentiation tape.

A :class:`Tape` records every operation whose inputs live on it. Tensors
without a node are constants: operations on them are plain numpy arithmetic
and nothing is recorded, which is how inference and teacher forwards run.

Custom backward rules are registered per call through :func:`custom_vjp`;
the quantizers use this to swap the derivative of ``round`` for a surrogate.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "Node",
    "Gradients",
    "ShapeError",
    "DomainError",
    "tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "relu",
    "tanh",
    "exp",
    "log",
    "clamp",
    "elementwise",
    "matmul",
    "add_bias",
    "reshape",
    "conv2d",
    "sum",
    "mean",
    "max_pool2d",
    "reduce",
    "log_softmax",
    "custom_vjp",
    "backward",
    "finite_difference",
    "round_half_even",
]


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


def round_half_even(a: np.ndarray) -> np.ndarray:
    # np.rint rounds half to even on every platform.
    return np.rint(a)


@dataclass(eq=False)
class Node:
    """One recorded operation. Leaves have no inputs and no rule."""

    index: int
    name: str
    shape: tuple
    inputs: tuple = ()
    saved: tuple = ()
    rule: Optional[Callable] = None

    def __repr__(self) -> str:
        return f"Node({self.index}, {self.name}, shape={self.shape})"


class Tape:
    """Append-only record of operations, confined to one thread."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def _record(self, name, shape, inputs=(), saved=(), rule=None) -> Node:
        node = Node(len(self.nodes), name, tuple(shape), tuple(inputs), tuple(saved), rule)
        self.nodes.append(node)
        return node

    def leaf(self, data, name: str = "leaf") -> "Tensor":
        t = Tensor(data)
        t.node = self._record(name, t.shape)
        t.tape = self
        return t

    def __len__(self) -> int:
        return len(self.nodes)


class Tensor:
    """A dense array of float64 values, optionally recorded on a tape."""

    __array_priority__ = 100

    def __init__(self, data, node: Optional[Node] = None, tape: Optional[Tape] = None):
        self.data = np.array(data, dtype=np.float64, order="C")
        self.node = node
        self.tape = tape

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        tag = f", node={self.node.index}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


def _tape_of(*ts: Tensor) -> Optional[Tape]:
    tape = None
    for t in ts:
        if t.node is None:
            continue
        if tape is None:
            tape = t.tape
        elif t.tape is not tape:
            raise ValueError("operands are recorded on different tapes")
    return tape


def _emit(name, out: np.ndarray, inputs: Sequence[Tensor], saved=(), rule=None) -> Tensor:
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(out)
    in_nodes = tuple(t.node for t in inputs)
    node = tape._record(name, out.shape, in_nodes, saved, rule)
    return Tensor(out, node=node, tape=tape)


def _is_scalar(t: Tensor) -> bool:
    return t.data.size == 1 and t.ndim <= 1


def _check_pair(a: Tensor, b: Tensor, opname: str) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"{opname}: shape mismatch {a.shape} vs {b.shape}")


def _fit(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Collapse a gradient back onto a scalar operand."""
    if grad.shape == shape:
        return grad
    return np.full(shape, grad.sum())


# --- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _check_pair(a, b, "add")
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b),
                 rule=lambda s, g: (_fit(g, sa), _fit(g, sb)))


def sub(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _check_pair(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b),
                 rule=lambda s, g: (_fit(g, sa), _fit(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _check_pair(a, b, "mul")

    def rule(saved, g):
        x, y = saved
        return _fit(g * y, x.shape), _fit(g * x, y.shape)

    return _emit("mul", a.data * b.data, (a, b), saved=(a.data, b.data), rule=rule)


def div(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _check_pair(a, b, "div")
    if np.any(b.data == 0):
        raise DomainError("div: division by zero")

    def rule(saved, g):
        x, y = saved
        return _fit(g / y, x.shape), _fit(-g * x / (y * y), y.shape)

    return _emit("div", a.data / b.data, (a, b), saved=(a.data, b.data), rule=rule)


def neg(a) -> Tensor:
    a = tensor(a)
    return _emit("neg", -a.data, (a,), rule=lambda s, g: (-g,))


def relu(a) -> Tensor:
    a = tensor(a)
    mask = a.data > 0
    return _emit("relu", np.where(mask, a.data, 0.0), (a,), saved=(mask,),
                 rule=lambda s, g: (g * s[0],))


def tanh(a) -> Tensor:
    a = tensor(a)
    y = np.tanh(a.data)
    return _emit("tanh", y, (a,), saved=(y,), rule=lambda s, g: (g * (1.0 - s[0] ** 2),))


def exp(a) -> Tensor:
    a = tensor(a)
    y = np.exp(a.data)
    if not np.all(np.isfinite(y)):
        raise DomainError("exp: overflow")
    return _emit("exp", y, (a,), saved=(y,), rule=lambda s, g: (g * s[0],))


def log(a) -> Tensor:
    a = tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log: non-positive input")
    return _emit("log", np.log(a.data), (a,), saved=(a.data,), rule=lambda s, g: (g / s[0],))


def clamp(a, lo: float, hi: float) -> Tensor:
    a = tensor(a)
    if lo > hi:
        raise ValueError(f"clamp: lo={lo} > hi={hi}")
    passed = (a.data >= lo) & (a.data <= hi)
    return _emit("clamp", np.clip(a.data, lo, hi), (a,), saved=(passed,),
                 rule=lambda s, g: (g * s[0],))


_UNARY = {"neg": neg, "relu": relu, "tanh": tanh, "exp": exp, "log": log}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op_kind: str, a, b=None, *, lo=None, hi=None) -> Tensor:
    """Dispatch by name; ``clamp`` takes ``lo``/``hi`` keywords."""
    if op_kind in _BINARY:
        if b is None:
            raise ValueError(f"{op_kind} needs two operands")
        return _BINARY[op_kind](a, b)
    if op_kind in _UNARY:
        return _UNARY[op_kind](a)
    if op_kind == "clamp":
        return clamp(a, lo, hi)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


# --- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def rule(saved, g):
        x, y = saved
        return g @ y.T, x.T @ g

    return _emit("matmul", a.data @ b.data, (a, b), saved=(a.data, b.data), rule=rule)


def add_bias(a, bias) -> Tensor:
    """Add a bias vector along the second axis of ``a`` ([N,F] or [N,F,H,W])."""
    a, bias = tensor(a), tensor(bias)
    if bias.ndim != 1 or a.ndim < 2 or a.shape[1] != bias.shape[0]:
        raise ShapeError(f"add_bias: bias {bias.shape} does not fit {a.shape}")
    view = (1, -1) + (1,) * (a.ndim - 2)
    axes = (0,) + tuple(range(2, a.ndim))
    return _emit("add_bias", a.data + bias.data.reshape(view), (a, bias),
                 rule=lambda s, g: (g, g.sum(axis=axes)))


def reshape(a, shape) -> Tensor:
    a = tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {old} -> {shape}: {exc}") from None
    return _emit("reshape", out, (a,), rule=lambda s, g: (g.reshape(old),))


def _out_size(n: int, k: int, stride: int, padding: int, what: str) -> int:
    span = n + 2 * padding - k
    if span < 0 or span % stride:
        raise ShapeError(
            f"{what}: ({n}+2*{padding}-{k})/{stride}+1 is not a positive integer"
        )
    return span // stride + 1


def conv2d(x, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of [N,C,H,W] input with [F,C,kH,kW] kernel."""
    x, kernel = tensor(x), tensor(kernel)
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be >= 1 and padding >= 0")
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    n, c, h, w = x.shape
    f, _, kh, kw = kernel.shape
    oh = _out_size(h, kh, stride, padding, "conv2d height")
    ow = _out_size(w, kw, stride, padding, "conv2d width")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # windows: [N, C, OH, OW, kH, kW]
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    out = np.einsum("ncijkl,fckl->nfij", win, kernel.data, optimize=True)

    def rule(saved, g):
        win, k = saved
        dk = np.einsum("nfij,ncijkl->fckl", g, win, optimize=True)
        dxp = np.zeros(xp.shape)
        # scatter each kernel tap back; transposed convolution
        for a in range(kh):
            for b in range(kw):
                contrib = np.einsum("nfij,fc->ncij", g, k[:, :, a, b], optimize=True)
                dxp[:, :, a:a + stride * oh:stride, b:b + stride * ow:stride] += contrib
        dx = dxp[:, :, padding:padding + h, padding:padding + w]
        return dx, dk

    return _emit("conv2d", out, (x, kernel), saved=(win, kernel.data), rule=rule)


# --- reductions --------------------------------------------------------------

def _nonempty(a: Tensor, opname: str) -> None:
    if a.size == 0:
        raise ShapeError(f"{opname}: empty tensor")


def sum(a) -> Tensor:  # noqa: A001 - mirrors the op name
    a = tensor(a)
    _nonempty(a, "sum")
    shape = a.shape
    return _emit("sum", np.asarray(a.data.sum()), (a,),
                 rule=lambda s, g: (np.full(shape, float(g)),))


def mean(a) -> Tensor:
    a = tensor(a)
    _nonempty(a, "mean")
    shape, n = a.shape, a.size
    return _emit("mean", np.asarray(a.data.mean()), (a,),
                 rule=lambda s, g: (np.full(shape, float(g) / n),))


def max_pool2d(a, k: int, stride: Optional[int] = None) -> Tensor:
    a = tensor(a)
    _nonempty(a, "max_pool2d")
    stride = k if stride is None else stride
    if a.ndim != 4:
        raise ShapeError(f"max_pool2d: expected [N,C,H,W], got {a.shape}")
    n, c, h, w = a.shape
    oh = _out_size(h, k, stride, 0, "max_pool2d height")
    ow = _out_size(w, k, stride, 0, "max_pool2d width")
    win = np.lib.stride_tricks.sliding_window_view(a.data, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride].reshape(n, c, oh, ow, k * k)
    # argmax returns the first maximal element in row-major window order
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def rule(saved, g):
        (arg,) = saved
        dx = np.zeros((n, c, h, w))
        rows = (np.arange(oh) * stride)[None, None, :, None] + arg // k
        cols = (np.arange(ow) * stride)[None, None, None, :] + arg % k
        ni = np.arange(n)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        np.add.at(dx, (ni, ci, rows, cols), g)
        return (dx,)

    return _emit("max_pool2d", out, (a,), saved=(arg,), rule=rule)


def reduce(op_kind: str, a, k: Optional[int] = None, stride: Optional[int] = None) -> Tensor:
    if op_kind == "sum":
        return sum(a)
    if op_kind == "mean":
        return mean(a)
    if op_kind == "max_pool2d":
        if k is None:
            raise ValueError("max_pool2d needs a window size k")
        return max_pool2d(a, k, stride)
    raise ValueError(f"unknown reduction {op_kind!r}")


def log_softmax_array(h: np.ndarray) -> np.ndarray:
    z = h - h.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def log_softmax(a) -> Tensor:
    """Row-wise log-softmax over the last axis."""
    a = tensor(a)
    _nonempty(a, "log_softmax")
    y = log_softmax_array(a.data)

    def rule(saved, g):
        (y,) = saved
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _emit("log_softmax", y, (a,), saved=(y,), rule=rule)


# --- custom rules and the backward pass ---------------------------------------

def custom_vjp(forward: Callable, backward_rule: Callable, *inputs, name: str = "custom") -> Tensor:
    """Record ``forward(*arrays) -> (out, saved)`` with a user-supplied backward.

    ``backward_rule(saved, upstream)`` must return one gradient per input, each
    shaped like its input. Its result replaces the true derivative.
    """
    inputs = tuple(tensor(t) for t in inputs)
    out, saved = forward(*(t.data for t in inputs))
    out = np.asarray(out, dtype=np.float64)
    shapes = tuple(t.shape for t in inputs)
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(out)
    label = f"{name}#{len(tape)}"

    def rule(s, g):
        grads = backward_rule(s, g)
        if not isinstance(grads, (tuple, list)):
            grads = (grads,)
        if len(grads) != len(shapes):
            raise ShapeError(f"{label}: rule returned {len(grads)} gradients for {len(shapes)} inputs")
        fixed = []
        for gi, shp in zip(grads, shapes):
            gi = np.asarray(gi, dtype=np.float64)
            if gi.shape != shp:
                raise ShapeError(f"{label}: gradient shape {gi.shape} != input shape {shp}")
            fixed.append(gi)
        return tuple(fixed)

    return _emit(name, out, inputs, saved=saved, rule=rule)


class Gradients(dict):
    """Map from tape node to gradient tensor; also indexable by tensor."""

    def __getitem__(self, key):
        if isinstance(key, Tensor):
            key = key.node
        return dict.__getitem__(self, key)

    def __contains__(self, key):
        if isinstance(key, Tensor):
            key = key.node
        return dict.__contains__(self, key)


def backward(loss: Tensor) -> Gradients:
    """Reverse sweep from a scalar loss; every leaf on the tape gets an entry."""
    if loss.node is None:
        raise ValueError("backward: loss is not recorded on a tape")
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = loss.tape
    acc: dict[int, np.ndarray] = {loss.node.index: np.ones(loss.node.shape)}
    for node in reversed(tape.nodes[: loss.node.index + 1]):
        if node.rule is None:
            continue
        g = acc.pop(node.index, None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.rule(node.saved, g)):
            if inp is None:
                continue
            prev = acc.get(inp.index)
            acc[inp.index] = gi if prev is None else prev + gi
    grads = Gradients()
    for node in tape.nodes:
        if node.rule is None:
            g = acc.get(node.index)
            grads[node] = Tensor(np.zeros(node.shape) if g is None else g)
    return grads


def finite_difference(f: Callable[[Tensor], float], x, eps: float = 1e-3) -> Tensor:
    """Central differences of a scalar function, one coordinate at a time."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = np.array(tensor(x).data, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        up = _scalar(f(Tensor(base)))
        flat[i] = keep - eps
        down = _scalar(f(Tensor(base)))
        flat[i] = keep
        gflat[i] = (up - down) / (2 * eps)
    return Tensor(grad)


def _scalar(v) -> float:
    if isinstance(v, Tensor):
        v = v.data
    return float(np.asarray(v).reshape(-1)[0])
