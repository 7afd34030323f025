"""Dense float64 tensors with reverse-mode autodiff and grouped-rate SGD.

Only the operations needed by the extractor, the cosine heads and the
training objectives are provided. Every differentiable result keeps a
reference to its inputs; :func:`backward` linearises that graph into a
:class:`Tape` (topological order) and walks it in reverse.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, ContractViolation, DegenerateInputError

GROUPS = ("fast", "slow", "frozen")

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording, e.g. for frozen teacher forward passes."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op})"

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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A named trainable leaf with a learning-rate group.

    ``frozen`` parameters never receive gradients and are skipped by
    :func:`sgd_step`.
    """

    __slots__ = ("name", "_group", "velocity")

    def __init__(self, name: str, data, group: str = "slow"):
        super().__init__(data)
        self.name = name
        self.group = group
        self.grad = np.zeros_like(self.data)
        self.velocity = np.zeros_like(self.data)

    @property
    def group(self) -> str:
        return self._group

    @group.setter
    def group(self, value: str) -> None:
        if value not in GROUPS:
            raise ConfigurationError(f"unknown parameter group {value!r}")
        self._group = value
        self.requires_grad = value != "frozen"

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, group={self.group})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> np.ndarray:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ConfigurationError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# --- elementwise ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, "add", (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _result(a.data - b.data, "sub", (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, "mul", (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    if np.any(b.data == 0):
        raise DegenerateInputError("div: zero denominator")
    out = a.data / b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g / b.data, a.shape))
        _accumulate(b, _unbroadcast(-g * out / b.data, b.shape))

    return _result(out, "div", (a, b), bw)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)

    def bw(g):
        _accumulate(a, g * c)

    return _result(a.data * c, "scale", (a,), bw)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0

    def bw(g):
        _accumulate(a, g * mask)

    return _result(np.maximum(a.data, 0.0), "relu", (a,), bw)


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DegenerateInputError("log: non-positive input")

    def bw(g):
        _accumulate(a, g / a.data)

    return _result(np.log(a.data), "log", (a,), bw)


def softplus(a) -> Tensor:
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    sig = 1.0 / (1.0 + np.exp(-a.data))

    def bw(g):
        _accumulate(a, g * sig)

    return _result(out, "softplus", (a,), bw)


# --- reductions ------------------------------------------------------------

def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape).copy())

    return _result(np.asarray(a.data.sum(axis=axis)), "sum", (a,), bw)


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    if n == 0:
        raise DegenerateInputError("mean of an empty tensor")

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g / n, a.shape).copy())

    return _result(np.asarray(a.data.mean(axis=axis)), "mean", (a,), bw)


def sqnorm(a, axis: int | None = None) -> Tensor:
    """Sum of squares, over everything or along ``axis``."""
    a = as_tensor(a)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        _accumulate(a, 2.0 * g * a.data)

    return _result(np.asarray((a.data * a.data).sum(axis=axis)), "sqnorm", (a,), bw)


def norm(a, axis: int = -1) -> Tensor:
    """Euclidean norm along ``axis``; the subgradient at zero is taken as 0."""
    a = as_tensor(a)
    n = np.sqrt((a.data * a.data).sum(axis=axis))

    def bw(g):
        nk = np.expand_dims(n, axis)
        safe = np.where(nk > 0, nk, 1.0)
        _accumulate(a, np.where(nk > 0, np.expand_dims(g, axis) * a.data / safe, 0.0))

    return _result(n, "norm", (a,), bw)


# --- linear algebra / normalisation ----------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ConfigurationError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def bw(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _result(a.data @ b.data, "matmul", (a, b), bw)


def l2_normalize(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    n = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    if np.any(n == 0):
        raise DegenerateInputError("l2_normalize: zero-norm slice")
    y = a.data / n

    def bw(g):
        _accumulate(a, (g - y * (g * y).sum(axis=axis, keepdims=True)) / n)

    return _result(y, "l2_normalize", (a,), bw)


def softmax(a) -> Tensor:
    """Row-wise softmax over the last axis."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        _accumulate(a, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _result(y, "softmax", (a,), bw)


def log_softmax(a) -> Tensor:
    """Row-wise log(softmax(a)) computed without forming tiny probabilities."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = np.exp(out)

    def bw(g):
        _accumulate(a, g - y * g.sum(axis=-1, keepdims=True))

    return _result(out, "log_softmax", (a,), bw)


# --- spatial -------------------------------------------------------------

def conv2d(x, w) -> Tensor:
    """3x3, stride 1, zero 'same' padding. x: (B,H,W,Cin), w: (3,3,Cin,Cout)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.shape[:2] != (3, 3) or w.data.ndim != 4 or w.shape[2] != x.shape[3]:
        raise ConfigurationError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    B, H, W, _ = x.shape
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.zeros((B, H, W, w.shape[3]))
    for i in range(3):
        for j in range(3):
            out += xp[:, i:i + H, j:j + W, :] @ w.data[i, j]

    def bw(g):
        if w.requires_grad:
            gw = np.zeros_like(w.data)
            for i in range(3):
                for j in range(3):
                    gw[i, j] = np.tensordot(xp[:, i:i + H, j:j + W, :], g, axes=([0, 1, 2], [0, 1, 2]))
            _accumulate(w, gw)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(3):
                for j in range(3):
                    gxp[:, i:i + H, j:j + W, :] += g @ w.data[i, j].T
            _accumulate(x, gxp[:, 1:-1, 1:-1, :])

    return _result(out, "conv2d", (x, w), bw)


def meanpool(x) -> Tensor:
    """2x2 mean pooling with stride 2 on (B,H,W,C); H and W must be even."""
    x = as_tensor(x)
    B, H, W, C = x.shape
    if H % 2 or W % 2:
        raise ConfigurationError(f"meanpool: spatial size {H}x{W} is not even")
    out = x.data.reshape(B, H // 2, 2, W // 2, 2, C).mean(axis=(2, 4))

    def bw(g):
        up = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) / 4.0
        _accumulate(x, up)

    return _result(out, "meanpool", (x,), bw)


# --- structural ------------------------------------------------------------

def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ConfigurationError(f"reshape: cannot view {a.shape} as {shape}") from None

    def bw(g):
        _accumulate(a, g.reshape(a.shape))

    return _result(out, "reshape", (a,), bw)


def transpose(a) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        _accumulate(a, g.T)

    return _result(a.data.T.copy(), "transpose", (a,), bw)


def columns(a, start: int, stop: int) -> Tensor:
    """Column slice ``a[:, start:stop]`` of a matrix."""
    a = as_tensor(a)
    if a.data.ndim != 2 or not 0 <= start <= stop <= a.shape[1]:
        raise ConfigurationError(f"columns: bad range [{start}, {stop}) for shape {a.shape}")

    def bw(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        _accumulate(a, full)

    return _result(a.data[:, start:stop].copy(), "columns", (a,), bw)


def rows(a, start: int, stop: int) -> Tensor:
    """Row slice ``a[start:stop]`` along the first axis."""
    a = as_tensor(a)
    if not 0 <= start <= stop <= a.shape[0]:
        raise ConfigurationError(f"rows: bad range [{start}, {stop}) for shape {a.shape}")

    def bw(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        _accumulate(a, full)

    return _result(a.data[start:stop].copy(), "rows", (a,), bw)


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ConfigurationError(f"concat: incompatible shapes {[p.shape for p in parts]}") from None
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def bw(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(p, g[tuple(idx)])

    return _result(out, "concat", parts, bw)


_OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "scale": scale,
    "relu": relu,
    "conv2d": conv2d,
    "meanpool": meanpool,
    "l2_normalize": l2_normalize,
    "softmax": softmax,
    "log": log,
    "sum": sum,
    "mean": mean,
    "elementwise-mul": mul,
    "sub": sub,
    "sqnorm": sqnorm,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a primitive by name."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ConfigurationError(f"unknown op {kind!r}") from None
    return fn(*inputs, **kwargs)


# --- reverse pass ----------------------------------------------------------

class Tape:
    """Operations reachable from a root, in topological (execution) order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
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
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into every reachable non-frozen Parameter."""
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = Tape.from_root(loss)
    for node in tape:
        if not node.is_leaf:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in tape:
        if not node.is_leaf:
            node.grad = None


def finite_diff_grad(loss_fn: Callable[[], Tensor], param: Parameter, step: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of ``loss_fn()`` with respect to ``param``."""
    if step <= 0:
        raise ConfigurationError("finite-difference step must be positive")
    out = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    g = out.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(loss_fn().data)
            flat[i] = orig - step
            fm = float(loss_fn().data)
            flat[i] = orig
            g[i] = (fp - fm) / (2.0 * step)
    return out


def sgd_step(params: Iterable[Parameter], lr_fast: float, lr_slow: float, momentum: float = 0.9) -> None:
    """Heavy-ball SGD: v <- m*v + grad; value <- value - lr_group*v. Clears grads."""
    if lr_fast < 0 or lr_slow < 0:
        raise ConfigurationError("learning rates must be non-negative")
    if not 0 <= momentum < 1:
        raise ConfigurationError("momentum must lie in [0, 1)")
    rates = {"fast": lr_fast, "slow": lr_slow}
    for p in params:
        if p.group == "frozen":
            continue
        p.velocity = momentum * p.velocity + p.grad
        p.data -= rates[p.group] * p.velocity
        p.zero_grad()


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()
