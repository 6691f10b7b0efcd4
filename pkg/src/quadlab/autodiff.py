"""Dense float64 tensors with reverse-mode autodiff and Adam.

Every primitive records its parents and a closure that pushes the output
gradient back to them. ``backward`` walks the recorded graph in reverse
topological order. Inside ``no_grad()`` nothing is recorded.
"""
from __future__ import annotations

import contextlib
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

GELU_C = 0.7978845608
GELU_A = 0.044715
LOG_CLAMP = 1e-9
LN_EPS = 1e-6

_grad_enabled = True


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"non-finite values in tensor {name!r}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, name=self.name)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, name={self.name!r})"

    # operator sugar
    def __add__(self, other): return add(self, _wrap(other))
    def __radd__(self, other): return add(_wrap(other), self)
    def __sub__(self, other): return sub(self, _wrap(other))
    def __rsub__(self, other): return sub(_wrap(other), self)
    def __mul__(self, other): return mul(self, _wrap(other))
    def __rmul__(self, other): return mul(_wrap(other), self)
    def __neg__(self): return mul(self, Tensor(-1.0))
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, idx): return slice_(self, idx)

    def backward(self) -> None:
        backward(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], back, name: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{name} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = name
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = back
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _acc(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    # grads are never updated in place, so aliasing g is safe
    t.grad = g if t.grad is None else t.grad + g


# ---------------------------------------------------------------- primitives

def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError as e:
        raise DimensionError(f"add: cannot broadcast {a.shape} and {b.shape}") from e

    def back(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(g, b.shape))
    return _make(data, (a, b), back, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data - b.data
    except ValueError as e:
        raise DimensionError(f"sub: cannot broadcast {a.shape} and {b.shape}") from e

    def back(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(-g, b.shape))
    return _make(data, (a, b), back, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError as e:
        raise DimensionError(f"mul: cannot broadcast {a.shape} and {b.shape}") from e

    def back(g):
        _acc(a, _unbroadcast(g * b.data, a.shape))
        _acc(b, _unbroadcast(g * a.data, b.shape))
    return _make(data, (a, b), back, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, batch axes broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as e:
        raise DimensionError(f"matmul: incompatible batch shapes {a.shape} @ {b.shape}") from e

    def back(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))
    return _make(data, (a, b), back, "matmul")


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        _acc(x, p * (g - (g * p).sum(axis=-1, keepdims=True)))
    return _make(p, (x,), back, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def back(g):
        if gain.requires_grad:
            _acc(gain, _unbroadcast(g * xhat, gain.shape))
        if bias.requires_grad:
            _acc(bias, _unbroadcast(g, bias.shape))
        if x.requires_grad:
            gx = g * gain.data
            n = x.shape[-1]
            dx = inv / n * (n * gx - gx.sum(axis=-1, keepdims=True)
                            - xhat * (gx * xhat).sum(axis=-1, keepdims=True))
            _acc(x, dx)
    return _make(data, (x, gain, bias), back, "layer_norm")


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    v = x.data
    u = GELU_C * (v + GELU_A * (v * v * v))
    t = np.tanh(u)
    data = 0.5 * v * (1.0 + t)

    def back(g):
        du = GELU_C * (1.0 + 3.0 * GELU_A * v * v)
        _acc(x, g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du))
    return _make(data, (x,), back, "gelu")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def back(g):
        _acc(x, g * mask)
    return _make(np.where(mask, x.data, 0.0), (x,), back, "relu")


def abs_(x: Tensor) -> Tensor:
    sign = np.sign(x.data)

    def back(g):
        _acc(x, g * sign)
    return _make(np.abs(x.data), (x,), back, "abs")


def log_clamped(x: Tensor, floor: float = LOG_CLAMP) -> Tensor:
    """log(max(x, floor)); zero gradient where the clamp is active."""
    live = x.data > floor
    safe = np.where(live, x.data, floor)

    def back(g):
        _acc(x, np.where(live, g / safe, 0.0))
    return _make(np.log(safe), (x,), back, "log")


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"token id out of range for vocabulary of size {n}")
    data = table.data[ids]

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        _acc(table, gt)
    return _make(data, (table,), back, "embedding")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat: {[t.shape for t in tensors]} along {axis}") from e
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        for t, part in zip(tensors, np.split(g, sizes, axis=axis)):
            _acc(t, part)
    return _make(data, tuple(tensors), back, "concat")


def slice_(x: Tensor, idx) -> Tensor:
    data = x.data[idx]

    def back(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        _acc(x, gx)
    return _make(np.array(data, copy=True), (x,), back, "slice")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    def back(g):
        _acc(x, g.reshape(x.shape))
    return _make(x.data.reshape(shape), (x,), back, "reshape")


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = np.argsort(axes)

    def back(g):
        _acc(x, np.transpose(g, inv))
    return _make(np.transpose(x.data, axes), (x,), back, "transpose")


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _acc(x, np.broadcast_to(g, x.shape).copy())
    return _make(np.asarray(data), (x,), back, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.mean(axis=axis, keepdims=keepdims)
    n = x.data.size // max(np.asarray(data).size, 1)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _acc(x, np.broadcast_to(g / n, x.shape).copy())
    return _make(np.asarray(data), (x,), back, "mean")


def cross_entropy_soft(logits: Tensor, target) -> Tensor:
    """Mean over rows of -sum_j target_j log(softmax(logits)_j).

    ``target`` is a constant probability matrix. The log argument is
    clamped at LOG_CLAMP; clamped entries contribute no gradient.
    """
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if logits.ndim != 2 or t.shape != logits.shape:
        raise DimensionError(f"cross_entropy_soft: logits {logits.shape} vs target {t.shape}")
    if logits.shape[1] < 2:
        raise DimensionError("cross_entropy_soft needs at least two classes")
    if np.any(np.abs(t.sum(axis=1) - 1.0) > 1e-6) or np.any(t < 0):
        raise ValueError("cross_entropy_soft: target rows must be probability distributions")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    live = p > LOG_CLAMP
    logp = np.log(np.where(live, p, LOG_CLAMP))
    b = logits.shape[0]
    data = np.asarray(-(t * logp).sum() / b)

    def back(g):
        gp = np.where(live, -t / np.where(live, p, 1.0), 0.0)
        dz = p * (gp - (p * gp).sum(axis=1, keepdims=True))
        _acc(logits, dz * (g / b))
    return _make(data, (logits,), back, "cross_entropy_soft")


# ---------------------------------------------------------------- backward

def _topo(root: Tensor) -> list[Tensor]:
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Leaf grads accumulate across calls; intermediate grads are rebuilt.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo(loss)
    for node in order:
        if node._backward is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in order:
        if node._backward is not None:
            node.grad = None


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = np.zeros_like(p.data)


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None],
              state: AdamState, lr: float) -> AdamState:
    """One bias-corrected Adam update; parameter arrays are replaced, not mutated."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if len(params) != len(grads):
        raise DimensionError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise DimensionError("Adam state does not match parameter list")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise DimensionError(f"Adam: gradient shape {g.shape} vs param {p.shape}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        mhat = state.m[i] / c1
        vhat = state.v[i] / c2
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + state.eps)
    return state


# ---------------------------------------------------------------- grad check

def finite_difference(fn: Callable[[], float], param: Tensor, index, h: float = 1e-5) -> float:
    """Central difference of ``fn`` w.r.t. one entry of ``param``."""
    old = param.data.copy()
    bumped = old.copy()
    bumped[index] = old[index] + h
    param.data = bumped
    fp = fn()
    bumped = old.copy()
    bumped[index] = old[index] - h
    param.data = bumped
    fm = fn()
    param.data = old
    return (fp - fm) / (2.0 * h)


def relative_error(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def gradient_check(loss_fn: Callable[[], Tensor], params: dict[str, Tensor],
                   h: float = 1e-5, max_entries: int | None = None,
                   rng: np.random.Generator | None = None) -> float:
    """Max relative error between backward() and central differences.

    With ``max_entries`` set, that many random coordinates are checked per
    tensor; otherwise every coordinate is.
    """
    plist = list(params.values())
    zero_grads(plist)
    backward(loss_fn())
    analytic = {k: p.grad.copy() for k, p in params.items()}

    def value() -> float:
        with no_grad():
            return loss_fn().item()

    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for k, p in params.items():
        idxs = list(np.ndindex(p.shape))
        if max_entries is not None and len(idxs) > max_entries:
            pick = rng.choice(len(idxs), size=max_entries, replace=False)
            idxs = [idxs[i] for i in pick]
        for idx in idxs:
            num = finite_difference(value, p, idx, h)
            worst = max(worst, relative_error(analytic[k][idx], num))
    return worst


# ---------------------------------------------------------------- checkpoints

MAGIC = b"QUAD"
VERSION = 1


def save_tensors(path, tensors: dict[str, np.ndarray | Tensor]) -> None:
    """Flat little-endian checkpoint: magic, version, count, then records."""
    with open(path, "wb") as f:
        f.write(dump_tensors(tensors))


def dump_tensors(tensors: dict[str, np.ndarray | Tensor]) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, t in tensors.items():
        arr = np.array(t.data if isinstance(t, Tensor) else t, dtype="<f8", order="C")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        return parse_tensors(f.read())


def parse_tensors(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise ValueError("not a QUAD checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}Q", buf, pos)
        pos += 8 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(dims)
        pos += 8 * size
        out[name] = arr.astype(np.float64)
    return out
