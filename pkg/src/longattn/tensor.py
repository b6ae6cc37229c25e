"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the primitives the decoder model needs are provided. Storage is a
C-contiguous numpy array; every op returns a fresh array (no aliasing).

Usage::

    with Tape() as tape:
        loss = cross_entropy(matmul(x, w), targets)
    backward(loss, tape)
    w.grad  # populated
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError, EmptyAttentionRowError, NumericalError

RMS_EPS = 1e-6
REL_ERR_EPS = 1e-8

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A dense array of float64 values that may carry a gradient."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("only division by a scalar is supported")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    op: str


class Tape:
    """Ordered record of differentiable operations.

    Ops executed while the tape is active (``with tape:``) and touching a
    ``requires_grad`` tensor are appended here. Tapes are thread-local.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise ContractError("tape exited out of order")
        stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def clear(self) -> None:
        self.nodes.clear()


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericalError(f"non-finite value produced by {op}")


def _record(op: str, out: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    _check_finite(out, op)
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, needs)
    if needs:
        tape.nodes.append(Node(inputs, result, backward_fn, op))
    return result


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "add")
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "sub")
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "mul")
    return _record("mul", a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return _record("scale", a.data * c, (a,), lambda g: (g * c,))


def silu(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))
    return _record("silu", x.data * s, (x,), lambda g: (g * s * (1.0 + x.data * (1.0 - s)),))


def sum_all(x: Tensor) -> Tensor:
    return _record("sum", np.array(x.data.sum()), (x,),
                   lambda g: (np.full(x.shape, float(g)),))


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    return _record("mean", np.array(x.data.sum() / n), (x,),
                   lambda g: (np.full(x.shape, float(g) / n),))


# ---------------------------------------------------------------- structural

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape).copy()
    return _record("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _record("transpose", out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inverse)),))


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def gather_flat(x: Tensor, index: np.ndarray) -> Tensor:
    """out.flat[k] = x.flat[index.flat[k]]; the output takes index's shape."""
    index = np.asarray(index, dtype=np.int64)
    out = x.data.reshape(-1)[index]

    def backward(g):
        gx = np.zeros(x.size)
        np.add.at(gx, index.reshape(-1), g.reshape(-1))
        return (gx.reshape(x.shape),)

    return _record("gather", out, (x,), backward)


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if weight.ndim != 2:
        raise DimensionError(f"embedding table must be 2-D, got {weight.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"token id out of range [0, {weight.shape[0]})")
    out = weight.data[ids]

    def backward(g):
        gw = np.zeros(weight.shape)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return _record("embedding", out, (weight,), backward)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch dims of {a.shape} and {b.shape} disagree") from None
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record("matmul", out, (a, b), backward)


def rotate_pairs(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate (first-half, second-half) feature pairs of the last axis.

    ``cos``/``sin`` have last dim D/2 and broadcast against ``x[..., :D/2]``.
    """
    d = x.shape[-1]
    if d % 2:
        raise DimensionError(f"rotate_pairs needs an even last dim, got {d}")
    h = d // 2
    x1, x2 = x.data[..., :h], x.data[..., h:]
    out = np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)

    def backward(g):
        g1, g2 = g[..., :h], g[..., h:]
        return (np.concatenate([g1 * cos + g2 * sin, g2 * cos - g1 * sin], axis=-1),)

    return _record("rotate_pairs", out, (x,), backward)


# ---------------------------------------------------------------- normalisation

def softmax_rows(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis. ``mask`` (True = allowed) broadcasts to x.

    Masked entries come out exactly 0. A row with no allowed entry raises
    :class:`EmptyAttentionRowError` instead of producing NaN.
    """
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not mask.any(axis=-1).all():
            raise EmptyAttentionRowError("empty attention row: every entry is masked")
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _record("softmax", p, (x,), backward)


def rmsnorm(x: Tensor, weight: Tensor, eps: float = RMS_EPS) -> Tensor:
    if weight.ndim != 1 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"rmsnorm: weight {weight.shape} does not match input {x.shape}")
    r = np.sqrt((x.data ** 2).mean(axis=-1, keepdims=True) + eps)
    xn = x.data / r

    def backward(g):
        gxn = g * weight.data
        gx = (gxn - xn * (gxn * xn).mean(axis=-1, keepdims=True)) / r
        gw = (g * xn).reshape(-1, weight.shape[0]).sum(axis=0)
        return gx, gw

    return _record("rmsnorm", xn * weight.data, (x, weight), backward)


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    return logits - m - np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under row-wise softmax."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    n, v = logits.shape
    if n == 0:
        raise DimensionError("cross_entropy on zero rows")
    if targets.min() < 0 or targets.max() >= v:
        raise IndexError(f"target id out of range [0, {v})")
    logp = log_softmax_np(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, targets].sum() / n

    def backward(g):
        gl = np.exp(logp)
        gl[rows, targets] -= 1.0
        return (gl * (float(g) / n),)

    return _record("cross_entropy", np.array(loss), (logits,), backward)


# ---------------------------------------------------------------- reverse mode

def backward(loss: Tensor, tape: Tape) -> None:
    """Propagate d(loss)/d(.) through ``tape`` and clear it.

    Gradients accumulate into ``.grad`` of every requires_grad tensor the
    loss depends on, intermediates included.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not require grad")
    if not any(node.output is loss for node in reversed(tape.nodes)):
        raise ContractError("loss was not recorded on this tape")

    pending: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        node.output.grad = g if node.output.grad is None else node.output.grad + g
        grads = node.backward(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            pending[key] = gi if key not in pending else pending[key] + gi
            leaves[key] = inp
    for key, g in pending.items():
        t = leaves[key]
        t.grad = g if t.grad is None else t.grad + g
    tape.clear()


def _project(y: Tensor, weights: Optional[np.ndarray]) -> Tensor:
    if y.size == 1:
        return reshape(y, ())
    return sum_all(mul(y, Tensor._wrap(weights.reshape(y.shape))))


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
                      seed: int = 0) -> float:
    """Max relative error between the tape gradient and central differences.

    Tensor-valued ``f`` is reduced to a scalar by a fixed random projection,
    so every output coordinate contributes.
    """
    if h <= 0:
        raise ContractError("step h must be positive")
    base = np.array(x.data, dtype=np.float64)
    probe = f(Tensor(base))
    weights = None
    if probe.size != 1:
        weights = np.random.default_rng(seed).uniform(0.5, 1.5, size=probe.size)

    xt = Tensor(base, requires_grad=True)
    with Tape() as tape:
        obj = _project(f(xt), weights)
    if obj.requires_grad:
        backward(obj, tape)
    analytic = xt.grad if xt.grad is not None else np.zeros(base.shape)

    def value(arr):
        return _project(f(Tensor(arr)), weights).item()

    numeric = np.zeros(base.size)
    flat = base.reshape(-1)
    for i in range(base.size):
        plus, minus = flat.copy(), flat.copy()
        plus[i] += h
        minus[i] -= h
        numeric[i] = (value(plus.reshape(base.shape)) - value(minus.reshape(base.shape))) / (2 * h)
    a = analytic.reshape(-1)
    return float(np.max(np.abs(a - numeric) / (np.abs(a) + REL_ERR_EPS))) if a.size else 0.0


def finite_diff_check_params(loss_fn: Callable[[], Tensor], params: Iterable[Tensor],
                             h: float = 1e-5) -> dict:
    """Per-parameter max relative error for a scalar loss closure.

    Each parameter's ``data`` is perturbed in place and restored.
    """
    params = list(params)
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
    backward(loss, tape)
    report = {}
    for k, p in enumerate(params):
        analytic = (p.grad if p.grad is not None else np.zeros(p.shape)).reshape(-1)
        flat = p.data.reshape(-1)
        numeric = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            numeric[i] = (up - down) / (2 * h)
        err = np.abs(analytic - numeric) / (np.abs(analytic) + REL_ERR_EPS)
        report[p.name or f"param{k}"] = float(err.max()) if err.size else 0.0
    return report
