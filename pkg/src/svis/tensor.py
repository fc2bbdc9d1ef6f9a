"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active are recorded whenever one
of their inputs requires gradients; :func:`backward` walks the record in
reverse. Outside a tape nothing is recorded, which is the inference path.

Shapes must agree exactly. The one exception is an affine parameter (bias or
scale) whose shape is a suffix of the other operand's shape; it is applied
over the leading dimensions. Linear maps (``matmul`` with a 2-D right operand)
likewise apply over leading dimensions.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A documented precondition was violated."""


_TAPES: list["Tape"] = []
_SOFTMAX_OBSERVERS: list[Callable[[np.ndarray, int], None]] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

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
            raise ContractError(f"item() needs a single-element tensor, got shape {list(self.shape)}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}{flag})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    def __radd__(self, other):
        return add_scalar(self, other)

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(neg(self), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __truediv__(self, other):
        return div(self, other) if isinstance(other, Tensor) else scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of the primitive operations executed inside ``with tape:``."""

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.pop()

    def __len__(self) -> int:
        return len(self.nodes)


def _emit(op: str, inputs: tuple[Tensor, ...], out: np.ndarray, vjp) -> Tensor:
    result = Tensor(out)
    if _TAPES and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        _TAPES[-1].nodes.append(Node(op, inputs, result, vjp))
    return result


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradients of the scalar ``loss`` for every leaf that requires them.

    Leaves are tensors with ``requires_grad`` that no recorded node produced.
    Gradients from fan-out (residual paths, reused parameters) accumulate.
    """
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {list(loss.shape)}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = set()
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        produced.add(id(node.output))
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.vjp(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig
            leaves.setdefault(key, inp)
    if id(loss) not in produced:
        leaves.setdefault(id(loss), loss)
    return {t: grads[k] for k, t in leaves.items() if k in grads and k not in produced}


# --------------------------------------------------------------------------
# elementwise


def _affine_axes(big: tuple[int, ...], small: tuple[int, ...]) -> tuple[int, ...] | None:
    if big == small:
        return ()
    if len(small) < len(big) and big[len(big) - len(small):] == small:
        return tuple(range(len(big) - len(small)))
    return None


def _check_binary(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    axes = _affine_axes(a.shape, b.shape)
    if axes is None:
        raise ShapeError(f"{op}: shapes {list(a.shape)} and {list(b.shape)} are incompatible")
    return axes


def add(a: Tensor, b: Tensor) -> Tensor:
    axes = _check_binary("add", a, b)
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (g, g.sum(axis=axes) if axes else g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    axes = _check_binary("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (g, -(g.sum(axis=axes) if axes else g)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    axes = _check_binary("mul", a, b)

    def vjp(g):
        gb = g * a.data
        return g * b.data, (gb.sum(axis=axes) if axes else gb)

    return _emit("mul", (a, b), a.data * b.data, vjp)


def div(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"div: shapes {list(a.shape)} and {list(b.shape)} differ")
    return _emit("div", (a, b), a.data / b.data,
                 lambda g: (g / b.data, -g * a.data / (b.data * b.data)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _emit("add_scalar", (a,), a.data + float(c), lambda g: (g,))


def neg(a: Tensor) -> Tensor:
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit("exp", (a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _emit("log", (a,), np.log(a.data), lambda g: (g / a.data,))


def clamp_min(a: Tensor, lo: float) -> Tensor:
    keep = a.data > lo
    return _emit("clamp_min", (a,), np.where(keep, a.data, lo), lambda g: (g * keep,))


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0
    return _emit("relu", (a,), a.data * keep, lambda g: (g * keep,))


# --------------------------------------------------------------------------
# structural


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[k, n]`` or ``a[..., m, k] @ b[..., k, n]`` with equal leading dims."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: need rank >= 2, got {list(a.shape)} and {list(b.shape)}")
    if a.shape[-1] != b.shape[-2] or (b.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
        raise ShapeError(f"matmul: shapes {list(a.shape)} and {list(b.shape)} do not align")
    out = a.data @ b.data

    if b.ndim == 2:
        def vjp(g):
            ga = g @ b.data.T
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
    else:
        def vjp(g):
            return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _emit("matmul", (a, b), out, vjp)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(x) % a.ndim for x in axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", (a,), np.transpose(a.data, axes), lambda g: (np.transpose(g, inv),))


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {list(a.shape)} as {list(shape)}") from exc
    return _emit("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ContractError("concat: empty input")
    nd = tensors[0].ndim
    axis = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != axis):
            raise ShapeError(f"concat: shapes {[list(t.shape) for t in tensors]} disagree off axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return np.split(g, bounds, axis=axis)

    return _emit("concat", tensors, np.concatenate([t.data for t in tensors], axis=axis), vjp)


def _is_basic(key) -> bool:
    key = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (slice, int, type(Ellipsis))) or k is None for k in key)


def index(a: Tensor, key) -> Tensor:
    basic = _is_basic(key)

    def vjp(g):
        z = np.zeros_like(a.data)
        if basic:
            z[key] = g
        else:
            np.add.at(z, key, g)
        return (z,)

    return _emit("index", (a,), a.data[key], vjp)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit("sum", (a,), out, vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(tsum(a, axis, keepdims), 1.0 / count)


# --------------------------------------------------------------------------
# fused primitives


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ContractError(f"softmax: axis {axis} out of range for rank {x.ndim}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    for observer in _SOFTMAX_OBSERVERS:
        observer(y, axis)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", (x,), y, vjp)


@contextmanager
def observe_softmax(callback: Callable[[np.ndarray, int], None]) -> Iterator[None]:
    """Call ``callback(output, axis)`` on every softmax evaluated inside the block."""
    _SOFTMAX_OBSERVERS.append(callback)
    try:
        yield
    finally:
        _SOFTMAX_OBSERVERS.remove(callback)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: params {list(gamma.shape)}/{list(beta.shape)} vs input {list(x.shape)}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    lead = tuple(range(x.ndim - 1))

    def vjp(g):
        gx = g * gamma.data
        gin = inv * (gx - gx.mean(axis=-1, keepdims=True)
                     - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return gin, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit("layer_norm", (x, gamma, beta), xhat * gamma.data + beta.data, vjp)


def im2col(x: Tensor, k: int, stride: int, pad: int) -> Tensor:
    """Patches of ``x[..., H, W, C]`` as ``[..., Ho, Wo, k*k*C]`` (offset-major, channel-minor)."""
    *lead, h, w, c = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    padw = [(0, 0)] * len(lead) + [(pad, pad), (pad, pad), (0, 0)]
    xp = np.pad(x.data, padw)
    cols = [xp[..., di:di + stride * ho:stride, dj:dj + stride * wo:stride, :]
            for di in range(k) for dj in range(k)]
    out = np.concatenate(cols, axis=-1)

    def vjp(g):
        gp = np.zeros_like(xp)
        for n, (di, dj) in enumerate((i, j) for i in range(k) for j in range(k)):
            gp[..., di:di + stride * ho:stride, dj:dj + stride * wo:stride, :] += g[..., n * c:(n + 1) * c]
        return (gp[..., pad:pad + h, pad:pad + w, :],)

    return _emit("im2col", (x,), out, vjp)


def resize(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Separable linear resampling of ``x[..., H, W, C]`` by fixed matrices ``rows[Ho,H]``, ``cols[Wo,W]``."""
    if rows.shape[1] != x.shape[-3] or cols.shape[1] != x.shape[-2]:
        raise ShapeError(f"resize: matrices {rows.shape}/{cols.shape} vs input {list(x.shape)}")
    out = np.einsum("ip,jq,...pqc->...ijc", rows, cols, x.data, optimize=True)
    return _emit("resize", (x,), out,
                 lambda g: (np.einsum("ip,jq,...ijc->...pqc", rows, cols, g, optimize=True),))


# --------------------------------------------------------------------------
# gradient checking


def finite_diff_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
                      atol: float = 1e-4) -> float:
    """Worst relative discrepancy between :func:`backward` and central differences.

    Per coordinate the error is ``|analytic - numeric| / max(|analytic|, |numeric|, atol)``;
    coordinates whose gradient is below ``atol`` are thereby compared absolutely.
    """
    if eps <= 0:
        raise ContractError("finite_diff_check: eps must be positive")
    with Tape() as tape:
        out = f(*inputs)
    grads = backward(tape, out)
    worst = 0.0
    for t in inputs:
        analytic = grads.get(t, np.zeros_like(t.data))
        flat = t.data.reshape(-1)
        an = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f(*inputs).item()
            flat[i] = orig - eps
            lo = f(*inputs).item()
            flat[i] = orig
            num = (hi - lo) / (2 * eps)
            err = abs(an[i] - num) / max(abs(an[i]), abs(num), atol)
            worst = max(worst, err)
    return worst
