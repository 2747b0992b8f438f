"""Dense tensors with tape-based reverse-mode differentiation.

Everything the model needs is composed from a fixed set of eleven primitives
(matmul, add, scale, concat, softmax_rows, relu, layer_norm, cross_entropy,
slice, transpose, broadcast).  A :class:`Tape` records primitive applications
while it is active; :func:`backward` replays it in reverse.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
IGNORE_INDEX = 255

_state = threading.local()


class TapeError(RuntimeError):
    pass


class Tensor:
    """An n-d float64 array that may take part in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.tape = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return scale(self, other)

    __rmul__ = __mul__

    def __getitem__(self, key):
        return slice_(self, key)

    @property
    def T(self):
        return transpose(self)


@dataclass
class Parameter:
    """A named tensor; frozen parameters never carry gradient storage."""

    name: str
    tensor: Tensor
    trainable: bool = True

    def __post_init__(self):
        self.tensor.requires_grad = self.trainable
        self.tensor.grad = np.zeros_like(self.tensor.data) if self.trainable else None

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tensor.shape

    @property
    def size(self) -> int:
        return int(self.tensor.data.size)


@dataclass
class _Entry:
    op: str
    inputs: tuple
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; only one tape is active per thread.
    """

    entries: list = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        stack = _stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def ops(self) -> list[str]:
        return [e.op for e in self.entries]


def _stack() -> list:
    if not hasattr(_state, "stack"):
        _state.stack = []
    return _state.stack


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


class no_grad:
    """Suspend recording (for evaluation and finite differences)."""

    def __enter__(self):
        stack = _stack()
        stack.append(None)

    def __exit__(self, *exc):
        _stack().pop()


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, Parameter):
        return x.tensor
    return Tensor(x)


def _record(op: str, inputs: tuple, out_data: np.ndarray, vjp) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.tape = None
    tape = active_tape()
    needs = any(t.requires_grad for t in inputs)
    out.requires_grad = bool(needs and tape is not None)
    if out.requires_grad:
        tape.entries.append(_Entry(op, inputs, out, vjp))
        out.tape = tape
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    nlead = g.ndim - len(shape)
    if nlead > 0:
        g = g.sum(axis=tuple(range(nlead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- primitives


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    A, B = a.data, b.data
    out = np.matmul(A, B)

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            if B.ndim == 1:
                ga = _unbroadcast(np.multiply.outer(g, B), A.shape)
            else:
                ga = _unbroadcast(np.matmul(g, np.swapaxes(B, -1, -2)), A.shape)
        if b.requires_grad:
            if B.ndim == 2 and A.ndim >= 2:
                k = A.shape[-1]
                gb = A.reshape(-1, k).T @ g.reshape(-1, B.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(A, -1, -2), g), B.shape)
        return ga, gb

    return _record("matmul", (a, b), out, vjp)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def vjp(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _record("add", (a, b), out, vjp)


def scale(a, b) -> Tensor:
    """Elementwise product with broadcasting (scalar factors included)."""
    a, b = as_tensor(a), as_tensor(b)
    A, B = a.data, b.data
    out = A * B

    def vjp(g):
        return (
            _unbroadcast(g * B, A.shape) if a.requires_grad else None,
            _unbroadcast(g * A, B.shape) if b.requires_grad else None,
        )

    return _record("scale", (a, b), out, vjp)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        parts = np.split(g, bounds, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(parts, ts))

    return _record("concat", ts, out, vjp)


def softmax_rows(x) -> Tensor:
    """Softmax along the last axis, stabilised by per-row max subtraction."""
    x = as_tensor(x)
    X = x.data
    if X.size == 0 or X.shape[-1] < 1:
        raise ValueError(f"softmax_rows needs at least one column, got shape {X.shape}")
    finite = np.isfinite(X)
    if not finite.all():
        rows = np.argwhere(~finite.all(axis=-1))
        raise ValueError(f"softmax_rows: non-finite input in row {tuple(int(i) for i in rows[0])}")
    e = np.exp(X - X.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return ((g - (g * out).sum(axis=-1, keepdims=True)) * out,)

    return _record("softmax_rows", (x,), out, vjp)


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0.0)
    mask = out > 0
    return _record("relu", (x,), out, lambda g: (g * mask,))


def layer_norm(x, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit variance (no affine)."""
    x = as_tensor(x)
    X = x.data
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _record("layer_norm", (x,), xhat, vjp)


def cross_entropy(logits, labels, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean softmax cross-entropy over entries whose label is not ignored.

    ``logits`` has shape (..., K); ``labels`` is an integer array of shape (...).
    """
    z = as_tensor(logits)
    Z = z.data
    y = np.asarray(labels)
    if y.shape != Z.shape[:-1]:
        raise ValueError(f"labels shape {y.shape} does not match logits {Z.shape}")
    K = Z.shape[-1]
    valid = y != ignore_index
    count = int(valid.sum())
    if count == 0:
        raise ValueError("cross_entropy: every label is ignored, mean is undefined")
    if np.any((y[valid] < 0) | (y[valid] >= K)):
        raise ValueError(f"labels must lie in [0, {K}) or equal {ignore_index}")
    yc = np.where(valid, y, 0)
    shifted = Z - Z.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logsum
    picked = np.take_along_axis(logp, yc[..., None], axis=-1)[..., 0]
    out = np.asarray(-(picked * valid).sum() / count)

    def vjp(g):
        p = np.exp(logp)
        np.put_along_axis(p, yc[..., None], np.take_along_axis(p, yc[..., None], -1) - 1.0, -1)
        return (p * (valid[..., None] * (float(g) / count)),)

    return _record("cross_entropy", (z,), out, vjp)


def slice_(x, key) -> Tensor:
    x = as_tensor(x)
    out = x.data[key]

    def vjp(g):
        full = np.zeros_like(x.data)
        full[key] += g
        return (full,)

    return _record("slice", (x,), out, vjp)


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    x = as_tensor(x)
    if axes is None:
        axes = list(range(x.data.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.transpose(x.data, axes)
    return _record("transpose", (x,), out, lambda g: (np.transpose(g, inverse),))


def broadcast(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    out = np.broadcast_to(x.data, tuple(shape)).copy()
    return _record("broadcast", (x,), out, lambda g: (_unbroadcast(g, x.shape),))


PRIMITIVES = (
    "matmul", "add", "scale", "concat", "softmax_rows", "relu",
    "layer_norm", "cross_entropy", "slice", "transpose", "broadcast",
)


# --------------------------------------------------------------- composites


def linear(x, weight, bias=None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def total(x) -> Tensor:
    """Sum of all entries as a (1, 1) tensor, composed from matmul and slice."""
    y = as_tensor(x)
    if y.data.ndim == 1:
        y = broadcast(y, (1,) + y.shape)
    while y.data.ndim > 2:
        y = slice_(matmul(np.ones((1, y.shape[-2])), y), (Ellipsis, 0, slice(None)))
    n, m = y.shape
    return matmul(matmul(np.ones((1, n)), y), np.ones((m, 1)))


# ----------------------------------------------------------------- backward


def backward(loss: Tensor, params: Iterable[Parameter] = ()) -> dict[str, np.ndarray]:
    """Replay the loss's tape in reverse and populate parameter gradients.

    Gradients of every listed trainable parameter are reset to zero first, so
    parameters the loss does not reach report zero.  Returns name -> grad.
    """
    params = list(params)
    for p in params:
        if p.trainable:
            p.tensor.grad = np.zeros_like(p.tensor.data)
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss.tape
    if tape is None:
        return {p.name: p.tensor.grad for p in params if p.trainable}
    if tape.consumed:
        raise TapeError("backward already ran on this tape; run a new forward first")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    owned: set[int] = set()
    for entry in reversed(tape.entries):
        g = grads.pop(id(entry.output), None)
        owned.discard(id(entry.output))
        if g is None:
            continue
        for t, gi in zip(entry.inputs, entry.vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            acc = grads.get(key)
            if acc is None:
                grads[key] = gi
            elif key in owned:
                acc += gi
            else:
                grads[key] = acc + gi
                owned.add(key)
            if t.tape is None:
                leaves[key] = t
    for key, t in leaves.items():
        if t.grad is None or t.grad.shape != t.data.shape:
            t.grad = np.zeros_like(t.data)
        t.grad = t.grad + grads[key]
    tape.entries.clear()
    return {p.name: p.tensor.grad for p in params if p.trainable}


def finite_diff_check(
    f: Callable[[], Tensor | float],
    params: Iterable[Parameter],
    eps: float = 1e-5,
    per_param: bool = False,
):
    """Compare tape gradients of ``f`` against central differences.

    ``f`` takes no arguments and reads the current parameter values.  The
    error per coordinate is |analytic - numeric| / max(1, |analytic|, |numeric|);
    the maximum over all trainable coordinates is returned (and, with
    ``per_param``, a name -> max error dict as well).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    params = [p for p in params if p.trainable]
    with Tape():
        loss = f()
        if not isinstance(loss, Tensor):
            raise TypeError("f must return a Tensor to differentiate")
        if not np.isfinite(loss.data).all():
            raise ValueError("f returned a non-finite value")
        analytic = backward(loss, params)
    analytic = {k: v.copy() for k, v in analytic.items()}

    def value() -> float:
        with no_grad():
            out = f()
        v = float(as_tensor(out).data.reshape(-1)[0])
        if not np.isfinite(v):
            raise ValueError("f returned a non-finite value under perturbation")
        return v

    worst = 0.0
    report: dict[str, float] = {}
    for p in params:
        data = p.tensor.data
        flat = data.reshape(-1)
        ga = analytic[p.name].reshape(-1)
        err_p = 0.0
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            fp = value()
            flat[j] = orig - eps
            fm = value()
            flat[j] = orig
            num = (fp - fm) / (2 * eps)
            err = abs(ga[j] - num) / max(1.0, abs(ga[j]), abs(num))
            err_p = max(err_p, err)
        report[p.name] = err_p
        worst = max(worst, err_p)
    return (worst, report) if per_param else worst


class ParameterStore:
    """Ordered name -> Parameter registry shared by every model component."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, data, trainable: bool) -> Parameter:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        p = Parameter(name, Tensor(np.array(data, dtype=DTYPE)), trainable)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def trainable(self) -> list[Parameter]:
        return [p for p in self._params.values() if p.trainable]

    def frozen(self) -> list[Parameter]:
        return [p for p in self._params.values() if not p.trainable]
