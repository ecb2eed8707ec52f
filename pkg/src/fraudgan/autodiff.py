"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation runs eagerly on numpy buffers. An operation is recorded on the
innermost active :class:`Tape` only when one of its inputs requires a gradient,
so inference paths (sampling, rollouts, reward evaluation) skip all bookkeeping.

    >>> x = Tensor(3.0, requires_grad=True)
    >>> with Tape() as tape:
    ...     y = x * x
    >>> backward(tape, y)
    >>> float(x.grad)
    6.0
"""

from __future__ import annotations

import zlib
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np


class NumericError(ArithmeticError):
    """Raised when an operation would produce or consume non-finite values."""


class UsageError(RuntimeError):
    """Raised when the tape or the optimizer is driven out of contract."""


_ACTIVE_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of the differentiable operations of one forward pass."""

    def __init__(self) -> None:
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def __contains__(self, t: "Tensor") -> bool:
        return id(t) in self._produced

    def record(self, out: "Tensor", parents: tuple["Tensor", ...], fn: Callable) -> None:
        self.nodes.append((out, parents, fn))
        self._produced.add(id(out))

    def clear(self) -> None:
        self.nodes.clear()
        self._produced.clear()


def active_tape() -> Tape | None:
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


class Tensor:
    """A float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


def _raise_item(t: Tensor) -> float:
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], fn: Callable, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = False
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, parents, fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def relu(x: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    y = np.empty_like(x.data)
    pos = x.data >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    e = np.exp(x.data[~pos])
    y[~pos] = e / (1.0 + e)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    if (x.data <= 0).any():
        raise NumericError("log of a non-positive value")
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def stop_gradient(x: Tensor) -> Tensor:
    return Tensor(x.data)


# ---------------------------------------------------------------------------
# shape and reduction


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), fn, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis), 1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def _is_basic(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int)) or p is Ellipsis or p is None for p in parts)


def getitem(x: Tensor, idx) -> Tensor:
    basic = _is_basic(idx)

    def fn(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[idx] = g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return _make(np.array(x.data[idx]), (x,), fn, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ValueError("concat needs at least one tensor")
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([t.data for t in ts], axis=axis),
        ts,
        lambda g: tuple(np.split(g, cuts, axis=axis)),
        "concat",
    )


def matmul(a, b) -> Tensor:
    """``a @ b`` for ``a`` of any rank >= 1 and a 2-D right operand."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def fn(g):
        ga = g @ b.data.T
        gb = a.data.reshape(-1, b.shape[0]).T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return _make(a.data @ b.data, (a, b), fn, "matmul")


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Embedding lookup: ``table[ids]`` with scatter-add backward."""
    ids = np.asarray(ids, dtype=np.int64)

    def fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make(table.data[ids], (table,), fn, "take_rows")


def pick(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select one entry per row along the last axis."""
    idx = np.asarray(idx, dtype=np.int64)[..., None]

    def fn(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, g[..., None], axis=-1)
        return (gx,)

    return _make(np.take_along_axis(x.data, idx, axis=-1)[..., 0], (x,), fn, "pick")


# ---------------------------------------------------------------------------
# convolution pieces


def windows(x: Tensor, width: int) -> Tensor:
    """Unfold ``(B, T, E)`` into ``(B, T - width + 1, width * E)`` sliding windows."""
    b, t, e = x.shape
    if not 1 <= width <= t:
        raise ValueError(f"window width {width} does not fit length {t}")
    n = t - width + 1
    view = np.lib.stride_tricks.sliding_window_view(x.data, width, axis=1)
    data = np.ascontiguousarray(view.transpose(0, 1, 3, 2)).reshape(b, n, width * e)

    def fn(g):
        g = g.reshape(b, n, width, e)
        gx = np.zeros_like(x.data)
        for j in range(width):
            gx[:, j : j + n] += g[:, :, j]
        return (gx,)

    return _make(data, (x,), fn, "windows")


def max_pool(x: Tensor, axis: int = 1) -> Tensor:
    """Max over ``axis``; ties route the gradient to the lowest index."""
    arg = np.expand_dims(np.argmax(x.data, axis=axis), axis)

    def fn(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, arg, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _make(np.take_along_axis(x.data, arg, axis=axis).squeeze(axis), (x,), fn, "max_pool")


# ---------------------------------------------------------------------------
# recurrent cell


def _sig(a: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, w_x: Tensor, w_h: Tensor, b: Tensor) -> Tensor:
    """One LSTM step; returns ``[h_next, c_next]`` concatenated on the last axis.

    Gate blocks of the ``4H`` pre-activation are ordered input, forget,
    candidate, output.
    """
    H = h.shape[-1]
    a = x.data @ w_x.data + h.data @ w_h.data + b.data
    i, f, o = _sig(a[:, :H]), _sig(a[:, H : 2 * H]), _sig(a[:, 3 * H :])
    g = np.tanh(a[:, 2 * H : 3 * H])
    c_next = f * c.data + i * g
    tc = np.tanh(c_next)
    h_next = o * tc

    def fn(grad):
        dh, dc = grad[:, :H], grad[:, H:]
        dc = dc + dh * o * (1.0 - tc * tc)
        da = np.concatenate(
            [dc * g * i * (1 - i), dc * c.data * f * (1 - f), dc * i * (1 - g * g), dh * tc * o * (1 - o)],
            axis=1,
        )
        return (
            da @ w_x.data.T,
            da @ w_h.data.T,
            dc * f,
            x.data.T @ da,
            h.data.T @ da,
            da.sum(axis=0),
        )

    return _make(np.concatenate([h_next, c_next], axis=1), (x, h, c, w_x, w_h, b), fn, "lstm_cell")


# ---------------------------------------------------------------------------
# normalisation


def _check_logits(z: np.ndarray) -> None:
    if z.size == 0 or z.shape[-1] == 0:
        raise ValueError("softmax of an empty vector")
    if not np.isfinite(z).all():
        raise NumericError("softmax input is not finite")


def softmax(logits):
    """Max-shifted softmax over the last axis.

    Plain arrays in give a plain array back; a :class:`Tensor` gives a
    differentiable Tensor.
    """
    if not isinstance(logits, Tensor):
        z = np.asarray(logits, dtype=np.float64)
        _check_logits(z)
        e = np.exp(z - z.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)
    _check_logits(logits.data)
    y = softmax(logits.data)
    return _make(y, (logits,), lambda g: (y * (g - (g * y).sum(-1, keepdims=True)),), "softmax")


def log_softmax(logits: Tensor) -> Tensor:
    _check_logits(logits.data)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    p = np.exp(out)
    return _make(out, (logits,), lambda g: (g - p * g.sum(-1, keepdims=True),), "log_softmax")


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under softmax(logits)."""
    return -mean(pick(log_softmax(logits), targets))


# ---------------------------------------------------------------------------
# differentiation and updates


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every trainable leaf on ``tape``."""
    if loss not in tape:
        raise UsageError("loss was not produced on this tape")
    if loss.size != 1:
        raise UsageError(f"loss must be a scalar, got shape {loss.shape}")
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, parents, fn in reversed(tape.nodes):
        g = pending.pop(id(out), None)
        if g is None:
            continue
        for p, pg in zip(parents, fn(g)):
            if pg is None or not p.requires_grad:
                continue
            if p in tape:
                prev = pending.get(id(p))
                pending[id(p)] = pg if prev is None else prev + pg
            else:
                p.grad = pg.copy() if p.grad is None else p.grad + pg


class ParamSet:
    """Named, ordered collection of trainable tensors."""

    def __init__(self, arrays: dict[str, np.ndarray] | None = None):
        self._params: dict[str, Tensor] = {}
        for name, arr in (arrays or {}).items():
            self.add(name, arr)

    def add(self, name: str, array) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(array, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self) -> Iterable[tuple[str, Tensor]]:
        return self._params.items()

    def values(self) -> Iterable[Tensor]:
        return self._params.values()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) ^ set(state)
        if missing:
            raise KeyError(f"parameter names differ: {sorted(missing)}")
        for k, t in self._params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {t.shape}")
            t.data = arr.copy()

    def count(self) -> int:
        return sum(t.size for t in self._params.values())


def _sign(direction: str) -> float:
    if direction == "ascend":
        return 1.0
    if direction == "descend":
        return -1.0
    raise ValueError(f"direction must be 'ascend' or 'descend', got {direction!r}")


def grad_step(params: ParamSet, rate: float, direction: str = "descend") -> ParamSet:
    """Plain gradient step ``p <- p +/- rate * grad``, then zero the grads.

    Parameters that received no gradient are left untouched; a set where no
    parameter has a gradient is a usage error.
    """
    sign = _sign(direction)
    if rate < 0:
        raise ValueError("rate must be non-negative")
    if all(t.grad is None for t in params.values()):
        raise UsageError("grad_step called before backward populated any gradient")
    for t in params.values():
        if t.grad is not None:
            t.data = t.data + sign * rate * t.grad
    params.zero_grad()
    return params


class Adam:
    """Adam on a :class:`ParamSet`; used where a plain step is too slow to train."""

    def __init__(self, params: ParamSet, rate: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.rate = rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros(p.shape) for k, p in params.items()}
        self.v = {k: np.zeros(p.shape) for k, p in params.items()}

    def step(self, direction: str = "descend") -> None:
        sign = _sign(direction)
        if all(p.grad is None for p in self.params.values()):
            raise UsageError("Adam.step called before backward populated any gradient")
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * p.grad
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * p.grad**2
            p.data = p.data + sign * self.rate * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        self.params.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        out = {f"m/{k}": v.copy() for k, v in self.m.items()}
        out.update({f"v/{k}": v.copy() for k, v in self.v.items()})
        return out

    def load(self, state: dict[str, np.ndarray], t: int) -> None:
        for k in self.m:
            self.m[k] = np.asarray(state[f"m/{k}"], dtype=np.float64).copy()
            self.v[k] = np.asarray(state[f"v/{k}"], dtype=np.float64).copy()
        self.t = t


# ---------------------------------------------------------------------------
# randomness


class Rng:
    """Counter-based (Philox) random stream keyed by a seed and a stream name.

    Children derived with :meth:`child` are independent of the parent's call
    history, so adding draws in one component never perturbs another.
    """

    def __init__(self, seed: int, stream: str = ""):
        if seed < 0 or seed >= 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")
        self.seed = int(seed)
        self.stream = stream
        words = [self.seed & 0xFFFFFFFF, self.seed >> 32]
        words += [zlib.crc32(part.encode()) for part in stream.split("/") if part]
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))

    def child(self, name: str) -> "Rng":
        return Rng(self.seed, f"{self.stream}/{name}" if self.stream else name)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def normal(self, size=None) -> np.ndarray:
        return self._gen.standard_normal(size)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def categorical(self, probs: np.ndarray) -> np.ndarray:
        """One inverse-CDF draw per row of ``probs`` (shape ``(n, k)``)."""
        probs = np.atleast_2d(probs)
        u = self._gen.random(probs.shape[0])
        cdf = np.cumsum(probs, axis=1)
        idx = (cdf < (u * cdf[:, -1])[:, None]).sum(axis=1)
        return np.minimum(idx, probs.shape[1] - 1)

    def get_state(self) -> dict:
        st = self._gen.bit_generator.state
        return {
            "counter": [int(v) for v in st["state"]["counter"]],
            "key": [int(v) for v in st["state"]["key"]],
            "buffer": [int(v) for v in st["buffer"]],
            "buffer_pos": int(st["buffer_pos"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    def set_state(self, state: dict) -> None:
        self._gen.bit_generator.state = {
            "bit_generator": "Philox",
            "state": {
                "counter": np.array(state["counter"], dtype=np.uint64),
                "key": np.array(state["key"], dtype=np.uint64),
            },
            "buffer": np.array(state["buffer"], dtype=np.uint64),
            "buffer_pos": state["buffer_pos"],
            "has_uint32": state["has_uint32"],
            "uinteger": state["uinteger"],
        }


class SGD:
    """Plain gradient step bound to a parameter set (same interface as :class:`Adam`)."""

    def __init__(self, params: ParamSet, rate: float):
        self.params = params
        self.rate = rate

    def step(self, direction: str = "descend") -> None:
        grad_step(self.params, self.rate, direction)
