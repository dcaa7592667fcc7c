"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Operations executed while a :class:`Tape` is active are recorded in order;
``Tape.backward`` replays their adjoints in reverse.  Outside a tape the same
operations run as plain numpy with no bookkeeping, which is what inference
uses.

Tensors of shape ``(D,)`` and row batches of shape ``(B, D)`` are both
accepted by the linear-algebra ops, so a single code path serves per-sample
reference computations and batched training.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """A caller violated an operation's precondition."""


_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "ctxreport_active_tape", default=None
)


class Tensor:
    """Shape-tagged float64 array with an optional gradient accumulator.

    Leaves created with ``requires_grad=True`` carry a zero-initialised
    ``grad`` of identical shape; intermediate tensors never do.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.name = name
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> list[float]:
        """Row-major flattened values."""
        return self.data.ravel().tolist()

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


class Tape:
    """Ordered record of executed operations.

    Use as a context manager; operations whose inputs need gradients are
    recorded while it is active::

        with Tape() as tape:
            loss = softmax_nll(logits(params, x), target)
        tape.backward(loss)
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward, op: str) -> None:
        out._tape = self
        out.requires_grad = True
        self.nodes.append(_Node(out, inputs, backward, op))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into every tracked leaf's ``grad``.

        Repeated calls accumulate; reset with :func:`zero_grads`.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.is_leaf:
            # constant loss: nothing depends on any parameter
            return
        if loss._tape is not self:
            raise ContractError("loss was not produced on this tape")

        adjoints: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = adjoints.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._tape is self:
                    key = id(inp)
                    if key in adjoints:
                        adjoints[key] = adjoints[key] + gi
                    else:
                        adjoints[key] = gi
                elif inp.is_leaf:
                    inp.grad += gi


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar produced on an active or finished tape."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        return
    loss._tape.backward(loss)


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], backward, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out.name = None
    out._tape = None
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(out, inputs, backward, op)
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# primitive operations
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def back(g):
        return g @ B.T, A.T @ g

    return _result(A @ B, (a, b), back, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    A, B = a.data, b.data
    return _result(A * B, (a, b), lambda g: (g * B, g * A), "mul")


def sigmoid(a: Tensor) -> Tensor:
    # tanh form: no overflow on either tail
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _result(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


_UNARY = {"sigmoid": sigmoid, "tanh": tanh}
_BINARY = {"add": add, "mul": mul, "sub": sub}


def elementwise(op: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    """Dispatch ``add``/``mul``/``sub`` (binary) or ``sigmoid``/``tanh``."""
    if op in _UNARY:
        if b is not None:
            raise ContractError(f"{op} is unary")
        return _UNARY[op](a)
    if op in _BINARY:
        if b is None:
            raise ContractError(f"{op} needs two operands")
        return _BINARY[op](a, b)
    raise ContractError(f"unknown elementwise op {op!r}")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def total(a: Tensor) -> Tensor:
    """Sum of all entries as a 0-d tensor."""
    shape = a.shape
    return _result(np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),), "sum")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` for ``x`` of shape (D,) or (B, D) and ``w`` of shape (O, D)."""
    if w.data.ndim != 2 or x.data.ndim not in (1, 2) or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
    X, W = x.data, w.data
    y = X @ W.T
    if b is not None:
        y = y + b.data

    def back(g):
        g2 = np.atleast_2d(g)
        gw = g2.T @ np.atleast_2d(X)
        gb = g2.sum(axis=0) if b is not None else None
        return g @ W, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return _result(y, inputs, back, "linear")


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis."""
    parts = tuple(parts)
    if not parts:
        raise ContractError("concat needs at least one tensor")
    lead = parts[0].shape[:-1]
    for p in parts:
        if p.shape[:-1] != lead:
            raise ShapeError(f"concat: leading dims differ {[q.shape for q in parts]}")
    bounds = np.cumsum([0] + [p.shape[-1] for p in parts])

    def back(g):
        return tuple(g[..., lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _result(np.concatenate([p.data for p in parts], axis=-1), parts, back, "concat")


def columns(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``[start, stop)`` of the last axis."""
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return _result(a.data[..., start:stop].copy(), (a,), back, "columns")


def gather_columns(w: Tensor, ids) -> Tensor:
    """Embedding lookup: columns ``ids`` of ``w`` (E x V), shaped (E,) or (B, E)."""
    idx = np.asarray(ids, dtype=np.int64)
    vocab = w.shape[1]
    if idx.size and (idx.min() < 0 or idx.max() >= vocab):
        raise IndexError(f"token id out of range for vocabulary of size {vocab}: {idx.tolist()}")
    shape = w.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full.T, idx, g)
        return (full,)

    return _result(w.data[:, idx].T.copy(), (w,), back, "gather")


def blend(mask, a: Tensor, b: Tensor) -> Tensor:
    """Row-wise select: rows where ``mask`` is true come from ``a``, the rest from ``b``."""
    _same_shape(a, b, "blend")
    m = np.asarray(mask, dtype=np.float64).reshape(-1, *([1] * (a.data.ndim - 1)))
    return _result(m * a.data + (1.0 - m) * b.data, (a, b), lambda g: (g * m, g * (1.0 - m)), "blend")


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``rate == 0``."""
    if not training or rate == 0.0:
        return a
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate must lie in [0, 1), got {rate}")
    if rng is None:
        raise ContractError("training-mode dropout needs a random generator")
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _result(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


def log_softmax(z: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax with max subtraction (plain numpy, no tape)."""
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def softmax_nll(logits: Tensor, target, mask=None) -> Tensor:
    """Negative log-likelihood of ``target`` under ``softmax(logits)``.

    ``logits`` of shape (V,) with an integer target gives a single term;
    shape (B, V) with a length-B target array gives the sum of the B terms,
    with rows where ``mask`` is false contributing nothing.
    """
    z = logits.data
    vocab = z.shape[-1]
    tgt = np.asarray(target, dtype=np.int64)
    if z.ndim == 1 and tgt.ndim != 0:
        raise ShapeError("softmax_nll: 1-d logits need a scalar target")
    if z.ndim == 2 and tgt.shape != (z.shape[0],):
        raise ShapeError(f"softmax_nll: targets {tgt.shape} do not match logits {z.shape}")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= vocab):
        raise IndexError(f"target id out of range for {vocab} classes")

    logp = log_softmax(z)
    z2, t2 = np.atleast_2d(logp), np.atleast_1d(tgt)
    m = np.ones(t2.shape) if mask is None else np.asarray(mask, dtype=np.float64).reshape(t2.shape)
    rows = np.arange(t2.size)
    picked = z2[rows, t2]
    loss = -(picked * m).sum()

    def back(g):
        grad = np.exp(z2)
        grad[rows, t2] -= 1.0
        grad *= m[:, None] * float(g)
        return (grad.reshape(z.shape),)

    return _result(np.array(loss), (logits,), back, "softmax_nll")


# ---------------------------------------------------------------------------
# LSTM cell
# ---------------------------------------------------------------------------

GATE_ORDER = ("input", "forget", "cell", "output")


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    fan_out, fan_in = shape
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


@dataclass
class LstmCellParams:
    """Packed LSTM weights; gate blocks are stacked as [input, forget, cell, output]."""

    w_ih: Tensor  # (4H, D)
    w_hh: Tensor  # (4H, H)
    b: Tensor  # (4H,)

    @property
    def hidden_size(self) -> int:
        return self.w_hh.shape[1]

    @property
    def input_size(self) -> int:
        return self.w_ih.shape[1]

    @classmethod
    def init(cls, rng: np.random.Generator, input_size: int, hidden_size: int, prefix: str = "") -> "LstmCellParams":
        h = hidden_size
        b = np.zeros(4 * h)
        b[h:2 * h] = 1.0
        return cls(
            Tensor(glorot_uniform(rng, (4 * h, input_size)), requires_grad=True, name=prefix + "w_ih"),
            Tensor(glorot_uniform(rng, (4 * h, h)), requires_grad=True, name=prefix + "w_hh"),
            Tensor(b, requires_grad=True, name=prefix + "b"),
        )

    @classmethod
    def zeros(cls, input_size: int, hidden_size: int) -> "LstmCellParams":
        h = hidden_size
        return cls(
            Tensor(np.zeros((4 * h, input_size)), requires_grad=True),
            Tensor(np.zeros((4 * h, h)), requires_grad=True),
            Tensor(np.zeros(4 * h), requires_grad=True),
        )

    def tensors(self) -> list[Tensor]:
        return [self.w_ih, self.w_hh, self.b]


def lstm_step(x: Tensor, h: Tensor, c: Tensor, p: LstmCellParams) -> tuple[Tensor, Tensor]:
    """One standard LSTM step; returns ``(h', c')``.

    i, f, o = sigmoid gates, g = tanh candidate,
    c' = f * c + i * g,  h' = o * tanh(c').
    """
    H = p.hidden_size
    if x.shape[-1] != p.input_size:
        raise ShapeError(f"lstm_step: input width {x.shape[-1]} != cell input size {p.input_size}")
    if h.shape[-1] != H or c.shape != h.shape or h.shape[:-1] != x.shape[:-1]:
        raise ShapeError(f"lstm_step: state shapes h={h.shape} c={c.shape} incompatible with x={x.shape}, H={H}")
    gates = add(linear(x, p.w_ih, p.b), linear(h, p.w_hh))
    # one sigmoid over all blocks; the cell block's sigmoid is simply unused
    act = sigmoid(gates)
    i = columns(act, 0, H)
    f = columns(act, H, 2 * H)
    g = tanh(columns(gates, 2 * H, 3 * H))
    o = columns(act, 3 * H, 4 * H)
    c_new = add(mul(f, c), mul(i, g))
    h_new = mul(o, tanh(c_new))
    return h_new, c_new


# ---------------------------------------------------------------------------
# training utilities
# ---------------------------------------------------------------------------


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


def sgd_step(params: Iterable[Tensor], lr: float) -> None:
    """In-place ``p -= lr * grad`` for each tracked tensor, then reset grads."""
    for p in params:
        if p.grad is None:
            continue
        if lr != 0.0:
            p.data -= lr * p.grad
        p.grad[...] = 0.0


_STENCILS = {
    2: ((1, 0.5), (-1, -0.5)),
    # fourth order: truncation error O(eps**4) allows a larger eps, hence less round-off
    4: ((1, 2 / 3), (-1, -2 / 3), (2, -1 / 12), (-2, 1 / 12)),
}


def check_gradients(build_loss: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
                    order: int = 2) -> float:
    """Worst relative error between backprop and central differences.

    ``build_loss`` must rebuild the loss from the current parameter values on
    every call.  Relative error is ``|a - fd| / max(|a|, |fd|, 1e-8)``.
    ``order`` picks the 2nd- or 4th-order central stencil.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    if order not in _STENCILS:
        raise ContractError(f"order must be one of {sorted(_STENCILS)}")
    stencil = _STENCILS[order]

    def value() -> float:
        return float(build_loss().data)

    first, second = value(), value()
    if first != second:
        raise ContractError("loss is not deterministic (is dropout enabled?)")

    zero_grads(params)
    with Tape() as tape:
        loss = build_loss()
    tape.backward(loss)
    analytic = [p.grad.copy() for p in params]
    zero_grads(params)

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            fd = 0.0
            for step, weight in stencil:
                flat[j] = orig + step * eps
                fd += weight * value()
            flat[j] = orig
            fd /= eps
            aj = a.reshape(-1)[j]
            err = abs(aj - fd) / max(abs(aj), abs(fd), 1e-8)
            worst = max(worst, err)
    return worst
