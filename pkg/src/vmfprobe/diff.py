"""A small tape-based reverse-mode differentiation engine over numpy arrays.

Only what the encoder and the losses need: 1-D and 2-D float64 tensors,
no general broadcasting: a bias row may be added to every row of a matrix,
and :func:`scale_rows` multiplies the rows of a matrix by a vector.

    tape = Tape()
    x = tape.leaf(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    loss = mean(x * x)
    grads = backward(tape, loss)        # grads[x] == 2 x / 3
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "tape", "grad", "__weakref__")

    def __init__(self, data, tape: "Tape", requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on a tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(self.tape.constant(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not a primitive; use reciprocal()")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


class Tape:
    """Ordered record of primitive applications; inputs always precede outputs."""

    def __init__(self):
        self.nodes: list[Node] = []

    def leaf(self, data, requires_grad: bool = False) -> Tensor:
        return Tensor(np.array(data, dtype=np.float64), self, requires_grad)

    def constant(self, data) -> Tensor:
        if isinstance(data, Tensor):
            return data
        return Tensor(data, self, False)

    def record(self, op, inputs, out_data, backward) -> Tensor:
        needs = any(t.requires_grad for t in inputs)
        out = Tensor(out_data, self, needs)
        if needs:
            self.nodes.append(Node(op, tuple(inputs), out, backward))
        return out


def _as_tensor(x, tape: Tape) -> Tensor:
    if isinstance(x, Tensor):
        if x.tape is not tape:
            raise ValueError("tensors from different tapes cannot be combined")
        return x
    return tape.constant(x)


def _pair(a, b) -> tuple[Tensor, Tensor, Tape]:
    tape = a.tape if isinstance(a, Tensor) else b.tape
    return _as_tensor(a, tape), _as_tensor(b, tape), tape


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse sweep over ``tape``; returns (and stores in ``.grad``) leaf gradients."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(node.output) for node in tape.nodes}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.array(gi, dtype=np.float64)
            if key not in produced:
                leaves[key] = inp
    out = {}
    for key, leaf in leaves.items():
        leaf.grad = grads.get(key, np.zeros_like(leaf.data))
        out[leaf] = leaf.grad
    if loss.requires_grad and id(loss) not in produced:
        loss.grad = np.ones_like(loss.data)
        out[loss] = loss.grad
    return out


# ---------------------------------------------------------------- primitives


def matmul(a, b) -> Tensor:
    a, b, tape = _pair(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    return tape.record("matmul", (a, b), A @ B, lambda g: (g @ B.T, A.T @ g))


def _expand(a: Tensor, b: Tensor, op: str) -> str:
    if a.shape == b.shape:
        return "same"
    if b.data.ndim == 0:
        return "scalar"
    if op == "add" and a.data.ndim == 2 and b.data.ndim == 1 and b.shape[0] == a.shape[1]:
        return "bias"
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, kind: str) -> np.ndarray:
    if kind == "same":
        return g
    if kind == "scalar":
        return np.asarray(g.sum())
    return g.sum(axis=0)  # bias


def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may also be a scalar or a bias row added to every row of ``a``."""
    a, b, tape = _pair(a, b)
    if a.data.ndim < b.data.ndim:
        a, b = b, a
    kind = _expand(a, b, "add")
    return tape.record("add", (a, b), a.data + b.data, lambda g: (g, _reduce_to(g, kind)))


def sub(a, b) -> Tensor:
    a, b, tape = _pair(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")
    return tape.record("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a, b) -> Tensor:
    """Elementwise product of same-shaped tensors, or tensor times scalar."""
    a, b, tape = _pair(a, b)
    if a.data.ndim < b.data.ndim:
        a, b = b, a
    kind = _expand(a, b, "mul")
    A, B = a.data, b.data
    return tape.record("mul", (a, b), A * B, lambda g: (g * B, _reduce_to(g * A, kind)))


def scale_rows(m, v) -> Tensor:
    """Multiply row ``i`` of matrix ``m`` by ``v[i]``."""
    m, v, tape = _pair(m, v)
    if m.data.ndim != 2 or v.data.ndim != 1 or v.shape[0] != m.shape[0]:
        raise ShapeError(f"scale_rows shapes {m.shape} and {v.shape}")
    M, V = m.data, v.data
    return tape.record(
        "scale_rows", (m, v), M * V[:, None], lambda g: (g * V[:, None], np.einsum("ij,ij->i", g, M))
    )


def reciprocal(a: Tensor) -> Tensor:
    A = a.data
    if np.any(A == 0):
        raise ZeroDivisionError("reciprocal of zero")
    out = 1.0 / A
    return a.tape.record("reciprocal", (a,), out, lambda g: (-g * out * out,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return a.tape.record("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return a.tape.record("softplus", (a,), out, lambda g: (g * _sigmoid(x),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return a.tape.record("exp", (a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    A = a.data
    if np.any(A <= 0):
        raise ValueError("log of a non-positive value")
    return a.tape.record("log", (a,), np.log(A), lambda g: (g / A,))


def l2_normalize_rows(a: Tensor) -> Tensor:
    """Row-wise ``v / ||v||``; backward applies ``(I - u u^T) / ||v||``."""
    if a.data.ndim != 2:
        raise ShapeError("l2_normalize_rows needs a matrix")
    norms = np.linalg.norm(a.data, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("l2_normalize_rows: zero row has no direction")
    u = a.data / norms

    def back(g):
        return ((g - u * np.einsum("ij,ij->i", g, u)[:, None]) / norms,)

    return a.tape.record("l2_normalize_rows", (a,), u, back)


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    A = a.data
    if axis is None:
        return a.tape.record("sum", (a,), np.asarray(A.sum()), lambda g: (np.full_like(A, g),))
    if A.ndim != 2 or axis not in (0, 1):
        raise ShapeError("sum over an axis needs a matrix and axis 0 or 1")
    if axis == 1:
        return a.tape.record("sum", (a,), A.sum(axis=1), lambda g: (np.repeat(g[:, None], A.shape[1], 1),))
    return a.tape.record("sum", (a,), A.sum(axis=0), lambda g: (np.repeat(g[None, :], A.shape[0], 0),))


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(sum(a, axis), 1.0 / n)


def dot_rows(a, b) -> Tensor:
    a, b, tape = _pair(a, b)
    if a.shape != b.shape or a.data.ndim != 2:
        raise ShapeError(f"dot_rows shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data
    return tape.record(
        "dot_rows", (a, b), np.einsum("ij,ij->i", A, B), lambda g: (g[:, None] * B, g[:, None] * A)
    )


def cosine_rows(a, b) -> Tensor:
    a, b, _ = _pair(a, b)
    return dot_rows(l2_normalize_rows(a), l2_normalize_rows(b))


def concat_rows(a, b) -> Tensor:
    a, b, tape = _pair(a, b)
    if a.data.ndim != b.data.ndim or a.shape[1:] != b.shape[1:]:
        raise ShapeError(f"concat_rows shapes {a.shape} and {b.shape}")
    n = a.shape[0]
    return tape.record(
        "concat_rows", (a, b), np.concatenate([a.data, b.data]), lambda g: (g[:n], g[n:])
    )


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("transpose needs a matrix")
    return a.tape.record("transpose", (a,), a.data.T.copy(), lambda g: (g.T,))


def take(a: Tensor, rows, cols) -> Tensor:
    """Gather ``a[rows[i], cols[i]]`` into a vector."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, (rows, cols), g)
        return (out,)

    return a.tape.record("take", (a,), a.data[rows, cols], back)


def masked_logsumexp_rows(a: Tensor, mask: np.ndarray) -> Tensor:
    """Row-wise ``log sum_{mask} exp(a)``; masked-out entries are excluded."""
    mask = np.asarray(mask, dtype=bool)
    if a.data.ndim != 2 or mask.shape != a.shape:
        raise ShapeError("masked_logsumexp_rows needs a matrix and a same-shaped mask")
    if not mask.any(axis=1).all():
        raise ValueError("every row needs at least one unmasked entry")
    A = np.where(mask, a.data, -np.inf)
    m = A.max(axis=1, keepdims=True)
    e = np.exp(A - m)
    s = e.sum(axis=1, keepdims=True)
    out = (m + np.log(s))[:, 0]
    soft = e / s
    return a.tape.record("masked_logsumexp_rows", (a,), out, lambda g: (g[:, None] * soft,))


def householder_rows(mu: Tensor, y: np.ndarray) -> Tensor:
    """Reflect each constant row ``y_i`` by the Householder map taking ``e_1`` to ``mu_i``.

    ``x = y - u (u.y) / s`` with ``u = e_1 - mu`` and ``s = 1 - mu_1``; rows
    with ``mu = e_1`` are passed through unchanged. Gradient flows to ``mu``
    only (``y`` is treated as a sampled constant).
    """
    M = mu.data
    y = np.asarray(y, dtype=np.float64)
    if M.shape != y.shape or M.ndim != 2:
        raise ShapeError(f"householder_rows shapes {M.shape} and {y.shape}")
    u = -M.copy()
    u[:, 0] += 1.0
    s = 1.0 - M[:, 0]
    live = s > 1e-12
    inv_s = np.where(live, 1.0 / np.where(live, s, 1.0), 0.0)
    a = np.einsum("ij,ij->i", u, y)
    out = y - (a * inv_s)[:, None] * u

    def back(g):
        gu = np.einsum("ij,ij->i", g, u)
        grad = (a * inv_s)[:, None] * g + (gu * inv_s)[:, None] * y
        grad[:, 0] -= gu * a * inv_s * inv_s
        return (grad,)

    return mu.tape.record("householder_rows", (mu,), out, back)


# ---------------------------------------------------------------- checking


def numeric_gradient(f: Callable[[Tensor], Tensor], point: np.ndarray, h: float = 1e-5) -> np.ndarray:
    point = np.asarray(point, dtype=np.float64)
    grad = np.zeros_like(point)
    flat = grad.reshape(-1)
    for i in range(point.size):
        shifted = point.copy().reshape(-1)
        shifted[i] += h
        up = f(Tape().leaf(shifted.reshape(point.shape))).item()
        shifted[i] -= 2 * h
        down = f(Tape().leaf(shifted.reshape(point.shape))).item()
        flat[i] = (up - down) / (2 * h)
    return grad


def analytic_gradient(f: Callable[[Tensor], Tensor], point: np.ndarray) -> np.ndarray:
    tape = Tape()
    x = tape.leaf(point, requires_grad=True)
    grads = backward(tape, f(x))
    return grads.get(x, np.zeros_like(x.data))


def gradient_check(f: Callable[[Tensor], Tensor], point, h: float = 1e-5) -> float:
    """Worst per-coordinate relative error between tape and central-difference gradients.

    ``f`` maps a tensor (built on whatever tape it is given) to a scalar
    tensor. The denominator is ``max(|analytic|, |numeric|, 1e-8)``.
    """
    point = np.asarray(point, dtype=np.float64)
    a = analytic_gradient(f, point)
    n = numeric_gradient(f, point, h)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return float(np.max(np.abs(a - n) / denom)) if point.size else 0.0


def unflatten(flat: Tensor, shapes: Sequence[tuple[int, ...]]) -> list[Tensor]:
    """Split a flat parameter vector into tensors of the given shapes (differentiably)."""
    out = []
    offset = 0
    for shape in shapes:
        size = int(np.prod(shape))
        idx = np.arange(offset, offset + size)
        piece = _slice(flat, idx, shape)
        out.append(piece)
        offset += size
    if offset != flat.data.size:
        raise ShapeError(f"flat vector has {flat.data.size} entries, shapes need {offset}")
    return out


def _slice(flat: Tensor, idx: np.ndarray, shape) -> Tensor:
    n = flat.data.size

    def back(g):
        out = np.zeros(n)
        out[idx] = g.reshape(-1)
        return (out,)

    return flat.tape.record("slice", (flat,), flat.data[idx].reshape(shape), back)
