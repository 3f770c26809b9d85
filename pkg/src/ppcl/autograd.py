"""NumPy-backed tensors with reverse-mode automatic differentiation.

Define-by-run: every op records a backward closure on its output, and
``backward`` replays the closures in reverse topological order over the
implicit tape. Ops accept a mix of Tensor and plain ndarray operands; the
result is a Tensor when any operand is a Tensor, and gradient tracking
engages only when some input requires grad. Passing raw arrays (for
example frozen model parameters) therefore skips graph construction
entirely and runs at plain NumPy speed, while producing bit-identical
values to the tracked path.

All data is float64.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .errors import ShapeError

NORM_EPS = 1e-12  # added to each norm in cosine_similarity


class Tensor:
    """A dense float64 array plus an optional gradient buffer.

    ``grad`` is allocated (zero-filled) for tensors that require grad and
    stays ``None`` otherwise; a no-grad tensor never accumulates anything.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_prev", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self.name = name
        self._prev: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def backward(self) -> None:
        backward(self)

    # operator sugar; the module-level functions do the real work
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"


def as_tensor(x, requires_grad: bool = False) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=requires_grad)


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _tracked(*xs) -> bool:
    return any(isinstance(x, Tensor) and x.requires_grad for x in xs)


def _any_tensor(*xs) -> bool:
    return any(isinstance(x, Tensor) for x in xs)


def _make(out_data, parents, backward_fn):
    """Wrap an op result, attaching the closure only when grads can flow."""
    tensor_parents = tuple(p for p in parents if isinstance(p, Tensor))
    out = Tensor(out_data, requires_grad=_tracked(*tensor_parents))
    if out.requires_grad:
        out._prev = tensor_parents
        out._backward = backward_fn
    return out


def _accum(t, g) -> None:
    if isinstance(t, Tensor) and t.requires_grad:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to `shape`, undoing NumPy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def topo_tape(root: Tensor) -> list[Tensor]:
    """The computation tape: nodes reachable from `root`, inputs first.

    Iterative DFS so deep graphs do not hit the recursion limit; a node
    appears exactly once, so the backward sweep visits each node once.
    """
    tape: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            tape.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._prev:
            if id(parent) not in visited:
                stack.append((parent, False))
    return tape


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Backpropagate from a scalar loss.

    Populates ``grad`` on every requires-grad tensor reachable from
    ``loss`` and returns a map from tensor id to its gradient buffer.
    Tensors not on the tape are left untouched.
    """
    if not isinstance(loss, Tensor):
        raise ShapeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    tape = topo_tape(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape):
        if node._backward is not None:
            node._backward()
    return {id(node): node.grad for node in tape if node.requires_grad}


# ---------------------------------------------------------------------------
# elementwise and linear-algebra ops


def add(a, b):
    out = _data(a) + _data(b)
    if not _any_tensor(a, b):
        return out

    def back():
        _accum(a, _unbroadcast(res.grad, _data(a).shape))
        _accum(b, _unbroadcast(res.grad, _data(b).shape))

    res = _make(out, (a, b), back)
    return res


def neg(a):
    out = -_data(a)
    if not _any_tensor(a):
        return out

    def back():
        _accum(a, -res.grad)

    res = _make(out, (a,), back)
    return res


def mul(a, b):
    da, db = _data(a), _data(b)
    out = da * db
    if not _any_tensor(a, b):
        return out

    def back():
        _accum(a, _unbroadcast(res.grad * db, da.shape))
        _accum(b, _unbroadcast(res.grad * da, db.shape))

    res = _make(out, (a, b), back)
    return res


def matmul(a, b):
    da, db = _data(a), _data(b)
    if da.ndim != 2 or db.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {da.shape} @ {db.shape}")
    if da.shape[1] != db.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {da.shape} @ {db.shape}")
    out = da @ db
    if not _any_tensor(a, b):
        return out

    def back():
        _accum(a, res.grad @ db.T)
        _accum(b, da.T @ res.grad)

    res = _make(out, (a, b), back)
    return res


def relu(a):
    da = _data(a)
    out = np.maximum(da, 0.0)
    if not _any_tensor(a):
        return out

    def back():
        _accum(a, res.grad * (da > 0.0))

    res = _make(out, (a,), back)
    return res


def tsum(a):
    out = _data(a).sum()
    if not _any_tensor(a):
        return np.float64(out)

    def back():
        _accum(a, np.full_like(_data(a), res.grad.reshape(())))

    res = _make(out, (a,), back)
    return res


def tmean(a):
    da = _data(a)
    out = da.mean()
    if not _any_tensor(a):
        return np.float64(out)

    def back():
        _accum(a, np.full_like(da, res.grad.reshape(()) / da.size))

    res = _make(out, (a,), back)
    return res


def transpose(a):
    da = _data(a)
    if da.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {da.shape}")
    out = da.T.copy()
    if not _any_tensor(a):
        return out

    def back():
        _accum(a, res.grad.T)

    res = _make(out, (a,), back)
    return res


def reshape(a, shape):
    da = _data(a)
    out = da.reshape(shape)
    if not _any_tensor(a):
        return out

    def back():
        _accum(a, res.grad.reshape(da.shape))

    res = _make(out, (a,), back)
    return res


# ---------------------------------------------------------------------------
# structural ops used to assemble sequences and attention heads


def concat_rows(parts: Sequence):
    """Stack matrices along axis 0 (prompt blocks in front of token rows)."""
    datas = [_data(p) for p in parts]
    out = np.concatenate(datas, axis=0)
    if not _any_tensor(*parts):
        return out

    offsets = np.cumsum([0] + [d.shape[0] for d in datas])

    def back():
        for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accum(part, res.grad[lo:hi])

    res = _make(out, tuple(parts), back)
    return res


def concat_cols(parts: Sequence):
    datas = [_data(p) for p in parts]
    out = np.concatenate(datas, axis=1)
    if not _any_tensor(*parts):
        return out

    offsets = np.cumsum([0] + [d.shape[1] for d in datas])

    def back():
        for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accum(part, res.grad[:, lo:hi])

    res = _make(out, tuple(parts), back)
    return res


def slice_cols(a, start: int, stop: int):
    da = _data(a)
    out = da[:, start:stop].copy()
    if not _any_tensor(a):
        return out

    def back():
        g = np.zeros_like(da)
        g[:, start:stop] = res.grad
        _accum(a, g)

    res = _make(out, (a,), back)
    return res


def gather_rows(table, ids: np.ndarray):
    """Row lookup (embedding): out[i] = table[ids[i]]."""
    dt = _data(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= dt.shape[0]):
        raise IndexError(f"row id out of range [0, {dt.shape[0]})")
    out = dt[ids]
    if not _any_tensor(table):
        return out

    def back():
        g = np.zeros_like(dt)
        np.add.at(g, ids, res.grad)
        _accum(table, g)

    res = _make(out, (table,), back)
    return res


# ---------------------------------------------------------------------------
# fused nonlinear ops (hand gradients, all finite-difference checked)


def softmax_rows(a):
    """Row-wise softmax over the last axis of a matrix."""
    da = _data(a)
    shifted = da - da.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    if not _any_tensor(a):
        return out

    def back():
        g = res.grad
        dot = (g * out).sum(axis=-1, keepdims=True)
        _accum(a, (g - dot) * out)

    res = _make(out, (a,), back)
    return res


def layer_norm(x, gain, bias, eps: float = 1e-5):
    """Normalize each row to zero mean / unit variance, then scale + shift."""
    dx, dg, db = _data(x), _data(gain), _data(bias)
    mu = dx.mean(axis=-1, keepdims=True)
    var = ((dx - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (dx - mu) * inv
    out = xhat * dg + db
    if not _any_tensor(x, gain, bias):
        return out

    def back():
        g = res.grad
        _accum(gain, _unbroadcast(g * xhat, dg.shape))
        _accum(bias, _unbroadcast(g, db.shape))
        if isinstance(x, Tensor) and x.requires_grad:
            dxhat = g * dg
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accum(x, inv * (dxhat - m1 - xhat * m2))

    res = _make(out, (x, gain, bias), back)
    return res


def cosine_similarity(u, v):
    """u.v / ((|u| + eps) (|v| + eps)), differentiable in both arguments."""
    du, dv = _data(u), _data(v)
    if du.shape != dv.shape or du.ndim != 1:
        raise ShapeError(f"cosine_similarity expects equal-length vectors, got {du.shape} and {dv.shape}")
    nu = np.sqrt(du @ du)
    nv = np.sqrt(dv @ dv)
    denom = (nu + NORM_EPS) * (nv + NORM_EPS)
    s = du @ dv
    out = s / denom
    if not _any_tensor(u, v):
        return np.float64(out)

    def back():
        g = res.grad.reshape(())
        # d sim / du = v/denom - sim * u / (|u| (|u|+eps)); eps also guards u = 0
        _accum(u, g * (dv / denom - out * du / ((nu + NORM_EPS) * (nu + NORM_EPS))))
        _accum(v, g * (du / denom - out * dv / ((nv + NORM_EPS) * (nv + NORM_EPS))))

    res = _make(out, (u, v), back)
    return res


def softmax_cross_entropy(logits, targets: np.ndarray):
    """Mean over positions of -log softmax(logits)[target].

    `logits` is (T, V); `targets` holds T token indices.
    """
    dl = _data(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if dl.ndim != 2:
        raise ShapeError(f"logits must be (positions, vocab), got {dl.shape}")
    if targets.ndim != 1 or targets.shape[0] != dl.shape[0]:
        raise ShapeError(f"targets shape {targets.shape} does not match logits {dl.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= dl.shape[1]):
        raise IndexError(f"target index out of range [0, {dl.shape[1]})")
    shifted = dl - dl.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1)) + dl.max(axis=-1)
    picked = dl[np.arange(dl.shape[0]), targets]
    out = (lse - picked).mean()
    if not _any_tensor(logits):
        return np.float64(out)

    def back():
        probs = np.exp(shifted)
        probs /= probs.sum(axis=-1, keepdims=True)
        probs[np.arange(dl.shape[0]), targets] -= 1.0
        _accum(logits, res.grad.reshape(()) * probs / dl.shape[0])

    res = _make(out, (logits,), back)
    return res


def parameters(tensors: Iterable) -> list[Tensor]:
    """Filter an iterable down to grad-requiring tensors."""
    return [t for t in tensors if isinstance(t, Tensor) and t.requires_grad]
