"""Small reverse-mode autodiff over dense float64 numpy arrays.

Only the operations the decoder needs are provided. Broadcasting is limited
to scalar-vs-tensor, plus two explicit shared-operand forms: a 2-D weight on
the right of ``matmul`` and a trailing-axis bias in ``bias_add``. Every op
registers its own local gradient rule; ``backward`` walks the recorded graph
once in reverse topological order.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.array(values, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.values = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar for tests and small scripts
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return hadamard(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _make(values: np.ndarray, parents: Sequence[Tensor], op: str,
          rule: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = None
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = rule
    else:
        out._parents = ()
        out._backward = None
    return out


def _is_scalar(t: Tensor) -> bool:
    return t.values.size == 1 and t.values.ndim <= 1


def _reduce_scalar(g: np.ndarray, like: Tensor) -> np.ndarray:
    return np.asarray(g.sum()).reshape(like.shape)


# ----------------------------------------------------------------------------
# linear algebra
# ----------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Accepted forms: ``[m,k] @ [k,n]``, ``[...,m,k] @ [k,n]`` (shared right
    operand, e.g. a weight matrix) and ``[...,m,k] @ [...,k,n]`` with equal
    leading extents.
    """
    av, bv = a.values, b.values
    if av.ndim < 2 or bv.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {av.shape} and {bv.shape}")
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"inner extents differ: {av.shape} @ {bv.shape}")
    shared = bv.ndim == 2
    if not shared and av.shape[:-2] != bv.shape[:-2]:
        raise ShapeError(f"batch extents differ: {av.shape} @ {bv.shape}")
    out_v = av @ bv

    def rule(g):
        if a.requires_grad:
            _accumulate(a, g @ np.swapaxes(bv, -1, -2))
        if b.requires_grad:
            if shared:
                k, n = bv.shape
                _accumulate(b, av.reshape(-1, k).T @ g.reshape(-1, n))
            else:
                _accumulate(b, np.swapaxes(av, -1, -2) @ g)

    return _make(out_v, (a, b), "matmul", rule)


def bias_add(x: Tensor, bias: Tensor) -> Tensor:
    """Add a vector along the trailing axis (the bias of a linear map)."""
    if bias.values.ndim != 1 or bias.shape[0] != x.shape[-1]:
        raise ShapeError(f"bias {bias.shape} does not match trailing axis of {x.shape}")

    def rule(g):
        _accumulate(x, g)
        if bias.requires_grad:
            _accumulate(bias, g.reshape(-1, bias.shape[0]).sum(axis=0))

    return _make(x.values + bias.values, (x, bias), "bias_add", rule)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else bias_add(out, bias)


# ----------------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------------

def _check_pair(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_pair(a, b, "add")
    out_v = a.values + b.values

    def rule(g):
        for t in (a, b):
            if t.requires_grad:
                _accumulate(t, _reduce_scalar(g, t) if t.shape != g.shape else g)

    return _make(out_v, (a, b), "add", rule)


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _check_pair(a, b, "hadamard")
    av, bv = a.values, b.values
    out_v = av * bv

    def rule(g):
        if a.requires_grad:
            ga = g * bv
            _accumulate(a, _reduce_scalar(ga, a) if a.shape != ga.shape else ga)
        if b.requires_grad:
            gb = g * av
            _accumulate(b, _reduce_scalar(gb, b) if b.shape != gb.shape else gb)

    return _make(out_v, (a, b), "hadamard", rule)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.values * c, (x,), "scale", lambda g: _accumulate(x, g * c))


def sigmoid(x: Tensor) -> Tensor:
    v = x.values
    # split on sign so exp never overflows
    pos = v >= 0
    e = np.exp(np.where(pos, -v, v))
    s = np.where(pos, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(s, (x,), "sigmoid", lambda g: _accumulate(x, g * s * (1.0 - s)))


def relu(x: Tensor) -> Tensor:
    keep = x.values > 0
    return _make(np.where(keep, x.values, 0.0), (x,), "relu",
                 lambda g: _accumulate(x, np.where(keep, g, 0.0)))


def log(x: Tensor) -> Tensor:
    v = x.values
    if np.any(v <= 0):
        raise FloatingPointError("log of non-positive value")
    return _make(np.log(v), (x,), "log", lambda g: _accumulate(x, g / v))


_ELEMENTWISE = {
    "sigmoid": sigmoid,
    "relu": relu,
    "add": add,
    "scale": scale,
    "hadamard": hadamard,
}


def elementwise(op: str, *args):
    """Dispatch by name: ``elementwise("sigmoid", x)``, ``elementwise("scale", x, 2.0)``."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ----------------------------------------------------------------------------
# softmax
# ----------------------------------------------------------------------------

def masked_softmax(logits: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis; ``mask`` marks entries to exclude (True = masked).

    Masked entries come out as exact zeros.
    """
    v = logits.values
    if mask is None:
        shifted = v - v.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), v.shape)
        if np.any(mask.all(axis=-1)):
            raise ValueError("masked_softmax: a row has every entry masked")
        filled = np.where(mask, -np.inf, v)
        shifted = filled - filled.max(axis=-1, keepdims=True)
        e = np.where(mask, 0.0, np.exp(shifted))
    p = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        _accumulate(logits, p * (g - dot))

    return _make(p, (logits,), "masked_softmax", rule)


def softmax(x: Tensor) -> Tensor:
    return masked_softmax(x, None)


# ----------------------------------------------------------------------------
# structural
# ----------------------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    out_v = x.values.reshape(tuple(shape))
    return _make(out_v, (x,), "reshape", lambda g: _accumulate(x, g.reshape(old)))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out_v = np.ascontiguousarray(x.values.transpose(axes))
    return _make(out_v, (x,), "transpose", lambda g: _accumulate(x, g.transpose(inv)))


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    vals = [p.values for p in parts]
    out_v = np.concatenate(vals, axis=axis)
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def rule(g):
        for p, piece in zip(parts, np.split(g, bounds, axis=axis)):
            _accumulate(p, piece)

    return _make(out_v, tuple(parts), "concat", rule)


def pick(x: Tensor, index) -> Tensor:
    """Select ``x[..., index[...]]`` along the last axis; ``index`` has shape ``x.shape[:-1]``."""
    idx = np.asarray(index, dtype=np.int64)
    if idx.shape != x.shape[:-1]:
        raise ShapeError(f"index shape {idx.shape} vs leading shape {x.shape[:-1]}")
    out_v = np.take_along_axis(x.values, idx[..., None], axis=-1)[..., 0]

    def rule(g):
        full = np.zeros_like(x.values)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        _accumulate(x, full)

    return _make(out_v, (x,), "pick", rule)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.asarray(x.values.sum()), (x,), "sum",
                 lambda g: _accumulate(x, np.broadcast_to(g, shape)))


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.values.size
    return _make(np.asarray(x.values.mean()), (x,), "mean",
                 lambda g: _accumulate(x, np.broadcast_to(g / n, shape)))


# ----------------------------------------------------------------------------
# backward pass
# ----------------------------------------------------------------------------

class Tape:
    """Topologically ordered record of the nodes reachable from a root.

    Built fresh for every backward call, so it always mirrors the graph of
    the most recent forward pass.
    """

    def __init__(self, root: Tensor):
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
            for p in reversed(node._parents):
                if id(p) not in seen:
                    stack.append((p, False))
        self.nodes = order

    def __len__(self) -> int:
        return len(self.nodes)

    def run(self, seed: np.ndarray) -> None:
        root = self.nodes[-1]
        root.grad = seed
        for node in reversed(self.nodes):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def backward(loss: Tensor) -> None:
    if loss.values.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring grad")
    tape = Tape(loss)
    # interior grads are scratch; leaves keep accumulating across calls
    for node in tape.nodes:
        if node._backward is not None:
            node.grad = None
    tape.run(np.ones(loss.shape))
    for node in tape.nodes:
        if node._backward is not None:
            node.grad = None


def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
                            coords: Sequence[int] | None = None) -> float:
    """Max relative error between the analytic gradient and central differences.

    ``f`` maps a tensor to a scalar tensor. ``coords`` restricts the check to
    flat indices of ``x`` (useful for large parameter tensors).
    """
    probe = Tensor(x.values.copy(), requires_grad=True)
    out = f(probe)
    if out.requires_grad:
        backward(out)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.values)

    base = x.values.copy()
    flat = base.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(Tensor(base)).item()
        flat[i] = orig - eps
        lo = f(Tensor(base)).item()
        flat[i] = orig
        numeric = (hi - lo) / (2 * eps)
        a = analytic.reshape(-1)[i]
        err = abs(a - numeric) / (abs(a) + abs(numeric) + 1e-12)
        worst = max(worst, err)
    return worst
