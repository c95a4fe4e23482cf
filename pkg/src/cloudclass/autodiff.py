"""A small reverse-mode autodiff engine over numpy arrays.

Only the primitives the point cloud networks need are provided. Every op checks
its output for NaN/Inf and raises :class:`NumericError` naming itself, so a bad
value never propagates silently.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "NumericError",
    "Tensor",
    "Parameter",
    "no_grad",
    "record_branches",
    "add",
    "sub",
    "mul",
    "matmul",
    "bias_add",
    "relu",
    "concat",
    "dropout",
    "batch_norm",
    "max_reduce",
    "max_reduce_set",
    "softmax_cross_entropy",
    "gather",
    "reshape",
    "expand",
    "sum_",
    "adam_step",
    "grad_check",
    "GradCheckReport",
]


class NumericError(ArithmeticError):
    """A primitive produced a non-finite value."""


_ids = itertools.count()
_grad_enabled = True
_branch_log: list | None = None


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def record_branches():
    """Collect the discrete decisions (ReLU masks, argmax picks, neighbor tables) made while active."""
    global _branch_log
    prev, _branch_log = _branch_log, []
    try:
        yield _branch_log
    finally:
        _branch_log = prev


def log_branch(decision: np.ndarray) -> None:
    if _branch_log is not None:
        _branch_log.append(np.array(decision, copy=True))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self._op = "leaf"
        self._id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf.

        Nodes are visited in reverse creation order, which is a valid reverse
        topological order because an op's output is always created after its inputs.
        """
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError("implicit gradient only for scalar outputs")
            grad = np.ones_like(self.data)
        nodes = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if node._id in nodes:
                continue
            nodes[node._id] = node
            stack.extend(p for p in node._parents if p.requires_grad)
        grads = {self._id: np.asarray(grad, dtype=self.dtype)}
        for nid in sorted(nodes, reverse=True):
            node = nodes[nid]
            g = grads.pop(nid, None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                _check_finite(pg, node._op + " (backward)")
                if parent._id in grads:
                    grads[parent._id] = grads[parent._id] + pg
                else:
                    grads[parent._id] = pg


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite value produced by {op}")


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    out._op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise -------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul")


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias ``(F,)`` to the last axis of ``x``."""
    if b.ndim != 1 or b.shape[0] != x.shape[-1]:
        raise ValueError(f"bias shape {b.shape} does not match channels {x.shape[-1]}")
    return _node(x.data + b.data, (x, b),
                 lambda g: (g, g.reshape(-1, g.shape[-1]).sum(axis=0)), "bias_add")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    log_branch(mask)
    return _node(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


# -- linear algebra ------------------------------------------------------------------

def matmul(x: Tensor, w: Tensor) -> Tensor:
    """``x[..., k] @ w[k, n]``; leading axes of ``x`` are treated as a batch."""
    x = _wrap(x)
    w = _wrap(w, x)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ValueError(f"matmul shape mismatch: {x.shape} @ {w.shape}")
    x2 = x.data.reshape(-1, x.shape[-1])
    out = (x2 @ w.data).reshape(x.shape[:-1] + (w.shape[1],))

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        return gx, gw

    return _node(out, (x, w), backward, "matmul")


# -- structural ------------------------------------------------------------------------

def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as err:
        raise ValueError(f"concat shape mismatch: {[t.shape for t in tensors]}") from err
    bounds = np.cumsum(sizes)[:-1]
    return _node(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def reshape(x: Tensor, shape) -> Tensor:
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def expand(x: Tensor, shape) -> Tensor:
    """Broadcast ``x`` to ``shape`` (materialized)."""
    out = np.ascontiguousarray(np.broadcast_to(x.data, shape))
    return _node(out, (x,), lambda g: (_unbroadcast(g, x.shape),), "expand")


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(out, (x,), backward, "sum")


def gather(x: Tensor, idx: np.ndarray) -> Tensor:
    """Batched row gather: ``x`` is ``(B, N, F)``, ``idx`` is ``(B, ...)`` ints into N."""
    idx = np.asarray(idx)
    b, n, f = x.shape
    if idx.shape[0] != b:
        raise ValueError(f"index batch {idx.shape[0]} does not match tensor batch {b}")
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError("gather index out of range")
    flat = (idx.reshape(b, -1) + (np.arange(b) * n)[:, None]).reshape(-1)
    out = x.data.reshape(b * n, f)[flat].reshape(idx.shape + (f,))

    def backward(g):
        gx = np.zeros((b * n, f), dtype=g.dtype)
        np.add.at(gx, flat, g.reshape(-1, f))
        return (gx.reshape(x.shape),)

    return _node(out, (x,), backward, "gather")


# -- stochastic / normalization -----------------------------------------------------------

def dropout(x: Tensor, p: float, seed: int, training: bool) -> Tensor:
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability {p} outside [0, 1)")
    if not training or p == 0.0:
        return x
    keep = np.random.Generator(np.random.PCG64(seed)).random(x.shape) >= p
    scale = (keep / (1.0 - p)).astype(x.dtype)
    return _node(x.data * scale, (x,), lambda g: (g * scale,), "dropout")


BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """Per-channel normalization over every axis but the last.

    In training mode batch statistics are used and the running buffers are
    updated in place as ``running = momentum * running + (1 - momentum) * batch``.
    """
    f = x.shape[-1]
    x2 = x.data.reshape(-1, f)
    n = x2.shape[0]
    if not training:
        inv_std = 1.0 / np.sqrt(running_var + eps)
        scale = (gamma.data * inv_std).astype(x.dtype)
        shift = (beta.data - running_mean * scale).astype(x.dtype)
        out = x.data * scale + shift

        def backward_eval(g):
            g2 = g.reshape(-1, f)
            return g * scale, (g2 * ((x2 - running_mean) * inv_std)).sum(axis=0).astype(x.dtype), g2.sum(axis=0)

        return _node(out, (x, gamma, beta), backward_eval, "batch_norm")
    if n < 2:
        raise ValueError("batch_norm in training mode needs at least 2 elements per channel")
    mean = x2.mean(axis=0)
    centered = x2 - mean
    var = (centered * centered).mean(axis=0)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = (xhat * gamma.data + beta.data).reshape(x.shape)
    running_mean *= momentum
    running_mean += (1.0 - momentum) * mean
    running_var *= momentum
    running_var += (1.0 - momentum) * var * n / (n - 1)

    def backward(g):
        g2 = g.reshape(-1, f)
        ggamma = (g2 * xhat).sum(axis=0)
        gbeta = g2.sum(axis=0)
        gxhat = g2 * gamma.data
        gx = inv_std / n * (n * gxhat - gxhat.sum(axis=0) - xhat * (gxhat * xhat).sum(axis=0))
        return gx.reshape(x.shape), ggamma, gbeta

    return _node(out.astype(x.dtype), (x, gamma, beta), backward, "batch_norm")


# -- reductions / losses -------------------------------------------------------------------

def max_reduce(x: Tensor, axis: int = -2):
    """Max over ``axis``; returns ``(values, argmax)``. Gradient goes to the first maximal entry."""
    axis = axis % x.ndim
    arg = np.argmax(x.data, axis=axis)
    log_branch(arg)
    arg_k = np.expand_dims(arg, axis)
    out = np.take_along_axis(x.data, arg_k, axis=axis).squeeze(axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, arg_k, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _node(out, (x,), backward, "max_reduce"), arg


def max_reduce_set(x: Tensor):
    """``(B, N, F) -> (B, F)`` max over the set axis."""
    if x.ndim != 3 or x.shape[1] < 1:
        raise ValueError(f"expected (B, N>=1, F), got {x.shape}")
    return max_reduce(x, axis=1)


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy of ``(..., C)`` logits against integer targets of shape ``(...)``."""
    targets = np.asarray(targets, dtype=np.int64)
    c = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ValueError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= c):
        raise ValueError(f"target outside [0, {c})")
    z = logits.data.reshape(-1, c)
    t = targets.reshape(-1)
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(len(t))
    loss = (logsum - shifted[rows, t]).mean()

    def backward(g):
        probs = np.exp(shifted - logsum[:, None])
        probs[rows, t] -= 1.0
        return ((probs * (g / len(t))).reshape(logits.shape).astype(logits.dtype),)

    return _node(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "softmax_cross_entropy")


# -- parameters and optimization ----------------------------------------------------------

@dataclass(eq=False)
class Parameter:
    name: str
    tensor: Tensor
    m: np.ndarray = field(init=False)
    v: np.ndarray = field(init=False)
    step: int = 0

    def __post_init__(self):
        self.tensor.requires_grad = True
        self.m = np.zeros_like(self.tensor.data)
        self.v = np.zeros_like(self.tensor.data)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad


def adam_step(params: Sequence[Parameter], lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place. Every parameter must carry a gradient."""
    for p in params:
        if p.tensor.grad is None:
            raise ValueError(f"parameter {p.name!r} has no gradient")
    for p in params:
        g = p.tensor.grad
        p.step += 1
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * g * g
        m_hat = p.m / (1.0 - beta1 ** p.step)
        v_hat = p.v / (1.0 - beta2 ** p.step)
        with np.errstate(over="ignore", invalid="ignore"):
            new = (p.tensor.data - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.tensor.dtype)
        if not np.all(np.isfinite(new)):
            raise NumericError(f"adam_step: non-finite update for parameter {p.name!r}")
        p.tensor.data = new


# -- gradient checking ------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    per_input: dict[str, float]
    checked: int
    skipped: int
    worst: tuple[str, int] | None
    tol: float

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_rel_error < self.tol

    def __str__(self):
        return (f"grad_check: max rel err {self.max_rel_error:.3e} over {self.checked} elements "
                f"({self.skipped} skipped at kinks), tol {self.tol:g} -> {'PASS' if self.passed else 'FAIL'}")


def _patterns_equal(a: list, b: list) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(f: Callable[[], Tensor], inputs, delta: float = 1e-3, tol: float = 1e-4,
               max_elements: int | None = None, seed: int = 0, abs_floor: float = 1e-6) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f()`` with central differences.

    ``inputs`` is a sequence of tensors or a mapping name -> tensor; ``f`` reads
    them through closure. The relative error per element is
    ``|a - n| / max(|a|, |n|, abs_floor)``. Elements whose +/-delta probes change
    any recorded discrete decision (ReLU pattern, argmax, neighbor table) are
    skipped and counted, since the function is not differentiable there.
    Large inputs are subsampled to ``max_elements`` entries.
    """
    named = dict(inputs) if isinstance(inputs, dict) else {f"input{i}": t for i, t in enumerate(inputs)}
    for t in named.values():
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None
    with record_branches() as base_pattern:
        out = f()
    if out.data.size != 1:
        raise ValueError("grad_check needs a scalar function")
    out.backward()
    analytic = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)).copy() for k, t in named.items()}

    rng = np.random.default_rng(seed)
    per_input: dict[str, float] = {}
    checked = skipped = 0
    worst_err, worst = 0.0, None
    with no_grad():
        for name, t in named.items():
            size = t.data.size
            elems = np.arange(size)
            if max_elements is not None and size > max_elements:
                elems = np.sort(rng.choice(size, max_elements, replace=False))
            flat = t.data.reshape(-1)
            in_err = 0.0
            for e in elems:
                orig = flat[e]
                flat[e] = orig + delta
                with record_branches() as pat_p:
                    fp = float(f().data)
                flat[e] = orig - delta
                with record_branches() as pat_m:
                    fm = float(f().data)
                flat[e] = orig
                if not (_patterns_equal(base_pattern, pat_p) and _patterns_equal(base_pattern, pat_m)):
                    skipped += 1
                    continue
                num = (fp - fm) / (2 * delta)
                ana = float(analytic[name].reshape(-1)[e])
                err = abs(ana - num) / max(abs(ana), abs(num), abs_floor)
                checked += 1
                in_err = max(in_err, err)
                if err >= worst_err:
                    worst_err, worst = err, (name, int(e))
            per_input[name] = in_err
    return GradCheckReport(worst_err, per_input, checked, skipped, worst, tol)
