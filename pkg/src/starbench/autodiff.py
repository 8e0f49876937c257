"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Values are wrapped in :class:`Var`. Operations on ``Var`` objects record a
node (inputs, op kind, backward rule) whenever any input requires a gradient;
:func:`grad` / :meth:`ComputeGraph.backward` walk the recorded nodes in
reverse topological order.

Only what the MLP policies, PPO, the attacks and STAR need is supported:
affine layers, tanh, sigmoid, elementwise arithmetic with broadcasting,
reductions, log/exp, clipping, min/max and a diagonal Gaussian log-density.
"""
from __future__ import annotations

import itertools
import math
from typing import Callable, Iterable, Mapping

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)

_ids = itertools.count()


class AutodiffError(RuntimeError):
    pass


class ShapeError(AutodiffError):
    def __init__(self, op: str, node: int, detail: str):
        super().__init__(f"shape mismatch in {op} (node {node}): {detail}")
        self.op = op
        self.node = node


class NonFiniteError(AutodiffError):
    def __init__(self, op: str, node: int):
        super().__init__(f"non-finite value produced by {op} (node {node})")
        self.op = op
        self.node = node


class Var:
    """A dense float64 value that may carry a gradient."""

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward", "id", "name")
    __array_priority__ = 100  # make ndarray + Var dispatch to Var

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.parents: tuple[Var, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self.id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Var(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    # arithmetic sugar
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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def leaf(x, name: str | None = None) -> Var:
    """A differentiable input (parameter or state)."""
    return Var(np.array(x, dtype=np.float64), requires_grad=True, name=name)


def _make(op: str, data: np.ndarray, parents: tuple[Var, ...], backward) -> Var:
    out = Var(data)
    out.op = op
    if not np.all(np.isfinite(out.data)):
        raise NonFiniteError(op, out.id)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Var, b: Var) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, next(_ids), f"{a.shape} vs {b.shape}") from None


# elementwise binary ops


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    _broadcast_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    _broadcast_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    _broadcast_shape("mul", a, b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return _make("div", out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def minimum(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    _broadcast_shape("minimum", a, b)
    pick_a = a.data <= b.data
    return _make("minimum", np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)))


def maximum(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    _broadcast_shape("maximum", a, b)
    pick_a = a.data >= b.data
    return _make("maximum", np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)))


# unary ops


def neg(a) -> Var:
    a = as_var(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def tanh(a) -> Var:
    a = as_var(a)
    out = np.tanh(a.data)
    return _make("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Var:
    a = as_var(a)
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    e = np.exp(a.data[~pos])
    out[~pos] = e / (1.0 + e)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def log(a) -> Var:
    a = as_var(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make("log", out, (a,), lambda g: (g / a.data,))


def exp(a) -> Var:
    a = as_var(a)
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def square(a) -> Var:
    a = as_var(a)
    return _make("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def clip(a, lo: float, hi: float) -> Var:
    a = as_var(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make("clip", np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def stop_gradient(a) -> Var:
    return Var(as_var(a).data.copy())


# structural ops


def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    if a.data.ndim == 0 or b.data.ndim == 0 or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", next(_ids), f"{a.shape} @ {b.shape}")

    def backward(g):
        if b.data.ndim == 2:
            ga = g @ b.data.T
            gb = np.outer(a.data, g) if a.data.ndim == 1 else a.data.T @ g
        else:
            ga = np.multiply.outer(g, b.data)
            gb = g * a.data if a.data.ndim == 1 else a.data.T @ g
        return ga, gb

    return _make("matmul", a.data @ b.data, (a, b), backward)


def affine(x, w, b) -> Var:
    """``x @ w + b`` as a single node (the dense layer)."""
    x, w, b = as_var(x), as_var(w), as_var(b)
    if x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError("affine", next(_ids), f"x{x.shape} w{w.shape} b{b.shape}")

    def backward(g):
        gx = g @ w.data.T
        if x.data.ndim == 1:
            gw = np.outer(x.data, g)
            gb = g
        else:
            gw = x.data.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
        return gx, gw, gb

    return _make("affine", x.data @ w.data + b.data, (x, w, b), backward)


def sum(a, axis: int | None = None) -> Var:  # noqa: A001 - mirrors numpy
    a = as_var(a)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make("sum", np.asarray(a.data.sum(axis=axis)), (a,), backward)


def mean(a, axis: int | None = None) -> Var:
    a = as_var(a)
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis), 1.0 / n)


def index(a, idx) -> Var:
    a = as_var(a)

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make("index", np.asarray(a.data[idx]), (a,), backward)


# losses / densities


def squared_error(pred, target) -> Var:
    """Mean of ``(pred - target)**2``."""
    return mean(square(sub(pred, target)))


def gaussian_log_prob(x, mean_, log_std) -> Var:
    """Diagonal Gaussian log-density summed over the last axis."""
    x, mean_, log_std = as_var(x), as_var(mean_), as_var(log_std)
    z = div(sub(x, mean_), exp(log_std))
    per_dim = sub(mul(square(z), -0.5), add(log_std, 0.5 * LOG_2PI))
    return sum(per_dim, axis=-1)


# traversal


def _topological(root: Var) -> list[Var]:
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and p.id not in seen:
                stack.append((p, False))
    return order


def backprop(root: Var, seed: np.ndarray | float | None = None) -> None:
    """Accumulate ``d root / d leaf`` into ``leaf.grad`` for every reachable leaf."""
    if seed is None:
        if root.data.size != 1:
            raise AutodiffError("seed required for non-scalar output")
        seed = np.ones_like(root.data)
    seed = np.asarray(seed, dtype=np.float64)
    if seed.shape != root.shape:
        raise ShapeError("backward", root.id, f"seed {seed.shape} vs output {root.shape}")
    if not root.requires_grad:
        return
    grads: dict[int, np.ndarray] = {root.id: seed}
    for node in reversed(_topological(root)):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64)
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = pg


def grad(f: Callable[..., Var], *args: np.ndarray) -> tuple[float, list[np.ndarray]]:
    """Value and gradient of scalar ``f`` with respect to every positional argument."""
    leaves = [leaf(a) for a in args]
    out = f(*leaves)
    backprop(out)
    return float(out.data), [lf.grad if lf.grad is not None else np.zeros_like(lf.data) for lf in leaves]


class ComputeGraph:
    """A traced function with named differentiable leaves.

    >>> g = ComputeGraph(lambda x: sum(mul(x, x)), leaves=["x"])
    >>> g.evaluate({"x": np.array([3.0])})
    array(9.)
    >>> g.backward(np.array(1.0))["x"]
    array([6.])
    """

    def __init__(self, fn: Callable[..., Var], leaves: Iterable[str]):
        self.fn = fn
        self.leaf_names = list(leaves)
        self._leaves: dict[str, Var] | None = None
        self._out: Var | None = None

    def evaluate(self, bindings: Mapping[str, np.ndarray]) -> np.ndarray:
        missing = [n for n in self.leaf_names if n not in bindings]
        if missing:
            raise AutodiffError(f"unbound leaves: {missing}")
        self._leaves = {n: leaf(bindings[n], name=n) for n in self.leaf_names}
        self._out = self.fn(**self._leaves)
        return self._out.data

    def backward(self, seed=None) -> dict[str, np.ndarray]:
        if self._out is None or self._leaves is None:
            raise AutodiffError("backward called before evaluate")
        for lf in self._leaves.values():
            lf.grad = None
        backprop(self._out, seed)
        return {n: (lf.grad if lf.grad is not None else np.zeros_like(lf.data))
                for n, lf in self._leaves.items()}


def check_gradients(f: Callable[[Var], Var], x: np.ndarray, h: float = 1e-5) -> float:
    """Max relative error between autodiff and central differences for scalar ``f``.

    Relative error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    x = np.asarray(x, dtype=np.float64)
    _, (analytic,) = grad(f, x)
    numeric = np.empty_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        xp, xm = flat.copy(), flat.copy()
        xp[i] += h
        xm[i] -= h
        fp = float(f(Var(xp.reshape(x.shape))).data)
        fm = float(f(Var(xm.reshape(x.shape))).data)
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFiniteError("check_gradients", i)
        numeric.reshape(-1)[i] = (fp - fm) / (2.0 * h)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0
