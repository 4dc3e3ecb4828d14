"""Dynamic reverse-mode autodiff over a graph recorded during the forward pass.

Every op builds a :class:`Node` that remembers its parents and a local
vector-Jacobian rule. :func:`backward` walks the recorded graph in reverse
topological order. Gradients of heavy layers (convolutions, LayerNorm, the
interaction kernels) are supplied by fused ops elsewhere that plug into the
same ``Node`` machinery via :func:`make_node`.
"""

from __future__ import annotations

import builtins
import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, broadcast_shape

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextlib.contextmanager
def record_kinks():
    """Collect the on/off pattern of every ReLU evaluated inside the block."""
    prev = getattr(_state, "kinks", None)
    _state.kinks = log = []
    try:
        yield log
    finally:
        _state.kinks = prev


class Node:
    """A tensor value plus the provenance needed to differentiate through it."""

    __slots__ = ("value", "grad", "parents", "backward_rule", "requires_grad", "_vjp", "__weakref__")

    def __init__(self, value, requires_grad: bool = False, parents: Sequence["Node"] = (),
                 backward_rule: str = "leaf", vjp: Callable | None = None):
        self.value = value if isinstance(value, Tensor) else Tensor(value)
        self.grad: Tensor | None = None
        self.parents = tuple(parents)
        self.backward_rule = backward_rule
        self.requires_grad = requires_grad
        self._vjp = vjp

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        return self.value.item()

    def __repr__(self):
        return f"Node(rule={self.backward_rule}, shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Node):
    """Trainable leaf. ``decay`` marks tensors that receive decoupled weight decay."""

    __slots__ = ("decay",)

    def __init__(self, value: Tensor, decay: bool = True):
        super().__init__(value, requires_grad=True)
        self.decay = decay


def constant(value, dtype=None) -> Node:
    if isinstance(value, Node):
        return value
    if isinstance(value, Tensor):
        return Node(value)
    return Node(Tensor(value, dtype=dtype))


def make_node(out: np.ndarray, parents: Sequence[Node], rule: str, vjp: Callable) -> Node:
    """Wrap a forward result; ``vjp(g)`` must return one gradient (or None) per parent."""
    track = grad_enabled() and any(p.requires_grad for p in parents)
    value = Tensor._wrap(out)
    if not track:
        return Node(value)
    return Node(value, requires_grad=True, parents=parents, backward_rule=rule, vjp=vjp)


def _topo_order(root: Node) -> list[Node]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def gradients(root: Node) -> dict[int, tuple[Node, np.ndarray]]:
    """Propagate d(root)/d(node) without touching ``.grad``; keyed by ``id(node)``."""
    if root.shape != ():
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {id(root): np.ones((), dtype=root.dtype)}
    nodes: dict[int, Node] = {}
    for node in reversed(_topo_order(root)):
        g = grads.get(id(node))
        nodes[id(node)] = node
        if g is None or not node.parents:
            continue
        if node._vjp is None:
            raise RuntimeError(f"node {node.backward_rule!r} has parents but no backward rule")
        parent_grads = node._vjp(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if pg.shape != p.shape:
                raise RuntimeError(f"rule {node.backward_rule!r} produced grad {pg.shape} for parent {p.shape}")
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg
    return {k: (nodes[k], v) for k, v in grads.items() if k in nodes}


def backward(root: Node):
    """Populate ``.grad`` on every reachable node that requires grad (accumulating)."""
    for node, g in gradients(root).values():
        if not node.requires_grad:
            continue
        g = np.asarray(g, dtype=node.dtype)
        node.grad = Tensor._wrap(g if node.grad is None else node.grad.data + g)


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _lift(x, like: Node) -> Node:
    return x if isinstance(x, Node) else constant(np.asarray(x, dtype=like.dtype))


def add(a, b) -> Node:
    a, b = (_lift(a, b), b) if not isinstance(a, Node) else (a, _lift(b, a))
    broadcast_shape(a.shape, b.shape)
    return make_node(a.data + b.data, (a, b), "add",
                     lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Node:
    a, b = (_lift(a, b), b) if not isinstance(a, Node) else (a, _lift(b, a))
    broadcast_shape(a.shape, b.shape)
    return make_node(a.data - b.data, (a, b), "sub",
                     lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Node:
    a, b = (_lift(a, b), b) if not isinstance(a, Node) else (a, _lift(b, a))
    broadcast_shape(a.shape, b.shape)
    return make_node(a.data * b.data, (a, b), "mul",
                     lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Node:
    a, b = (_lift(a, b), b) if not isinstance(a, Node) else (a, _lift(b, a))
    broadcast_shape(a.shape, b.shape)
    if np.any(b.data == 0):
        raise ZeroDivisionError("division by zero")
    out = a.data / b.data
    return make_node(out, (a, b), "div",
                     lambda g: (unbroadcast(g / b.data, a.shape), unbroadcast(-g * out / b.data, b.shape)))


def neg(a: Node) -> Node:
    return make_node(-a.data, (a,), "neg", lambda g: (-g,))


def exp(a: Node) -> Node:
    out = np.exp(a.data)
    return make_node(out, (a,), "exp", lambda g: (g * out,))


def log(a: Node) -> Node:
    if np.any(a.data <= 0):
        raise ValueError("log of nonpositive value")
    return make_node(np.log(a.data), (a,), "log", lambda g: (g / a.data,))


def square(a: Node) -> Node:
    return make_node(a.data * a.data, (a,), "square", lambda g: (2.0 * g * a.data,))


def sqrt(a: Node) -> Node:
    if np.any(a.data < 0):
        raise ValueError("sqrt of negative value")
    out = np.sqrt(a.data)
    return make_node(out, (a,), "sqrt", lambda g: (0.5 * g / out,))


def power(a: Node, p: float) -> Node:
    return make_node(a.data**p, (a,), "power", lambda g: (g * p * a.data ** (p - 1),))


def relu(a: Node) -> Node:
    # subgradient at 0 is 0
    mask = a.data > 0
    log = getattr(_state, "kinks", None)
    if log is not None:
        log.append(mask)
    return make_node(np.maximum(a.data, 0), (a,), "relu", lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Node) -> Node:
    """tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return make_node(out, (a,), "gelu", vjp)


def matmul(a: Node, b: Node) -> Node:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    return make_node(a.data @ b.data, (a, b), "matmul", lambda g: (g @ b.data.T, a.data.T @ g))


def _axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for rank {ndim}")
    return tuple(ax % ndim for ax in axes)


def sum(a: Node, axis=None) -> Node:  # noqa: A001
    axes = _axes(axis, a.data.ndim)
    out = a.data.sum(axis=axes)
    return make_node(np.asarray(out), (a,), "sum",
                     lambda g: (np.broadcast_to(np.expand_dims(g, axes), a.shape).copy(),))


def mean(a: Node, axis=None) -> Node:
    axes = _axes(axis, a.data.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    out = a.data.mean(axis=axes)
    return make_node(np.asarray(out), (a,), "mean",
                     lambda g: (np.broadcast_to(np.expand_dims(g, axes) / count, a.shape).copy(),))


def max(a: Node, axis=None) -> Node:  # noqa: A001
    axes = _axes(axis, a.data.ndim)
    out = a.data.max(axis=axes, keepdims=True)
    mask = a.data == out
    # ties share the gradient equally
    share = mask / mask.sum(axis=axes, keepdims=True)
    return make_node(np.asarray(out.squeeze(axis=axes)), (a,), "max",
                     lambda g: (np.expand_dims(g, axes) * share,))


def reshape(a: Node, shape) -> Node:
    return make_node(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(a.shape),))


def stack(nodes: Sequence[Node]) -> Node:
    nodes = tuple(nodes)
    shapes = {n.shape for n in nodes}
    if len(shapes) != 1:
        raise ValueError(f"stack needs identical shapes, got {sorted(shapes)}")
    return make_node(np.stack([n.data for n in nodes]), nodes, "stack", lambda g: tuple(g))


def take(a: Node, index: int) -> Node:
    """Slice ``a[index]`` along the leading axis."""

    def vjp(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return make_node(a.data[index], (a,), "take", vjp)


# ---------------------------------------------------------------------------
# finite-difference oracle

@dataclass
class GradReport:
    errors: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-4
    kinks: int = 0  # coordinates replaced because the +-eps probe crossed a ReLU kink

    @property
    def max_error(self) -> float:
        return builtins.max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} max_rel_err={self.max_error:.3e} (tol {self.tol:g})"


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def _scalar(out: Node) -> float:
    if not isinstance(out, Node) or out.shape != ():
        raise ValueError("grad_check function must return a scalar Node")
    val = float(out.data)
    if not math.isfinite(val):
        raise FloatingPointError("grad_check function returned a non-finite value")
    return val


def _coords(size: int, max_coords, rng) -> np.ndarray:
    if max_coords is None or size <= max_coords:
        return np.arange(size)
    return np.sort(rng.choice(size, size=max_coords, replace=False))


def grad_check(f: Callable[[Node], Node], x: Tensor, eps: float = 1e-5, tol: float = 1e-4,
               max_coords: int | None = None, seed: int = 0) -> GradReport:
    """Central-difference check of ``f`` at ``x``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    leaf = Node(x, requires_grad=True)
    out = f(leaf)
    _scalar(out)
    backward(out)
    analytic = np.zeros(x.shape, dtype=x.dtype) if leaf.grad is None else leaf.grad.data
    base = x.data.reshape(-1)
    idx = _coords(base.size, max_coords, np.random.default_rng(seed))
    numeric = np.empty(len(idx))
    for n, i in enumerate(idx):
        plus, minus = base.copy(), base.copy()
        plus[i] += eps
        minus[i] -= eps
        with no_grad():
            fp = _scalar(f(Node(Tensor._wrap(plus.reshape(x.shape)))))
            fm = _scalar(f(Node(Tensor._wrap(minus.reshape(x.shape)))))
        numeric[n] = (fp - fm) / (2 * eps)
    err = relative_error(analytic.reshape(-1)[idx], numeric)
    return GradReport({"x": float(err.max()) if err.size else 0.0}, tol)


def _straddles(masks_plus: list[np.ndarray], masks_minus: list[np.ndarray]) -> bool:
    return len(masks_plus) != len(masks_minus) or any(
        not np.array_equal(a, b) for a, b in zip(masks_plus, masks_minus))


def grad_check_params(f: Callable[[], Node], params: dict[str, Node], eps: float = 1e-5,
                      tol: float = 1e-4, max_coords: int | None = 16, seed: int = 0,
                      skip_kinks: bool = False) -> GradReport:
    """Check ``f()`` against every named parameter by perturbing values in place.

    With ``skip_kinks`` a coordinate whose two probes see different ReLU
    patterns is not a valid difference quotient; it is replaced by the next
    coordinate of the same random permutation and counted in ``kinks``.
    """
    for p in params.values():
        p.zero_grad()
    out = f()
    _scalar(out)
    backward(out)
    rng = np.random.default_rng(seed)
    report = GradReport(tol=tol)
    for name, p in params.items():
        original = p.value
        analytic = np.zeros(p.shape, dtype=p.dtype) if p.grad is None else p.grad.data
        base = original.data.reshape(-1)
        want = base.size if max_coords is None else builtins.min(max_coords, base.size)
        order = rng.permutation(base.size) if skip_kinks else _coords(base.size, max_coords, rng)
        checked, numeric = [], []
        try:
            for i in order:
                if len(checked) == want:
                    break
                vals, masks = [], []
                for step in (eps, -eps):
                    pert = base.copy()
                    pert[i] += step
                    p.value = Tensor._wrap(pert.reshape(p.shape))
                    with no_grad(), record_kinks() as log:
                        vals.append(_scalar(f()))
                    masks.append(log)
                if skip_kinks and _straddles(*masks):
                    report.kinks += 1
                    continue
                checked.append(i)
                numeric.append((vals[0] - vals[1]) / (2 * eps))
        finally:
            p.value = original
        err = relative_error(analytic.reshape(-1)[np.asarray(checked, dtype=int)], np.asarray(numeric))
        report.errors[name] = float(err.max()) if err.size else 0.0
    for p in params.values():
        p.zero_grad()
    return report
