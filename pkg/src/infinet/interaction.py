"""Interaction operators over branch stacks and the kernel math behind them.

Four interaction kinds combine two stacks of ``r`` feature maps position by
position: additive superposition, a Hadamard inner product, a polynomial
kernel and an RBF kernel. The module also carries the combinatorics of
monomial interaction spaces and a few independent oracles (monomial
enumeration, explicit quadratic expansion, the truncated RBF power series,
a Jacobi eigen-solver for Gram matrices).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterator, Sequence, Union

import numpy as np

from .autograd import Node, make_node, stack, take
from .tensor import Tensor

INT64_MAX = 2**63 - 1
MONOMIAL_CAP = 10**6


# ---------------------------------------------------------------------------
# interaction kinds

@dataclass(frozen=True)
class Add:
    name = "add"


@dataclass(frozen=True)
class Hadamard:
    name = "hadamard"


@dataclass(frozen=True)
class Polynomial:
    c: float = 1.0
    d: int = 2
    name = "polynomial"

    def __post_init__(self):
        if self.c < 0:
            raise ValueError(f"polynomial offset c must be >= 0, got {self.c}")
        if int(self.d) != self.d or self.d < 1:
            raise ValueError(f"polynomial degree d must be an integer >= 1, got {self.d}")


@dataclass(frozen=True)
class Rbf:
    sigma: float = 1.0
    name = "rbf"

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"rbf sigma must be > 0, got {self.sigma}")


InteractionKind = Union[Add, Hadamard, Polynomial, Rbf]

# the five ablation variants, weakest to strongest interaction space
ABLATION_KINDS: dict[str, InteractionKind] = {
    "add": Add(),
    "hadamard": Hadamard(),
    "poly2": Polynomial(c=1.0, d=2),
    "poly3": Polynomial(c=1.0, d=3),
    "rbf": Rbf(sigma=1.0),
}


def parse_kind(text: str) -> InteractionKind:
    """Parse ``add``, ``hadamard``, ``poly2``, ``poly:c=0.5,d=3``, ``rbf`` or ``rbf:sigma=2``."""
    text = text.strip().lower()
    if text in ABLATION_KINDS:
        return ABLATION_KINDS[text]
    head, _, args = text.partition(":")
    kwargs = {}
    for part in filter(None, args.split(",")):
        key, _, val = part.partition("=")
        kwargs[key.strip()] = float(val)
    if head in ("poly", "polynomial"):
        return Polynomial(c=kwargs.get("c", 1.0), d=int(kwargs.get("d", 2)))
    if head == "rbf":
        return Rbf(sigma=kwargs.get("sigma", 1.0))
    if head in ("add", "hadamard") and not kwargs:
        return ABLATION_KINDS[head]
    raise ValueError(f"unknown interaction kind {text!r}")


def kind_label(kind: InteractionKind) -> str:
    for label, k in ABLATION_KINDS.items():
        if k == kind:
            return label
    if isinstance(kind, Polynomial):
        return f"poly:c={kind.c:g},d={kind.d}"
    return f"rbf:sigma={kind.sigma:g}"


def kind_params(kind: InteractionKind) -> dict:
    if isinstance(kind, Polynomial):
        return {"c": kind.c, "d": kind.d}
    if isinstance(kind, Rbf):
        return {"sigma": kind.sigma}
    return {}


def kind_from_params(name: str, params: dict) -> InteractionKind:
    if name == "add":
        return Add()
    if name == "hadamard":
        return Hadamard()
    if name == "polynomial":
        return Polynomial(c=float(params["c"]), d=int(params["d"]))
    if name == "rbf":
        return Rbf(sigma=float(params["sigma"]))
    raise ValueError(f"unknown interaction kind {name!r}")


# ---------------------------------------------------------------------------
# interaction-space combinatorics

def interaction_dim(n: int, k: int) -> int:
    """Number of degree-``k`` monomials in ``n`` variables, C(n+k-1, k).

    Evaluated as a running binomial product that stays integral at every
    step; raises ``OverflowError`` once the value leaves int64 range.
    """
    if n < 1 or k < 1:
        raise ValueError(f"n and k must be >= 1, got n={n}, k={k}")
    top = n + k - 1
    m = min(k, n - 1)
    result = 1
    for i in range(1, m + 1):
        result = result * (top - m + i) // i
        if result > INT64_MAX:
            raise OverflowError(f"interaction_dim({n}, {k}) exceeds 64-bit range")
    return result


def enumerate_monomials(n: int, k: int) -> list[tuple[int, ...]]:
    """Exponent vectors ``(d1..dn)`` with ``sum(d) == k`` in descending-lex order.

    Built by stars-and-bars, independent of :func:`interaction_dim`.
    """
    if n < 1 or k < 1:
        raise ValueError(f"n and k must be >= 1, got n={n}, k={k}")
    count = math.comb(n + k - 1, k)
    if count > MONOMIAL_CAP:
        raise ValueError(f"{count} monomials exceeds the enumeration cap of {MONOMIAL_CAP}")
    out = []
    # bar positions among n+k-1 slots
    for bars in itertools.combinations(range(n + k - 1), n - 1):
        edges = (-1,) + bars + (n + k - 1,)
        out.append(tuple(edges[i + 1] - edges[i] - 1 for i in range(n)))
    out.sort(reverse=True)
    return out


def count_monomials_brute(n: int, k: int) -> int:
    """Count exponent vectors by scanning the full grid ``{0..k}^n``."""
    return sum(1 for d in itertools.product(range(k + 1), repeat=n) if sum(d) == k)


@dataclass
class QuadraticExpansion:
    """Coefficients ``alpha[(i, j)]`` (i <= j) of a quadratic form in ``n`` variables."""

    alpha: dict[tuple[int, int], float]
    n: int

    def vector(self) -> np.ndarray:
        """Flattened coefficients in (1,1), (1,2), (2,2), ... order."""
        return np.array([self.alpha[(i, j)] for j in range(self.n) for i in range(j + 1)])

    def basis(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return np.array([x[i] * x[j] for j in range(self.n) for i in range(j + 1)])

    def evaluate(self, x) -> float:
        return float(self.vector() @ self.basis(x))


def quadratic_expand(w_a, w_b) -> QuadraticExpansion:
    w_a = np.asarray(getattr(w_a, "data", w_a), dtype=np.float64).reshape(-1)
    w_b = np.asarray(getattr(w_b, "data", w_b), dtype=np.float64).reshape(-1)
    if w_a.shape != w_b.shape:
        raise ValueError(f"length mismatch: {w_a.size} vs {w_b.size}")
    n = w_a.size
    alpha = {}
    for i in range(n):
        for j in range(i, n):
            if i == j:
                alpha[(i, j)] = w_a[i] * w_b[i]
            else:
                alpha[(i, j)] = w_a[i] * w_b[j] + w_a[j] * w_b[i]
    return QuadraticExpansion(alpha, n)


# ---------------------------------------------------------------------------
# scalar kernels

def _pair(s, t) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(getattr(s, "data", s), dtype=np.float64).reshape(-1)
    t = np.asarray(getattr(t, "data", t), dtype=np.float64).reshape(-1)
    if s.shape != t.shape:
        raise ValueError(f"dimension mismatch: {s.size} vs {t.size}")
    return s, t


def poly_kernel(s, t, c: float = 1.0, d: int = 2) -> float:
    Polynomial(c, d)
    s, t = _pair(s, t)
    return float((s @ t + c) ** d)


def rbf_kernel(s, t, sigma: float = 1.0) -> float:
    Rbf(sigma)
    s, t = _pair(s, t)
    diff = s - t
    return float(math.exp(-(diff @ diff) / (2.0 * sigma * sigma)))


def rbf_series_truncated(s, t, terms: int) -> float:
    """``sum_{j<=terms} (s.t)^j / j! * exp(-(|s|^2+|t|^2)/2)`` (unit bandwidth)."""
    if terms < 0:
        raise ValueError("terms must be >= 0")
    s, t = _pair(s, t)
    x = float(s @ t)
    total, term = 0.0, 1.0
    for j in range(terms + 1):
        if j:
            term *= x / j
        total += term
    return total * math.exp(-0.5 * (s @ s + t @ t))


def rbf_series_tail_bound(s, t, terms: int) -> float:
    """Lagrange bound on the truncation error of :func:`rbf_series_truncated`."""
    s, t = _pair(s, t)
    x = abs(float(s @ t))
    return x ** (terms + 1) / math.factorial(terms + 1) * math.exp(x - 0.5 * (s @ s + t @ t))


def kernel_value(kind: InteractionKind, s, t) -> float:
    if isinstance(kind, Polynomial):
        return poly_kernel(s, t, kind.c, kind.d)
    if isinstance(kind, Rbf):
        return rbf_kernel(s, t, kind.sigma)
    raise TypeError(f"{type(kind).__name__} is not a kernel")


def gram_matrix(points: Sequence, kind: InteractionKind) -> Tensor:
    if not isinstance(kind, (Polynomial, Rbf)):
        raise TypeError(f"gram_matrix needs a Polynomial or Rbf kernel, got {type(kind).__name__}")
    m = len(points)
    if not 1 <= m <= 64:
        raise ValueError(f"gram_matrix supports 1..64 points, got {m}")
    G = np.empty((m, m))
    for i in range(m):
        for j in range(i, m):
            G[i, j] = G[j, i] = kernel_value(kind, points[i], points[j])
    return Tensor(G)


def jacobi_eigenvalues(A, tol: float = 1e-14, max_sweeps: int = 100) -> np.ndarray:
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending."""
    A = np.array(getattr(A, "data", A), dtype=np.float64)
    n = A.shape[0]
    if A.shape != (n, n) or not np.allclose(A, A.T, rtol=0, atol=1e-12 * max(1.0, np.abs(A).max())):
        raise ValueError("jacobi_eigenvalues needs a square symmetric matrix")
    scale = max(np.abs(A).max(), 1e-300)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(A, -1) ** 2))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                rp, rq = A[p, :].copy(), A[q, :].copy()
                A[p, :] = c * rp - s * rq
                A[q, :] = s * rp + c * rq
                cp, cq = A[:, p].copy(), A[:, q].copy()
                A[:, p] = c * cp - s * cq
                A[:, q] = s * cp + c * cq
    else:
        raise RuntimeError("Jacobi iteration did not converge")
    return np.sort(np.diag(A))


def is_psd(G, rel_tol: float = 1e-8) -> tuple[bool, float, float]:
    """Return ``(ok, min_eig, max_eig)`` with ``ok = min_eig >= -rel_tol * max_eig``."""
    eig = jacobi_eigenvalues(G)
    lo, hi = float(eig[0]), float(eig[-1])
    return lo >= -rel_tol * max(hi, 0.0), lo, hi


# ---------------------------------------------------------------------------
# branch stacks and the differentiable interaction

@dataclass
class BranchStack:
    """``r`` same-shaped feature maps held as one ``(r, N, H, W, C)`` node."""

    data: Node

    def __post_init__(self):
        if not isinstance(self.data, Node):
            self.data = Node(self.data if isinstance(self.data, Tensor) else Tensor(self.data))
        if len(self.data.shape) < 2:
            raise ValueError("branch stack needs a leading branch axis")

    @classmethod
    def from_branches(cls, branches: Sequence) -> "BranchStack":
        if len(branches) < 1:
            raise ValueError("a branch stack needs r >= 1 branches")
        nodes = [b if isinstance(b, Node) else Node(b if isinstance(b, Tensor) else Tensor(b)) for b in branches]
        return cls(stack(nodes))

    @property
    def r(self) -> int:
        return self.data.shape[0]

    @property
    def map_shape(self) -> tuple[int, ...]:
        return self.data.shape[1:]

    @property
    def branches(self) -> list[Node]:
        return [take(self.data, i) for i in range(self.r)]

    def __iter__(self) -> Iterator[Node]:
        return iter(self.branches)

    def permuted(self, order: Sequence[int]) -> "BranchStack":
        return BranchStack.from_branches([self.branches[i] for i in order])


def interact(a: BranchStack, b: BranchStack, kind: InteractionKind) -> Node:
    """Reduce two branch stacks over the branch axis with the chosen kind.

    With ``u``, ``v`` the r-vectors at one position:
    add -> sum(u + v); hadamard -> <u, v>; polynomial -> (<u, v> + c)^d;
    rbf -> exp(-|u - v|^2 / (2 sigma^2)).
    """
    if not isinstance(a, BranchStack):
        a = BranchStack(a)
    if not isinstance(b, BranchStack):
        b = BranchStack(b)
    if a.data.shape != b.data.shape:
        raise ValueError(f"branch stacks differ: {a.data.shape} vs {b.data.shape}")
    u, v = a.data.data, b.data.data
    pa, pb = a.data, b.data

    if isinstance(kind, Add):
        out = u.sum(axis=0) + v.sum(axis=0)

        def vjp(g):
            full = np.broadcast_to(g, u.shape).copy()
            return full, full.copy()

    elif isinstance(kind, Hadamard):
        out = np.einsum("r...,r...->...", u, v)

        def vjp(g):
            return g * v, g * u

    elif isinstance(kind, Polynomial):
        c, d = kind.c, kind.d
        base = np.einsum("r...,r...->...", u, v) + c
        out = base**d

        def vjp(g):
            coef = g * d * base ** (d - 1)
            return coef * v, coef * u

    elif isinstance(kind, Rbf):
        inv = 1.0 / (kind.sigma * kind.sigma)
        diff = u - v
        out = np.exp(-0.5 * inv * np.einsum("r...,r...->...", diff, diff))

        def vjp(g):
            gu = -(g * out * inv) * diff
            return gu, -gu

    else:
        raise TypeError(f"unknown interaction kind {kind!r}")

    return make_node(np.asarray(out, dtype=u.dtype), (pa, pb), f"interact_{kind.name}", vjp)
