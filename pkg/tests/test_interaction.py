import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from infinet import autograd as ag
from infinet.autograd import Node, grad_check
from infinet.interaction import (ABLATION_KINDS, Add, BranchStack, Hadamard, Polynomial, Rbf,
                                 count_monomials_brute, enumerate_monomials, gram_matrix, interact,
                                 interaction_dim, is_psd, jacobi_eigenvalues, kind_from_params,
                                 kind_label, kind_params, parse_kind, poly_kernel, quadratic_expand,
                                 rbf_kernel, rbf_series_tail_bound, rbf_series_truncated)
from infinet.tensor import Tensor


# --- combinatorics ---------------------------------------------------------

def test_dimension_examples():
    for n in range(1, 8):
        assert interaction_dim(n, 1) == n
        assert interaction_dim(n, 2) == n * (n + 1) // 2
        assert interaction_dim(n, 3) == (n + 2) * (n + 1) * n // 6
    assert interaction_dim(4, 2) == 10
    assert interaction_dim(3, 3) == 10
    assert interaction_dim(5, 4) == 70
    assert interaction_dim(1, 9) == 1


@given(st.integers(1, 40), st.integers(1, 40))
def test_dimension_matches_math_comb(n, k):
    expect = math.comb(n + k - 1, k)
    if expect >= 2**63:
        with pytest.raises(OverflowError):
            interaction_dim(n, k)
    else:
        assert interaction_dim(n, k) == expect


def test_dimension_overflow_and_domain():
    assert interaction_dim(2, 2**62) == 2**62 + 1
    with pytest.raises(OverflowError):
        interaction_dim(1000, 1000)
    with pytest.raises(ValueError):
        interaction_dim(0, 2)


def test_enumeration_order_and_brute_force():
    assert enumerate_monomials(2, 2) == [(2, 0), (1, 1), (0, 2)]
    assert enumerate_monomials(1, 5) == [(5,)]
    for n in range(1, 7):
        for k in range(1, 6):
            mons = enumerate_monomials(n, k)
            assert len(mons) == len(set(mons)) == count_monomials_brute(n, k) == interaction_dim(n, k)
            assert all(sum(m) == k and len(m) == n for m in mons)
            assert mons == sorted(mons, reverse=True)
    with pytest.raises(ValueError):
        enumerate_monomials(50, 10)


# --- quadratic expansion ---------------------------------------------------

def test_quadratic_expand_hand_example():
    q = quadratic_expand([1.0, 2.0], [3.0, 4.0])
    assert q.alpha == {(0, 0): 3.0, (0, 1): 10.0, (1, 1): 8.0}
    e1 = quadratic_expand([1.0, 0.0, 0.0], [1.0, 0.0, 0.0])
    assert {k: v for k, v in e1.alpha.items() if v} == {(0, 0): 1.0}
    with pytest.raises(ValueError):
        quadratic_expand([1.0], [1.0, 2.0])


def test_quadratic_expand_identity_random():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 9))
        wa, wb, x = rng.standard_normal((3, n))
        worst = max(worst, abs(quadratic_expand(wa, wb).evaluate(x) - (wa @ x) * (wb @ x)))
    assert worst < 1e-10


# --- kernels ---------------------------------------------------------------

def test_kernel_examples():
    assert poly_kernel([1, 2], [3, 4], c=1, d=2) == 144.0
    assert poly_kernel([1, 2], [3, 4], c=0, d=1) == 11.0
    assert poly_kernel([0, 0], [0, 0], c=0, d=3) == 0.0
    assert rbf_kernel([0.3, 0.1], [0.3, 0.1]) == 1.0
    assert rbf_kernel([1, 0], [0, 1]) == pytest.approx(math.exp(-1), abs=1e-15)
    assert rbf_kernel([1, 0], [0, 1], sigma=2.0) == pytest.approx(math.exp(-0.25), abs=1e-15)
    with pytest.raises(ValueError):
        rbf_kernel([1, 0], [1])
    with pytest.raises(ValueError):
        rbf_kernel([1], [1], sigma=0)


@given(st.lists(st.floats(-3, 3), min_size=1, max_size=6), st.lists(st.floats(-3, 3), min_size=1, max_size=6))
@settings(max_examples=100)
def test_rbf_symmetric_and_bounded(s, t):
    n = min(len(s), len(t))
    s, t = s[:n], t[:n]
    k = rbf_kernel(s, t)
    assert k == rbf_kernel(t, s)
    assert 0.0 < k <= 1.0
    assert (k == 1.0) == (s == t) or np.allclose(s, t, atol=1e-7)


def test_series_examples():
    s, t = np.array([0.5, -0.2]), np.array([0.1, 0.4])
    assert rbf_series_truncated(s, t, 0) == pytest.approx(math.exp(-(s @ s + t @ t) / 2), abs=1e-16)
    assert rbf_series_truncated([1.0], [1.0], 20) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        rbf_series_truncated(s, t, -1)


def test_series_error_within_tail_bound():
    rng = np.random.default_rng(3)
    for _ in range(50):
        s, t = rng.uniform(-1, 1, (2, 4))
        for J in (0, 3, 8):
            err = abs(rbf_series_truncated(s, t, J) - rbf_kernel(s, t))
            assert err <= rbf_series_tail_bound(s, t, J) * (1 + 1e-9) + 1e-15


def test_series_worst_case_aligned_radius_two():
    # aligned s = t with norm 2 is the extreme of the |s|,|t| <= 2 ball; J = 20 leaves ~2e-9
    s = np.array([2.0, 0.0])
    err = abs(rbf_series_truncated(s, s, 20) - 1.0)
    assert 1e-9 < err < 3e-9
    assert abs(rbf_series_truncated(s, s, 25) - 1.0) < 1e-12


def test_gram_and_jacobi():
    assert gram_matrix([[0.3, 0.4]], Rbf()).tolist() == [[1.0]]
    p = np.random.default_rng(0).standard_normal((4, 3))
    dup = np.vstack([p, p[:1]])
    for kind in (Rbf(), Polynomial(1.0, 2)):
        ok, lo, hi = is_psd(gram_matrix(dup, kind))
        assert ok and abs(lo) < 1e-10 * hi
    ok, lo, _ = is_psd(gram_matrix(np.random.default_rng(1).standard_normal((5, 3)), Rbf()))
    assert ok and lo >= -1e-8
    A = np.random.default_rng(2).standard_normal((6, 6))
    A = A + A.T
    assert np.allclose(jacobi_eigenvalues(A), np.linalg.eigvalsh(A), atol=1e-10)
    assert not is_psd(np.diag([1.0, -1.0]))[0]
    with pytest.raises(TypeError):
        gram_matrix(p, Hadamard())
    with pytest.raises(ValueError):
        jacobi_eigenvalues(np.array([[1.0, 2.0], [0.0, 1.0]]))


# --- kinds -----------------------------------------------------------------

def test_kind_validation_and_parsing():
    with pytest.raises(ValueError):
        Polynomial(c=-1)
    with pytest.raises(ValueError):
        Polynomial(d=0)
    with pytest.raises(ValueError):
        Rbf(sigma=0)
    assert parse_kind("poly3") == Polynomial(1.0, 3)
    assert parse_kind("poly:c=0.5,d=4") == Polynomial(0.5, 4)
    assert parse_kind("rbf:sigma=2") == Rbf(2.0)
    assert parse_kind("ADD") == Add()
    with pytest.raises(ValueError):
        parse_kind("cosine")
    for label, kind in ABLATION_KINDS.items():
        assert kind_label(kind) == label
        assert kind_from_params(kind.name, kind_params(kind)) == kind


# --- interact --------------------------------------------------------------

def stack(arr):
    return BranchStack(Node(Tensor(arr)))


def test_interact_formulas():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((2, 3, 2, 4, 4, 5))
    dot = (a * b).sum(0)
    cases = {
        Add(): (a + b).sum(0),
        Hadamard(): dot,
        Polynomial(1.0, 2): (dot + 1) ** 2,
        Polynomial(0.5, 3): (dot + 0.5) ** 3,
        Rbf(1.0): np.exp(-((a - b) ** 2).sum(0) / 2),
        Rbf(0.7): np.exp(-((a - b) ** 2).sum(0) / (2 * 0.49)),
    }
    for kind, expect in cases.items():
        assert np.allclose(interact(stack(a), stack(b), kind).data, expect, rtol=1e-13, atol=1e-13)


def test_interact_degenerate_cases():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((2, 1, 1, 3, 3, 2))
    assert np.array_equal(interact(stack(a), stack(b), Hadamard()).data, (a * b)[0])
    a7, b7 = rng.standard_normal((2, 7, 1, 2, 2, 3))
    assert np.array_equal(interact(stack(a7), stack(b7), Polynomial(0.0, 1)).data,
                          interact(stack(a7), stack(b7), Hadamard()).data)
    u = np.array([1.0, 0.0]).reshape(2, 1, 1, 1, 1)
    v = np.array([0.0, 1.0]).reshape(2, 1, 1, 1, 1)
    assert interact(stack(u), stack(v), Rbf()).data.item() == pytest.approx(math.exp(-1))


def test_interact_branch_permutation_invariant():
    rng = np.random.default_rng(2)
    a, b = rng.standard_normal((2, 4, 1, 2, 2, 3))
    perm = [2, 0, 3, 1]
    for kind in ABLATION_KINDS.values():
        base = interact(stack(a), stack(b), kind).data
        shuffled = interact(stack(a).permuted(perm), stack(b).permuted(perm), kind).data
        assert np.allclose(base, shuffled, rtol=1e-12, atol=1e-12)


def test_interact_shape_errors():
    a = stack(np.zeros((2, 1, 2, 2, 3)))
    with pytest.raises(ValueError):
        interact(a, stack(np.zeros((3, 1, 2, 2, 3))), Hadamard())
    with pytest.raises(ValueError):
        interact(a, stack(np.zeros((2, 1, 2, 2, 4))), Hadamard())


def test_rbf_gradient_closed_form():
    rng = np.random.default_rng(4)
    a, b = rng.standard_normal((2, 3, 1, 1, 1, 1))
    sigma = 0.8
    ua = Node(Tensor(a), requires_grad=True)
    ag.backward(ag.sum(interact(BranchStack(ua), stack(b), Rbf(sigma))))
    K = np.exp(-((a - b) ** 2).sum() / (2 * sigma ** 2))
    assert np.allclose(ua.grad.data, K * (b - a) / sigma ** 2, rtol=1e-13)


@pytest.mark.parametrize("label", list(ABLATION_KINDS) + ["poly:c=0.3,d=4", "rbf:sigma=1.5"])
def test_interact_sum_grad_check(label):
    kind = parse_kind(label)
    rng = np.random.default_rng(5)
    a0, b0 = np.abs(rng.normal(0, 0.6, (2, 3, 2, 2, 2, 2)))
    assert grad_check(lambda x: ag.sum(interact(BranchStack(x), stack(b0), kind)), Tensor(a0)).passed
    assert grad_check(lambda x: ag.sum(interact(stack(a0), BranchStack(x), kind)), Tensor(b0)).passed
