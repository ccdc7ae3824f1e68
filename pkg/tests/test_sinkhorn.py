import math

import numpy as np
import pytest

from permlearn.errors import DomainError, ShapeError
from permlearn.gradcheck import numeric_gradient, relative_error
from permlearn.permcore import Permutation, normalization_error
from permlearn.sinkhorn import (
    SinkhornConfig,
    col_normalize,
    row_normalize,
    row_normalize_backward,
    sinkhorn_backward,
    sinkhorn_converge,
    sinkhorn_forward,
    to_positive,
    to_positive_backward,
)


def test_to_positive_examples():
    cfg = SinkhornConfig(epsilon=1e-3)
    np.testing.assert_allclose(to_positive(np.zeros((3, 3)), cfg), 1.001, rtol=0, atol=1e-15)
    tiny = SinkhornConfig(epsilon=1e-300)
    out = to_positive([[math.log(2), 0.0], [0.0, math.log(2)]], tiny)
    np.testing.assert_allclose(out, [[2, 1], [1, 2]], rtol=1e-15)
    big = to_positive([[1e6, 0.0], [0.0, 0.0]], SinkhornConfig(clamp=50.0))
    assert np.all(np.isfinite(big))
    assert big[0, 0] == math.exp(50.0) + 1e-3


def test_to_positive_rejects_non_square():
    with pytest.raises(ShapeError):
        to_positive(np.zeros((2, 3)), SinkhornConfig())


def test_config_validation():
    with pytest.raises(ValueError):
        SinkhornConfig(epsilon=0.0)
    with pytest.raises(ValueError):
        SinkhornConfig(clamp=-1.0)


def test_row_normalize_examples():
    np.testing.assert_allclose(row_normalize([[2, 1], [1, 2]]), [[2 / 3, 1 / 3], [1 / 3, 2 / 3]], rtol=1e-15)
    p = Permutation([2, 0, 1]).matrix()
    np.testing.assert_allclose(row_normalize(p + 1e-12), p, atol=1e-11)
    np.testing.assert_allclose(row_normalize(np.ones((3, 3))), 1 / 3, rtol=1e-15)
    with pytest.raises(DomainError):
        row_normalize([[0.0, 0.0], [1.0, 1.0]])


def test_col_normalize_examples():
    np.testing.assert_allclose(col_normalize([[2, 1], [1, 2]]), [[2 / 3, 1 / 3], [1 / 3, 2 / 3]], rtol=1e-15)
    np.testing.assert_array_equal(col_normalize(np.eye(4)), np.eye(4))
    np.testing.assert_allclose(col_normalize(np.ones((3, 3))), 1 / 3, rtol=1e-15)
    with pytest.raises(DomainError):
        col_normalize([[0.0, 1.0], [0.0, 1.0]])


def test_sinkhorn_forward_examples():
    q0 = np.array([[2.0, 1.0], [1.0, 2.0]])
    out, tape = sinkhorn_forward(q0, SinkhornConfig(iterations=0))
    np.testing.assert_array_equal(out, q0)
    assert len(tape) == 0
    out, _ = sinkhorn_forward(np.ones((2, 2)), SinkhornConfig(iterations=1))
    np.testing.assert_array_equal(out, 0.5)
    out, tape = sinkhorn_forward(q0, SinkhornConfig(iterations=1))
    np.testing.assert_allclose(out, [[2 / 3, 1 / 3], [1 / 3, 2 / 3]], rtol=1e-15)
    assert len(tape) == 1


def test_sinkhorn_forward_rejects_non_positive():
    with pytest.raises(DomainError):
        sinkhorn_forward([[1.0, 0.0], [1.0, 1.0]], SinkhornConfig())


def test_tape_holds_every_iteration():
    rng = np.random.default_rng(0)
    _, tape = sinkhorn_forward(rng.uniform(0.1, 1, (4, 4)), SinkhornConfig(iterations=7))
    assert len(tape) == 7
    for pre, post_row, post_col in tape.steps:
        assert np.all(pre > 0) and np.all(post_row > 0) and np.all(post_col > 0)
        np.testing.assert_allclose(post_row.sum(axis=1), 1, rtol=1e-14)
        np.testing.assert_allclose(post_col.sum(axis=0), 1, rtol=1e-14)


def test_convergence_and_monotone_error():
    rng = np.random.default_rng(1)
    for _ in range(20):
        q = rng.uniform(0.01, 1.0, (8, 8))
        errors = []
        for _ in range(20):
            q, _ = sinkhorn_forward(q, SinkhornConfig(iterations=1))
            errors.append(normalization_error(q))
        assert errors[-1] <= 1e-4
        assert all(b <= a + 1e-12 for a, b in zip(errors, errors[1:]))


def test_permutation_is_near_fixed_point():
    eps = 1e-3
    for pi in ([0, 1, 2], [2, 0, 1], [3, 1, 0, 2, 4]):
        p = Permutation(pi).matrix()
        q, _ = sinkhorn_converge(p + eps)
        assert np.abs(q - p).max() <= 5 * eps


def test_exact_dsm_is_fixed_point():
    rng = np.random.default_rng(2)
    q, _ = sinkhorn_converge(rng.uniform(0.1, 1, (6, 6)), tol=1e-15, max_iterations=1000)
    again, _ = sinkhorn_forward(q, SinkhornConfig(iterations=1))
    np.testing.assert_allclose(again, q, atol=1e-12, rtol=0)


def test_scale_invariance():
    rng = np.random.default_rng(3)
    q = rng.uniform(0.1, 1, (5, 5))
    base, _ = sinkhorn_forward(q, SinkhornConfig(iterations=1))
    for alpha in (1e-3, 0.5, 7.0, 1e4):
        scaled, _ = sinkhorn_forward(alpha * q, SinkhornConfig(iterations=1))
        np.testing.assert_allclose(scaled, base, atol=1e-12, rtol=0)


def test_determinism():
    rng = np.random.default_rng(4)
    q = rng.uniform(0.1, 1, (6, 6))
    a, _ = sinkhorn_forward(q, SinkhornConfig(iterations=5))
    b, _ = sinkhorn_forward(q.copy(), SinkhornConfig(iterations=5))
    assert a.tobytes() == b.tobytes()


def test_converge_stops_at_tolerance():
    rng = np.random.default_rng(5)
    q, n = sinkhorn_converge(rng.uniform(0.1, 1, (8, 8)))
    assert normalization_error(q) <= 1e-6
    assert 1 <= n < 100
    _, n = sinkhorn_converge(np.array([[1.0, 1.0], [1e-9, 1.0]]), tol=0.0, max_iterations=100)
    assert n == 100


def test_batched_matches_single():
    rng = np.random.default_rng(6)
    stack = rng.uniform(0.1, 1, (3, 5, 5))
    cfg = SinkhornConfig(iterations=4)
    out, tape = sinkhorn_forward(stack, cfg)
    g = rng.standard_normal((3, 5, 5))
    back = sinkhorn_backward(g, tape)
    for k in range(3):
        o, t = sinkhorn_forward(stack[k], cfg)
        np.testing.assert_allclose(out[k], o, rtol=1e-15)
        np.testing.assert_allclose(back[k], sinkhorn_backward(g[k], t), rtol=1e-13)


# --- backward passes against central finite differences -------------------


def fd_check(forward, x, g, h=1e-5):
    """Numeric gradient of sum(g * forward(x)) w.r.t. x."""
    x = x.copy()
    return numeric_gradient(lambda: float(np.sum(g * forward(x))), x, h)


def test_row_normalize_backward_zero_grad():
    q = np.random.default_rng(7).uniform(0.1, 1, (4, 4))
    np.testing.assert_array_equal(row_normalize_backward(np.zeros((4, 4)), q), 0.0)


def test_row_normalize_backward_one_by_one():
    for g in (-3.0, 0.5, 10.0):
        assert row_normalize_backward([[g]], [[2.5]])[0, 0] == pytest.approx(0.0, abs=1e-15)


def test_row_normalize_backward_shape_mismatch():
    with pytest.raises(ShapeError):
        row_normalize_backward(np.zeros((3, 3)), np.ones((2, 2)))


def test_row_normalize_backward_finite_differences():
    rng = np.random.default_rng(8)
    q = rng.uniform(0.1, 1.0, (5, 5))
    g = rng.standard_normal((5, 5))
    num = fd_check(row_normalize, q, g)
    assert relative_error(row_normalize_backward(g, q), num).max() < 1e-4


def test_row_normalize_backward_is_the_explicit_sum():
    rng = np.random.default_rng(9)
    q = rng.uniform(0.1, 1.0, (3, 3))
    g = rng.standard_normal((3, 3))
    expected = np.zeros((3, 3))
    for p in range(3):
        s = q[p].sum()
        for qq in range(3):
            expected[p, qq] = sum(g[p, j] * ((j == qq) / s - q[p, j] / s**2) for j in range(3))
    np.testing.assert_allclose(row_normalize_backward(g, q), expected, rtol=1e-12, atol=1e-15)


def test_sinkhorn_backward_zero_iterations_is_identity():
    g = np.random.default_rng(10).standard_normal((3, 3))
    _, tape = sinkhorn_forward(np.ones((3, 3)), SinkhornConfig(iterations=0))
    np.testing.assert_array_equal(sinkhorn_backward(g, tape), g)


@pytest.mark.parametrize("l,n", [(2, 1), (6, 5), (4, 3)])
def test_sinkhorn_backward_finite_differences(l, n):
    rng = np.random.default_rng(l * 10 + n)
    q0 = rng.uniform(0.1, 1.0, (l, l))
    g = rng.standard_normal((l, l))
    cfg = SinkhornConfig(iterations=n)
    _, tape = sinkhorn_forward(q0, cfg)
    num = fd_check(lambda q: sinkhorn_forward(q, cfg)[0], q0, g)
    assert relative_error(sinkhorn_backward(g, tape), num).max() < 1e-4


def test_sinkhorn_backward_shape_mismatch():
    _, tape = sinkhorn_forward(np.ones((3, 3)), SinkhornConfig())
    with pytest.raises(ShapeError):
        sinkhorn_backward(np.zeros((2, 2)), tape)


def test_composed_chain_finite_differences():
    rng = np.random.default_rng(11)
    for trial in range(20):
        l = int(rng.integers(2, 9))
        n = int(rng.choice([1, 3, 5]))
        cfg = SinkhornConfig(iterations=n)
        scores = rng.standard_normal((l, l))
        g = rng.standard_normal((l, l))
        _, tape = sinkhorn_forward(to_positive(scores, cfg), cfg)
        analytic = to_positive_backward(sinkhorn_backward(g, tape), scores, cfg)
        num = fd_check(lambda s: sinkhorn_forward(to_positive(s, cfg), cfg)[0], scores, g)
        assert relative_error(analytic, num).max() < 1e-4, (trial, l, n)


def test_to_positive_backward_zero_outside_clamp():
    cfg = SinkhornConfig(clamp=2.0)
    s = np.array([[3.0, -3.0], [0.0, 1.0]])
    g = to_positive_backward(np.ones((2, 2)), s, cfg)
    assert g[0, 0] == 0.0 and g[0, 1] == 0.0
    assert g[1, 0] == 1.0 and g[1, 1] == pytest.approx(math.e)
