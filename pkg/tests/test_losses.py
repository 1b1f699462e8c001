import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from descdistill import losses as L
from gradcheck import numeric_grad, rel_err


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


# ------------------------------------------------------------ oracles


def loop_distances(a, b):
    n = len(a)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            out[i, j] = math.sqrt(sum((float(a[i, k]) - float(b[j, k])) ** 2 for k in range(a.shape[1])))
    return out


def exhaustive_triplet(dm, t):
    """Rows scanned first, then columns; strict '<' keeps the earliest candidate."""
    n = len(dm)
    total = 0.0
    for i in range(n):
        best = math.inf
        for j in range(n):
            if j != i and dm[i, j] < best:
                best = dm[i, j]
        for j in range(n):
            if j != i and dm[j, i] < best:
                best = dm[j, i]
        total += max(0.0, t + dm[i, i] - best)
    return total


def exhaustive_distill(mat_t, mat_s, lam):
    n = len(mat_t)
    return sum(abs(lam * mat_t[i, j] - mat_s[i, j]) / (n - 1)
               for i in range(n) for j in range(n) if i != j)


# ------------------------------------------------------------ distances


def test_identical_batches_zero_diagonal():
    a = unit_rows(np.random.default_rng(0), 6, 16)
    assert np.all(np.diag(L.pairwise_distance_matrix(a, a)) == 0.0)


def test_orthogonal_unit_vectors():
    dm = L.pairwise_distance_matrix(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert dm[0, 0] == pytest.approx(math.sqrt(2), abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_distance_matrix_matches_loop(seed):
    rng = np.random.default_rng(seed)
    a, b = unit_rows(rng, 8, 12), unit_rows(rng, 8, 12)
    np.testing.assert_allclose(L.pairwise_distance_matrix(a, b), loop_distances(a, b), atol=1e-6)


def test_distance_shape_mismatch():
    with pytest.raises(ValueError):
        L.pairwise_distance_matrix(np.zeros((3, 4)), np.zeros((3, 5)))


# ------------------------------------------------------------ triplet


def test_triplet_zero_when_margins_hold():
    dm = np.full((4, 4), 1.5)
    np.fill_diagonal(dm, 0.0)
    assert L.triplet_hard_loss(dm, 1.0) == 0.0


def test_triplet_single_anchor_contribution():
    dm = np.array([[0.5, 0.7], [0.9, 0.0]])
    # anchor 0: 1 + 0.5 - min(0.7, 0.9) = 0.8; anchor 1: 1 + 0 - min(0.9, 0.7) = 0.3
    assert L.triplet_hard_loss(dm, 1.0) == pytest.approx(0.8 + 0.3, abs=1e-12)


def test_triplet_needs_two():
    with pytest.raises(ValueError):
        L.triplet_hard_loss(np.zeros((1, 1)))


@pytest.mark.parametrize("seed", range(10))
def test_triplet_matches_exhaustive_oracle(seed):
    rng = np.random.default_rng(seed)
    dm = L.pairwise_distance_matrix(unit_rows(rng, 32, 8), unit_rows(rng, 32, 8))
    assert L.triplet_hard_loss(dm, 1.0) == pytest.approx(exhaustive_triplet(dm, 1.0), abs=1e-9)


def test_hardest_negative_tie_prefers_row_then_lowest_index():
    dm = np.array([[0.0, 0.4, 0.4], [0.4, 0.0, 0.9], [0.4, 0.9, 0.0]])
    rows, cols = L.hardest_negatives(dm)
    assert (rows[0], cols[0]) == (0, 1)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_triplet_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    a, p = unit_rows(rng, 10, 6), unit_rows(rng, 10, 6)
    perm = rng.permutation(10)
    v1 = L.triplet_hard_loss(L.pairwise_distance_matrix(a, p))
    v2 = L.triplet_hard_loss(L.pairwise_distance_matrix(a[perm], p[perm]))
    assert v1 == pytest.approx(v2, abs=1e-10)


# ------------------------------------------------------------ binarization


def test_binarization_zero_on_signs():
    r = np.sign(np.random.default_rng(0).standard_normal((5, 8)))
    assert L.binarization_loss(r) == 0.0


def test_binarization_all_zero_equals_batch_size():
    assert L.binarization_loss(np.zeros((7, 64))) == pytest.approx(7.0)


def test_binarization_matches_loop():
    rng = np.random.default_rng(1)
    r = rng.standard_normal((6, 10))
    ref = sum(abs(r[i, k] - (1.0 if r[i, k] > 0 else -1.0)) / 10 for i in range(6) for k in range(10))
    assert L.binarization_loss(r) == pytest.approx(ref, abs=1e-6)


def test_hard_sign_boundary():
    np.testing.assert_array_equal(L.hard_sign(np.array([-0.2, 0.0, 0.7])), [-1, -1, 1])


# ------------------------------------------------------------ soft sign


def test_soft_sign_values():
    assert L.soft_sign(np.array(0.5), 1e-5) == pytest.approx(0.5 / 0.50001, rel=1e-12)
    assert round(float(L.soft_sign(np.array(0.5), 1e-5)), 5) == 0.99998
    assert L.soft_sign(np.array(0.0)) == 0.0


@settings(max_examples=100, deadline=None)
@given(st.floats(-1e6, 1e6, allow_nan=False))
def test_soft_sign_bounded_and_sign_preserving(x):
    b = float(L.soft_sign(np.array(x), 1e-5))
    assert abs(b) < 1.0
    assert np.sign(b) == np.sign(x)


def test_soft_sign_approaches_one():
    vals = L.soft_sign(np.array([1e-3, 1e-1, 10.0, 1e4]), 1e-5)
    assert np.all(np.diff(vals) > 0) and vals[-1] > 1 - 1e-8


def test_soft_sign_derivative_fd():
    x = np.array([-0.7, -1e-4, 0.02, 0.3])
    num = numeric_grad(lambda: float(np.sum(L.soft_sign(x))), x, h=1e-7)
    assert rel_err(L.soft_sign_derivative(x), num) < 1e-4


# ------------------------------------------------------------ distillation


def test_distill_real_zero_under_exact_scaling():
    rng = np.random.default_rng(2)
    dm_t = L.pairwise_distance_matrix(unit_rows(rng, 6, 16), unit_rows(rng, 6, 16))
    assert L.distill_real(dm_t, 0.95 * dm_t, 0.95) == 0.0


def test_distill_real_single_negative_pair():
    dm_t = np.array([[0.0, 1.0], [0.4, 0.0]])
    dm_s = np.array([[0.0, 0.5], [0.95 * 0.4, 0.0]])
    assert L.distill_real(dm_t, dm_s, 0.95) == pytest.approx(0.45, abs=1e-12)


def test_distill_real_ignores_positive_pairs():
    dm_t = np.array([[5.0, 1.0], [1.0, 7.0]])
    dm_s = np.array([[0.0, 0.95], [0.95, 0.0]])
    assert L.distill_real(dm_t, dm_s, 0.95) == pytest.approx(0.0, abs=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_distill_real_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    dm_t = L.pairwise_distance_matrix(unit_rows(rng, 9, 16), unit_rows(rng, 9, 16))
    dm_s = L.pairwise_distance_matrix(unit_rows(rng, 9, 8), unit_rows(rng, 9, 8))
    assert L.distill_real(dm_t, dm_s, 0.95) == pytest.approx(exhaustive_distill(dm_t, dm_s, 0.95), abs=1e-9)


def test_distill_real_zero_iff_scaled():
    rng = np.random.default_rng(3)
    dm_t = L.pairwise_distance_matrix(unit_rows(rng, 5, 4), unit_rows(rng, 5, 4))
    dm_s = 0.95 * dm_t
    dm_s[1, 3] += 1e-3
    assert L.distill_real(dm_t, dm_s, 0.95) > 0


def test_distill_binary_identical_batches():
    bt = np.ones((4, 128))
    bs = np.ones((4, 64))
    assert L.distill_binary(bt, bt, bs, bs, 64 / 128) == 0.0


def test_distill_binary_orthogonal():
    bt_a = np.array([[1.0, 1.0], [1.0, -1.0]])
    bt_p = np.array([[1.0, 1.0], [1.0, 1.0]])  # a1 . p0 = 0 ; a0 . p1 = 2
    bs_a = np.array([[1.0, -1.0], [1.0, 1.0]])
    bs_p = np.array([[1.0, 1.0], [1.0, 1.0]])
    gt = bt_a @ bt_p.T
    gs = bs_a @ bs_p.T
    assert gt[1, 0] == 0 and gs[0, 1] == 0
    # remaining pairs: |0.5 * 2 - 0| + |0.5 * 0 - 2|
    assert L.distill_binary(bt_a, bt_p, bs_a, bs_p, 0.5) == pytest.approx(1.0 + 2.0)


@pytest.mark.parametrize("seed", range(5))
def test_distill_binary_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    bta, btp = L.soft_sign(rng.standard_normal((7, 16))), L.soft_sign(rng.standard_normal((7, 16)))
    bsa, bsp = L.soft_sign(rng.standard_normal((7, 8))), L.soft_sign(rng.standard_normal((7, 8)))
    ref = exhaustive_distill(bta @ btp.T, bsa @ bsp.T, 0.5)
    assert L.distill_binary(bta, btp, bsa, bsp, 0.5) == pytest.approx(ref, abs=1e-9)


def test_lambda_b_defaults_to_dimension_ratio():
    assert L.LossConfig().resolved_lambda_b(64, 128) == 0.5
    assert L.LossConfig(lambda_b=0.3).resolved_lambda_b(64, 128) == 0.3


def test_loss_config_validation():
    with pytest.raises(ValueError):
        L.LossConfig(beta=-1)
    with pytest.raises(ValueError):
        L.LossConfig(eps=0)


# ------------------------------------------------------------ composites


def test_composite_weightings():
    assert L.distillation_loss(0.3, 0.7, gamma=0.0) == 0.3
    assert L.distillation_loss(0.0, 0.0) == 0.0
    assert L.distillation_loss(0.25, 0.5, 1.0) == pytest.approx(0.75, abs=1e-12)
    assert L.basic_loss(1.5, 2.0, alpha_b=0.0) == 1.5
    assert L.basic_loss(0.0, 0.0) == 0.0
    assert L.train_loss(1.0, 0.4, beta=0.0) == 1.0
    assert L.train_loss(1.0, 0.4, beta=2.0) == pytest.approx(1.8)


def _batch(rng, n=6, ds=8, dt=16):
    return unit_rows(rng, n, ds), unit_rows(rng, n, ds), unit_rows(rng, n, dt), unit_rows(rng, n, dt)


@pytest.mark.parametrize("seed", range(3))
def test_basic_objective_equals_independent_terms(seed):
    rng = np.random.default_rng(seed)
    a, p, _, _ = _batch(rng)
    cfg = L.LossConfig(alpha_b=0.7)
    total, terms, _, _ = L.basic_objective(a, p, cfg)
    lt = exhaustive_triplet(loop_distances(a, p), cfg.margin)
    lb = L.binarization_loss(a) + L.binarization_loss(p)
    assert total == pytest.approx(lt + 0.7 * lb, abs=1e-9)
    assert terms["triplet"] == pytest.approx(lt, abs=1e-9)


@pytest.mark.parametrize("seed", range(3))
def test_student_objective_equals_independent_terms(seed):
    rng = np.random.default_rng(seed)
    a, p, ta, tp = _batch(rng)
    cfg = L.LossConfig(gamma=0.6, beta=2.0)
    total, terms, _, _ = L.student_objective(a, p, ta, tp, cfg)
    basic = L.basic_objective(a, p, cfg)[0]
    lr_ = exhaustive_distill(loop_distances(ta, tp), loop_distances(a, p), 0.95)
    ss = lambda x: L.soft_sign(x, 1e-5)  # noqa: E731
    lb_ = exhaustive_distill(ss(ta) @ ss(tp).T, ss(a) @ ss(p).T, 8 / 16)
    assert total == pytest.approx(basic + 2.0 * (lr_ + 0.6 * lb_), abs=1e-9)
    assert terms["total"] == total


def test_beta_zero_reduces_to_basic():
    rng = np.random.default_rng(4)
    a, p, ta, tp = _batch(rng)
    cfg = L.LossConfig(beta=0.0)
    t1, _, ga1, gp1 = L.basic_objective(a, p, cfg)
    t2, _, ga2, gp2 = L.student_objective(a, p, ta, tp, cfg)
    assert t1 == t2
    np.testing.assert_array_equal(ga1, ga2)
    np.testing.assert_array_equal(gp1, gp2)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_losses_nonnegative_and_finite(seed):
    rng = np.random.default_rng(seed)
    a, p, ta, tp = _batch(rng, n=5)
    total, terms, ga, gp = L.student_objective(a, p, ta, tp, L.LossConfig())
    assert all(v >= 0 and math.isfinite(v) for v in terms.values())
    assert np.all(np.isfinite(ga)) and np.all(np.isfinite(gp))


# ------------------------------------------------------------ gradients


def _fd_check(fn, inputs, tol=1e-4):
    """``fn(*inputs) -> (value, *grads)``; compare every grad to central differences."""
    _, *grads = fn(*inputs)
    for x, g in zip(inputs, grads):
        num = numeric_grad(lambda: fn(*inputs)[0], x)
        assert rel_err(g, num) < tol


@pytest.mark.parametrize("seed", range(3))
def test_distance_gradient(seed):
    rng = np.random.default_rng(seed)
    a, p = rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
    w = rng.standard_normal((5, 5))

    def fn(a, p):
        dm = L.pairwise_distance_matrix(a, p)
        return (float(np.sum(w * dm)), *L.pairwise_distance_backward(a, p, dm, w))
    _fd_check(fn, [a, p])


@pytest.mark.parametrize("seed", range(3))
def test_triplet_gradient(seed):
    rng = np.random.default_rng(seed)
    a, p = unit_rows(rng, 6, 5), unit_rows(rng, 6, 5)

    def fn(a, p):
        dm = L.pairwise_distance_matrix(a, p)
        v, g = L.triplet_hard_loss_grad(dm, 1.0)
        return (v, *L.pairwise_distance_backward(a, p, dm, g))
    _fd_check(fn, [a, p])


def test_binarization_gradient():
    r = np.random.default_rng(5).uniform(-0.9, 0.9, (4, 6))
    _fd_check(L.binarization_loss_grad, [r])


@pytest.mark.parametrize("seed", range(3))
def test_distill_real_gradient(seed):
    rng = np.random.default_rng(seed)
    ta, tp = unit_rows(rng, 5, 8), unit_rows(rng, 5, 8)
    dm_t = L.pairwise_distance_matrix(ta, tp)
    a, p = unit_rows(rng, 5, 4), unit_rows(rng, 5, 4)

    def fn(a, p):
        dm = L.pairwise_distance_matrix(a, p)
        v, g = L.distill_real_grad(dm_t, dm, 0.95)
        return (v, *L.pairwise_distance_backward(a, p, dm, g))
    _fd_check(fn, [a, p])


@pytest.mark.parametrize("seed", range(3))
def test_distill_binary_gradient(seed):
    rng = np.random.default_rng(seed)
    bta, btp = L.soft_sign(rng.standard_normal((5, 8))), L.soft_sign(rng.standard_normal((5, 8)))
    a, p = rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
    _fd_check(lambda a, p: L.distill_binary_grad(bta, btp, a, p, 0.5), [a, p])


@pytest.mark.parametrize("seed", range(3))
def test_student_objective_gradient(seed):
    rng = np.random.default_rng(seed)
    a, p, ta, tp = _batch(rng, n=5, ds=4, dt=8)
    cfg = L.LossConfig(gamma=0.5, alpha_b=0.3)

    def fn(a, p):
        total, _, ga, gp = L.student_objective(a, p, ta, tp, cfg)
        return total, ga, gp
    _fd_check(fn, [a, p])
