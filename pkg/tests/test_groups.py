import numpy as np
import pytest
from hypothesis import given, strategies as st

from diffairec.data import GroupAssignment, GroupError
from diffairec.groups import (ConvergenceError, GroupVectors, build_group_vectors, counterfactual_targets,
                              mean_pool, pca_first_pc, top_eigenvector)


def split(s):
    return GroupAssignment(np.asarray(s), "gender")


def dense_top(X):
    """Dominant eigenvector of the explicit centered covariance."""
    Xc = X - X.mean(axis=1, keepdims=True)
    C = Xc @ Xc.T / (X.shape[1] - 1)
    w, V = np.linalg.eigh(C)
    return V[:, -1], w, C


# --- mean pooling -------------------------------------------------------------


def test_mean_pool_singleton_group():
    R = np.array([[1.0, 5.0, 0.0], [2.0, 5.0, 1.0], [3.0, 5.0, 0.0]])
    gv = mean_pool(R, split([0, 1, 1]))
    assert gv.a.tolist() == [1.0, 2.0, 3.0]
    assert gv.method == "mean_pool"


def test_mean_pool_two_columns():
    R = np.array([[1.0, 3.0, 9.0], [2.0, 2.0, 9.0], [3.0, 1.0, 9.0]])
    gv = mean_pool(R, split([0, 0, 1]))
    assert gv.a.tolist() == [2.0, 2.0, 2.0]
    assert gv.b.tolist() == [9.0, 9.0, 9.0]


def test_mean_pool_matches_loop(rng):
    R = rng.standard_normal((5, 8))
    s = np.array([0, 1, 0, 0, 1, 1, 0, 1])
    gv = mean_pool(R, split(s))
    for vec, g in ((gv.a, 0), (gv.b, 1)):
        ref = np.zeros(5)
        cnt = 0
        for j in range(8):
            if s[j] == g:
                cnt += 1
                for i in range(5):
                    ref[i] += R[i, j]
        assert np.abs(vec - ref / cnt).max() < 1e-12


@given(st.floats(-10, 10, allow_nan=False), st.integers(0, 2**31))
def test_mean_pool_linear(c, seed):
    rng = np.random.default_rng(seed)
    R = rng.standard_normal((4, 6))
    g = split([0, 1, 0, 1, 1, 0])
    base, scaled = mean_pool(R, g), mean_pool(c * R, g)
    np.testing.assert_allclose(scaled.a, c * base.a, atol=1e-12)
    np.testing.assert_allclose(scaled.b, c * base.b, atol=1e-12)


def test_empty_group_rejected():
    with pytest.raises(GroupError):
        split([0, 0, 0])


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        mean_pool(np.zeros((3, 4)), split([0, 1, 1]))


# --- PCA ----------------------------------------------------------------------


def test_rank_one_block_recovers_u():
    u = np.array([2.0, -1.0, 2.0]) / 3.0
    w = np.array([0.5, -1.0, 2.0, 0.1, 3.0])
    v, lam, degenerate = top_eigenvector(np.outer(u, w))
    ref, _, _ = dense_top(np.outer(u, w))
    ref = ref if ref[0] > 0 else -ref
    assert not degenerate
    np.testing.assert_allclose(v, u, atol=1e-8)
    np.testing.assert_allclose(v, ref, atol=1e-8)
    # u[0] > 0, so the sign rule picks +u rather than -u
    v2, _, _ = top_eigenvector(np.outer(-u, w))
    np.testing.assert_allclose(v2, u, atol=1e-8)


def test_isotropic_covariance_falls_back_to_e1():
    # rows are orthogonal with equal norm after centering: C = c * I
    X = np.array([[1.0, -1.0, 1.0, -1.0], [1.0, 1.0, -1.0, -1.0], [1.0, -1.0, -1.0, 1.0]])
    v, lam, degenerate = top_eigenvector(X)
    assert degenerate
    assert v.tolist() == [1.0, 0.0, 0.0]
    assert lam == pytest.approx(4.0 / 3.0)


def test_zero_block_is_degenerate():
    v, lam, degenerate = top_eigenvector(np.ones((4, 3)))
    assert degenerate and lam == 0.0 and v[0] == 1.0


@pytest.mark.parametrize("seed", range(5))
def test_matches_dense_eigensolver(seed):
    X = np.random.default_rng(seed).standard_normal((6, 10))
    v, lam, degenerate = top_eigenvector(X)
    ref, w, C = dense_top(X)
    assert not degenerate
    assert min(np.abs(v - ref).max(), np.abs(v + ref).max()) < 1e-8
    assert lam == pytest.approx(w[-1], rel=1e-10)


@given(st.integers(0, 2**31), st.integers(2, 12), st.integers(2, 15))
def test_rayleigh_residual_and_sign(seed, m, n):
    X = np.random.default_rng(seed).standard_normal((m, n))
    v, lam, degenerate = top_eigenvector(X)
    _, _, C = dense_top(X)
    assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-12)
    if degenerate:
        return
    rq = v @ C @ v
    assert np.linalg.norm(C @ v - rq * v) <= 1e-6
    first = v[np.flatnonzero(np.abs(v) > 1e-12)[0]]
    assert first > 0


def test_pca_group_vectors_are_unit_and_flagged(rng):
    R = rng.standard_normal((7, 9))
    gv = pca_first_pc(R, split([0, 1] * 4 + [0]))
    assert gv.method == "pca" and gv.degenerate == (False, False)
    assert np.linalg.norm(gv.a) == pytest.approx(1.0) and np.linalg.norm(gv.b) == pytest.approx(1.0)


def test_pca_needs_two_users():
    with pytest.raises(GroupError):
        pca_first_pc(np.ones((3, 3)), split([0, 1, 1]))


def test_nonconvergence_carries_residual(rng):
    with pytest.raises(ConvergenceError) as info:
        top_eigenvector(rng.standard_normal((10, 12)), max_iter=2)
    assert info.value.residual > 0
    assert "residual" in str(info.value)


def test_build_dispatch(rng):
    R = rng.standard_normal((4, 6))
    g = split([0, 0, 0, 1, 1, 1])
    assert build_group_vectors(R, g, "mean_pool").method == "mean_pool"
    assert build_group_vectors(R, g, "pca").method == "pca"
    with pytest.raises(ValueError):
        build_group_vectors(R, g, "kmeans")


# --- counterfactual targets ---------------------------------------------------


def test_targets_swap_groups():
    g = split([0, 1, 0])
    gv = GroupVectors(np.array([1.0, 2.0]), np.array([-3.0, -4.0]), "mean_pool")
    G = counterfactual_targets(g, gv)
    assert G[:, 0].tolist() == [-3.0, -4.0]  # user in A gets b
    assert G[:, 1].tolist() == [1.0, 2.0]  # user in B gets a
    assert G[:, 2].tolist() == [-3.0, -4.0]


@given(st.lists(st.integers(0, 1), min_size=2, max_size=12).filter(lambda s: 0 < sum(s) < len(s)))
def test_targets_involution(s):
    g = split(s)
    gv = GroupVectors(np.array([1.0, 0.5, 0.0]), np.array([0.0, -1.0, 7.0]), "mean_pool")
    twice = counterfactual_targets(g.swapped(), gv)
    s = np.asarray(s)
    np.testing.assert_array_equal(twice[:, s == 0], np.repeat(gv.a[:, None], (s == 0).sum(), 1))
    np.testing.assert_array_equal(twice[:, s == 1], np.repeat(gv.b[:, None], (s == 1).sum(), 1))


def test_targets_length_mismatch():
    with pytest.raises(ValueError):
        counterfactual_targets(split([0, 1]), GroupVectors(np.zeros(2), np.zeros(3), "mean_pool"))


def test_text_export():
    ta, tb = GroupVectors(np.array([0.1, 2.0]), np.array([3.0, -0.5]), "pca").to_text()
    assert [float(x) for x in ta.split()] == [0.1, 2.0]
    assert [float(x) for x in tb.split()] == [3.0, -0.5]
