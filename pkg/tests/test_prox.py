import cvxpy as cp
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from polyct.errors import InvalidArgument
from polyct.prox import (
    ProxSettings,
    Regularizer,
    apply_prox,
    dwt,
    idwt,
    project_nonneg,
    prox_objective,
    prox_tv,
    prox_wavelet_admm,
    soft_threshold,
    tv_norm,
)

TIGHT = ProxSettings(tol=1e-13, max_iters=20000)


def tv_reference(x: np.ndarray) -> float:
    """Loop form: each pixel pairs with the pixel above and the one to its right."""
    n = x.shape[0]
    total = 0.0
    for i in range(n):
        for j in range(n):
            up = x[i, j] - x[i - 1, j] if i > 0 else None
            right = x[i, j] - x[i, j + 1] if j < n - 1 else None
            if up is not None and right is not None:
                total += np.hypot(up, right)
            elif up is not None:
                total += abs(up)
            elif right is not None:
                total += abs(right)
    return total


def cvx_tv(x):
    n = x.shape[0]
    up = x[1:, :-1] - x[:-1, :-1]
    right = x[1:, :-1] - x[1:, 1:]
    terms = cp.sum(cp.norm(cp.vstack([cp.vec(up, order="C"), cp.vec(right, order="C")]), 2, axis=0))
    last_col = cp.sum(cp.abs(x[1:, n - 1] - x[:-1, n - 1]))
    top_row = cp.sum(cp.abs(x[0, :-1] - x[0, 1:]))
    return terms + last_col + top_row


def tv_oracle(a: np.ndarray, lam: float) -> float:
    x = cp.Variable(a.shape)
    prob = cp.Problem(cp.Minimize(0.5 * cp.sum_squares(x - a) + lam * cvx_tv(x)), [x >= 0])
    prob.solve(solver=cp.CLARABEL, tol_gap_abs=1e-10, tol_gap_rel=1e-10, tol_feas=1e-10)
    return float(prob.value)


def haar_matrix(n: int, levels: int) -> np.ndarray:
    cols = [dwt(e.reshape(n, n), levels).ravel() for e in np.eye(n * n)]
    return np.array(cols).T  # Psi^T


def wavelet_oracle(a: np.ndarray, lam: float, levels: int) -> float:
    W = haar_matrix(a.shape[0], levels)
    x = cp.Variable(a.size)
    prob = cp.Problem(
        cp.Minimize(0.5 * cp.sum_squares(x - a.ravel()) + lam * cp.norm1(W @ x)), [x >= 0]
    )
    prob.solve(solver=cp.CLARABEL, tol_gap_abs=1e-10, tol_gap_rel=1e-10, tol_feas=1e-10)
    return float(prob.value)


class TestElementwise:
    def test_soft_threshold(self):
        np.testing.assert_array_equal(soft_threshold([3.0, -0.5, -3.0], 1.0), [2.0, 0.0, -2.0])

    def test_project(self):
        np.testing.assert_array_equal(project_nonneg([-1.0, 2.0]), [0.0, 2.0])

    @given(arrays(float, 12, elements=st.floats(-1e6, 1e6)))
    def test_zero_threshold_identity(self, x):
        np.testing.assert_array_equal(soft_threshold(x, 0.0), x)

    def test_negative_threshold(self):
        with pytest.raises(InvalidArgument):
            soft_threshold([1.0], -0.1)


class TestTV:
    def test_norm_matches_loop(self, rng):
        x = rng.normal(size=(7, 7))
        assert tv_norm(x) == pytest.approx(tv_reference(x), rel=1e-13)
        assert tv_norm(x.ravel()) == pytest.approx(tv_reference(x), rel=1e-13)

    def test_norm_hand_value(self):
        # single bright pixel at (1, 1) of a 3x3: it differs from its upper and right
        # neighbors, the pixel below pairs with it upward, the pixel left pairs rightward
        x = np.zeros((3, 3))
        x[1, 1] = 1.0
        assert tv_norm(x) == pytest.approx(np.sqrt(2) + 2.0, rel=1e-15)

    def test_vanishing_weight(self, rng):
        a = rng.normal(size=(8, 8))
        x, _ = prox_tv(a, 1e-12, TIGHT)
        np.testing.assert_allclose(x, np.maximum(a, 0), atol=1e-8)

    def test_constant(self):
        a = np.full((8, 8), 0.7)
        x, _ = prox_tv(a, 0.5, ProxSettings())
        np.testing.assert_allclose(x, a, atol=1e-12)

    def test_oracle(self, rng):
        a = rng.random((8, 8))
        x, info = prox_tv(a, 0.3, TIGHT)
        reg = Regularizer("tv", 1.0)
        assert prox_objective(x, a, 0.3, reg) == pytest.approx(tv_oracle(a, 0.3), abs=1e-6)
        assert info.converged

    def test_oracle_signed_input(self, rng):
        # negative inputs exercise the nonnegativity constraint inside the prox
        a = rng.normal(size=(8, 8))
        x, _ = prox_tv(a, 0.2, TIGHT)
        reg = Regularizer("tv", 1.0)
        assert prox_objective(x, a, 0.2, reg) == pytest.approx(tv_oracle(a, 0.2), abs=1e-6)

    def test_warm_start(self, rng):
        a = rng.random((16, 16))
        _, info = prox_tv(a, 0.2, ProxSettings(tol=1e-9, max_iters=5000))
        _, again = prox_tv(a, 0.2, ProxSettings(tol=1e-9, max_iters=5000), warm=info)
        assert again.iterations < info.iterations

    def test_shape_preserved(self, rng):
        a = rng.random(64)
        x, _ = prox_tv(a, 0.1)
        assert x.shape == (64,)

    def test_errors(self, rng):
        with pytest.raises(InvalidArgument):
            prox_tv(rng.random((4, 5)), 0.1)
        with pytest.raises(InvalidArgument):
            prox_tv(rng.random((4, 4)), 0.0)


class TestWavelet:
    def test_round_trip(self, rng):
        x = rng.normal(size=(16, 16))
        np.testing.assert_allclose(idwt(dwt(x)), x, atol=1e-12)

    def test_parseval(self, rng):
        x = rng.normal(size=(16, 16))
        assert np.linalg.norm(dwt(x)) == pytest.approx(np.linalg.norm(x), abs=1e-12)

    def test_matrix_orthogonal(self):
        W = haar_matrix(8, 3)
        np.testing.assert_allclose(W @ W.T, np.eye(64), atol=1e-13)

    def test_constant_block(self):
        c = dwt(np.full((2, 2), 3.0), levels=1)
        np.testing.assert_allclose(c, [[6.0, 0.0], [0.0, 0.0]], atol=1e-15)

    def test_divisibility(self, rng):
        with pytest.raises(InvalidArgument):
            dwt(rng.random((12, 12)), levels=3)
        with pytest.raises(InvalidArgument):
            prox_wavelet_admm(rng.random((12, 12)), 0.1, levels=3)

    def test_vanishing_weight(self, rng):
        a = rng.normal(size=(8, 8))
        x, _ = prox_wavelet_admm(a, 1e-12, TIGHT)
        np.testing.assert_allclose(x, np.maximum(a, 0), atol=1e-6)

    def test_oracle(self, rng):
        a = rng.normal(size=(8, 8))
        x, info = prox_wavelet_admm(a, 0.5, ProxSettings(rho=1.0, tol=1e-13, max_iters=20000))
        reg = Regularizer("wavelet", 1.0, levels=3)
        assert prox_objective(x, a, 0.5, reg) == pytest.approx(wavelet_oracle(a, 0.5, 3), abs=1e-6)

    def test_large_weight_zero(self, rng):
        a = rng.normal(size=(8, 8))
        lam = 2.0 * np.abs(dwt(np.maximum(a, 0))).max()
        x, _ = prox_wavelet_admm(a, lam, TIGHT)
        assert wavelet_oracle(a, lam, 3) == pytest.approx(0.5 * np.sum(a**2), abs=1e-7)
        np.testing.assert_allclose(x, 0.0, atol=1e-6)

    def test_residual_decreases(self, rng):
        a = rng.normal(size=(16, 16))
        _, info = prox_wavelet_admm(a, 0.3, ProxSettings(max_iters=50))
        assert info.residual < info.initial_residual


@pytest.mark.parametrize("kind", ["tv", "wavelet"])
class TestCommonProperties:
    def test_nonexpansive(self, kind, rng):
        reg = Regularizer(kind, 1.0)
        for _ in range(10):
            a = rng.normal(size=(8, 8))
            b = a + 0.3 * rng.normal(size=(8, 8))
            xa, _ = apply_prox(a, 0.4, reg, TIGHT)
            xb, _ = apply_prox(b, 0.4, reg, TIGHT)
            assert np.linalg.norm(xa - xb) <= np.linalg.norm(a - b) + 1e-8

    @given(seed=st.integers(0, 2**31), lam=st.floats(1e-3, 2.0))
    def test_feasible_and_beats_projection(self, kind, seed, lam):
        rng = np.random.default_rng(seed)
        reg = Regularizer(kind, 1.0)
        a = rng.normal(size=(8, 8))
        x, _ = apply_prox(a, lam, reg, ProxSettings(tol=1e-10, max_iters=3000))
        assert x.min() >= 0
        assert prox_objective(x, a, lam, reg) <= prox_objective(np.maximum(a, 0), a, lam, reg) + 1e-9


class TestSettings:
    @pytest.mark.parametrize("kw", [{"rho": 0}, {"tol": 0}, {"max_iters": 0}, {"max_iters": 1.5}])
    def test_invalid(self, kw):
        with pytest.raises(InvalidArgument):
            ProxSettings(**kw)

    def test_regularizer(self):
        assert Regularizer("wavelet-l1", 2.0).kind.value == "wavelet"
        with pytest.raises(InvalidArgument):
            Regularizer("tv", 0.0)
        with pytest.raises(InvalidArgument):
            Regularizer("lasso", 1.0)
        assert Regularizer("tv", 1.0).value(-np.ones((4, 4))) == np.inf
