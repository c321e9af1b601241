import math

import numpy as np
import pytest
from scipy import integrate
from hypothesis import given
from hypothesis import strategies as st

from polyct.errors import (
    AmbiguityShiftUnavailable,
    CoverageError,
    InvalidArgument,
    InvalidCurve,
)
from polyct.model import ForwardModel
from polyct.spectrum import (
    EnergySpectrumTable,
    KnotGrid,
    MassAttenuationCurve,
    MassAttenuationSpectrum,
    _laplace_numpy,
    b1_eval,
    b1_laplace,
    basis_matrix,
    build_knots,
    condition_diagnostic,
    construct_spectrum,
    laplace_matrices,
    output_matrix,
    shift_equivalent,
)

# knots 0.5, 1, 2, 4, 8: q = 2 with kappa_2 = 2
TOY = build_knots(8.0, 2.0, 3)

# b_2 on [1, 2, 4] and its first two s-derivatives, from mpmath quadrature (30 digits)
TOY_LAPLACE = {
    0.0: (1.5, -3.5, 8.75),
    0.7: (0.3206018146767526159, -0.66787158727444831866, 1.4945323186907437418),
    1e-9: (1.4999999965000000044, -3.4999999912500000116, 8.7499999767500000325),
    25.0: (2.2220710183479532988e-14, -2.3998366997694995663e-14, 2.5989342629134897898e-14),
}


def quad_laplace(grid, j, s, m):
    """Adaptive quadrature of the hat transform, one call per linear piece.

    The exponential is factored at each piece's left end so the integrand
    stays O(1) however large ``s * kappa`` gets.
    """
    a, b, c = (float(x) for x in grid.knots[j - 1 : j + 2])
    opts = dict(epsabs=0.0, epsrel=1e-13, limit=500)
    rise, _ = integrate.quad(lambda x: (-x) ** m * (x - a) / (b - a) * math.exp(-s * (x - a)), a, b, **opts)
    fall, _ = integrate.quad(lambda x: (-x) ** m * (c - x) / (c - b) * math.exp(-s * (x - b)), b, c, **opts)
    return math.exp(-s * a) * rise + math.exp(-s * b) * fall


class TestKnots:
    def test_default_triple(self):
        g = build_knots(1e3, 1.0, 30)
        assert g.q == pytest.approx(1.2589254117941672104, rel=1e-14)
        assert g.knots[16] == pytest.approx(1.0, rel=1e-12)
        assert g.knots[0] == pytest.approx(0.025118864315095801111, rel=1e-12)

    @given(st.floats(1.01, 1e6))
    def test_single_interval(self, c):
        g = build_knots(c, 1.0, 1)
        assert g.q == pytest.approx(c, rel=1e-12)
        assert g.knots[1] == pytest.approx(1.0, rel=1e-12)
        assert g.knots[0] == pytest.approx(1.0 / c, rel=1e-12)

    @pytest.mark.parametrize("args", [(0.5, 1, 30), (1.0, 1, 30), (10, 0, 3), (10, -1, 3), (10, 1, 0)])
    def test_rejects_bad_arguments(self, args):
        with pytest.raises(InvalidArgument):
            build_knots(*args)

    @given(st.floats(2.0, 1e5), st.floats(1e-3, 1e3), st.integers(1, 120))
    def test_geometric(self, coverage, center, J):
        g = build_knots(coverage, center, J)
        k = g.knots
        assert np.all(np.diff(k) > 0)
        np.testing.assert_allclose(k[1:] / k[:-1], g.q, rtol=1e-12)
        np.testing.assert_allclose(np.diff(np.log(k)), math.log(g.q), rtol=1e-10)
        assert k[(J + 2) // 2] == pytest.approx(center, rel=1e-12)
        assert g.q**J == pytest.approx(coverage, rel=1e-10)

    def test_grid_validation(self):
        with pytest.raises(InvalidArgument):
            KnotGrid(q=1.0, kappa0=1.0, J=3)
        with pytest.raises(InvalidArgument):
            KnotGrid(q=2.0, kappa0=0.0, J=3)


class TestHat:
    def test_peak_and_support(self, grid30):
        k = grid30.knots
        for j in (1, 7, 30):
            assert b1_eval(grid30, j, k[j]) == 1.0
            assert b1_eval(grid30, j, k[j - 1]) == 0.0
            assert b1_eval(grid30, j, k[j + 1]) == 0.0
            assert b1_eval(grid30, j, 2 * k[j + 1]) == 0.0

    def test_q_scaling(self, grid30, rng):
        kap = rng.uniform(grid30.knots[0], grid30.knots[-2], 200)
        for j in (1, 10, 29):
            np.testing.assert_allclose(
                b1_eval(grid30, j, kap), b1_eval(grid30, j + 1, grid30.q * kap), atol=1e-12
            )

    def test_index_range(self, grid30):
        for j in (0, 31):
            with pytest.raises(InvalidArgument):
                b1_eval(grid30, j, 1.0)

    def test_partition_of_unity_inside(self, grid30, rng):
        k = grid30.knots
        kap = rng.uniform(k[1], k[-2], 100)
        np.testing.assert_allclose(basis_matrix(grid30, kap).sum(axis=1), 1.0, atol=1e-12)


class TestLaplace:
    @pytest.mark.parametrize("s", sorted(TOY_LAPLACE))
    def test_frozen_values(self, s):
        for m in range(3):
            assert b1_laplace(TOY, 2, s, m) == pytest.approx(TOY_LAPLACE[s][m], rel=1e-12)

    def test_area_at_zero(self, grid30):
        k = grid30.knots
        for j in range(1, 31):
            assert b1_laplace(grid30, j, 0.0) == pytest.approx((k[j + 1] - k[j - 1]) / 2, rel=1e-14)

    def test_matches_quadrature_random(self, rng):
        g = build_knots(1e3, 1.0, 30)
        for _ in range(15):
            j = int(rng.integers(1, 31))
            s = float(10 ** rng.uniform(-6, 1.5))
            for m in range(3):
                assert b1_laplace(g, j, s, m) == pytest.approx(quad_laplace(g, j, s, m), rel=1e-10)

    def test_first_derivative_fd(self, grid30):
        for s in (0.01, 0.3, 4.0):
            h = 1e-5 * s
            fd = (b1_laplace(grid30, 12, s + h) - b1_laplace(grid30, 12, s - h)) / (2 * h)
            assert b1_laplace(grid30, 12, s, 1) == pytest.approx(fd, rel=1e-6)

    def test_numba_matches_numpy(self, grid30, rng):
        s = np.concatenate([[0.0, 1e-14, 1e-6], 10 ** rng.uniform(-4, 2, 300), -rng.uniform(0, 0.05, 20)])
        fast = laplace_matrices(grid30, s, orders=(0, 1, 2))
        ref = _laplace_numpy(grid30, s, (0, 1, 2))
        for a, b in zip(fast, ref):
            np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-300)

    def test_rejects_negative_s(self, grid30):
        with pytest.raises(InvalidArgument):
            b1_laplace(grid30, 3, -0.1)
        with pytest.raises(InvalidArgument):
            output_matrix(grid30, [0.1, -0.1])

    @given(st.lists(st.floats(0.0, 50.0), min_size=3, max_size=30))
    def test_decreasing_and_convex(self, svals):
        g = build_knots(1e2, 1.0, 8)
        s = np.unique(np.array(svals))
        A = output_matrix(g, s)
        assert np.all(A > 0) or np.all(A[s < 600] > 0)
        assert np.all(A <= g.areas() * (1 + 1e-14))
        if s.size > 1:
            assert np.all(np.diff(A, axis=0) <= 0)
        D2 = laplace_matrices(g, s, orders=(2,))[0]
        assert np.all(D2 >= 0)

    def test_output_matrix_rows(self, grid30):
        A = output_matrix(grid30, np.zeros(4))
        np.testing.assert_allclose(A, np.tile(grid30.areas(), (4, 1)), rtol=1e-14)
        B = output_matrix(grid30, [0.2, 0.9])
        assert np.all(B[0] > B[1])

    def test_output_matrix_small_grid_quadrature(self, rng):
        g = build_knots(50.0, 1.0, 4)
        s = rng.uniform(0, 5, 6)
        A = output_matrix(g, s)
        for n in range(6):
            for j in range(1, 5):
                assert A[n, j - 1] == pytest.approx(quad_laplace(g, j, s[n], 0), rel=1e-10)


def inverse_curve():
    # kappa = 1/eps on [1, 2]
    e = np.linspace(1.0, 2.0, 401)
    return MassAttenuationCurve([(e, 1.0 / e)])


class TestConstruct:
    def test_change_of_variables_mass(self):
        curve = inverse_curve()
        table = EnergySpectrumTable([1.0, 2.0], [1.0, 1.0])
        kap = np.linspace(0.6, 0.9, 7)
        errs = []
        for J in (60, 240):
            spec = construct_spectrum(curve, table, build_knots(1e2, 0.7, J))
            assert spec.incident_energy == pytest.approx(1.0, rel=1e-3)
            # density 1/kappa^2 on (1/2, 1); the jumps at both ends limit pointwise accuracy
            errs.append(np.max(np.abs(spec(kap) * kap**2 - 1.0)))
        assert errs[0] < 0.05
        assert errs[1] < errs[0] / 4

    def test_density_formula(self):
        curve = inverse_curve()
        table = EnergySpectrumTable([1.0, 2.0], [1.0, 1.0])
        kap = np.array([0.3, 0.6, 0.8, 1.2])
        np.testing.assert_allclose(
            curve.mass_attenuation_density(table, kap), [0.0, 1 / 0.36, 1 / 0.64, 0.0], rtol=1e-6
        )

    def test_zero_table(self):
        table = EnergySpectrumTable([1.0, 2.0], [0.0, 0.0])
        spec = construct_spectrum(inverse_curve(), table, build_knots(1e2, 0.7, 20))
        assert np.all(spec.coeffs == 0)

    def test_coverage_error(self):
        table = EnergySpectrumTable([1.0, 2.0], [1.0, 1.0])
        with pytest.raises(CoverageError):
            construct_spectrum(inverse_curve(), table, build_knots(1.5, 0.7, 10))

    def test_non_monotone_segment(self):
        e = np.linspace(1, 2, 10)
        with pytest.raises(InvalidCurve):
            MassAttenuationCurve([(e, np.ones(10))])
        with pytest.raises(InvalidCurve):
            MassAttenuationCurve([(e, e)])

    def test_k_edge_branches_add(self):
        # branches kappa = 1/eps on [1, 1.5] and 1.6/eps on [1.5, 2] overlap on (0.8, 1)
        e1 = np.linspace(1.0, 1.5, 201)
        e2 = np.linspace(1.5, 2.0, 201)
        curve = MassAttenuationCurve([(e1, 1.0 / e1), (e2, 1.6 / e2)])
        table = EnergySpectrumTable([1.0, 2.0], [1.0, 1.0])
        kap = np.array([0.7, 0.9, 1.05])
        expect = np.array([1 / 0.49, 1 / 0.81 + 1.6 / 0.81, 1.6 / 1.05**2])
        np.testing.assert_allclose(curve.mass_attenuation_density(table, kap), expect, rtol=1e-6)
        spec = construct_spectrum(curve, table, build_knots(1e2, 0.9, 80))
        assert spec.incident_energy == pytest.approx(1.0, rel=1e-3)

    def test_nonnegative_everywhere(self, grid30):
        from polyct.pipeline import power_law_curve, raised_cosine_table

        spec = construct_spectrum(power_law_curve(), raised_cosine_table(), build_knots(1e3, 1.0, 60))
        kap = np.geomspace(spec.grid.knots[0], spec.grid.knots[-1], 2000)
        assert np.all(spec(kap) >= 0)
        assert spec.incident_energy == pytest.approx(raised_cosine_table().total(), rel=1e-3)


class TestShift:
    def spectrum(self, grid, rng, lead=True, trail=False):
        c = rng.uniform(0.1, 1.0, grid.J)
        if lead:
            c[0] = 0.0
        if trail:
            c[-1] = 0.0
        return MassAttenuationSpectrum(grid, c)

    def test_left_shift_output(self, small_system, rng):
        g = build_knots(1e2, 0.05, 12)
        spec = self.spectrum(g, rng)
        alpha = rng.uniform(0, 1, small_system.shape[1])
        spec2, alpha2 = shift_equivalent(spec, alpha, "left")
        np.testing.assert_allclose(spec2.coeffs, g.q * np.append(spec.coeffs[1:], 0.0))
        model = ForwardModel(small_system, g)
        o1, _ = model.forward(alpha, spec.coeffs)
        o2, _ = model.forward(alpha2, spec2.coeffs)
        np.testing.assert_allclose(o2, o1, rtol=1e-10)

    def test_round_trip(self, rng):
        g = build_knots(1e2, 1.0, 10)
        spec = self.spectrum(g, rng)
        alpha = rng.uniform(0, 1, 25)
        s1, a1 = shift_equivalent(spec, alpha, "left")
        s2, a2 = shift_equivalent(s1, a1, "right")
        np.testing.assert_allclose(s2.coeffs, spec.coeffs, rtol=1e-12)
        np.testing.assert_allclose(a2, alpha, rtol=1e-12)

    def test_unavailable(self, rng):
        g = build_knots(1e2, 1.0, 10)
        spec = self.spectrum(g, rng, lead=False)
        with pytest.raises(AmbiguityShiftUnavailable):
            shift_equivalent(spec, np.ones(4), "left")
        with pytest.raises(AmbiguityShiftUnavailable):
            shift_equivalent(spec, np.ones(4), "right")
        with pytest.raises(InvalidArgument):
            shift_equivalent(spec, np.ones(4), "up")


class TestCondition:
    def test_duplicate_column(self, rng):
        A = rng.normal(size=(10, 3))
        A = np.column_stack([A, A[:, 0]])
        sv, rank = condition_diagnostic(A)
        assert rank == 3
        assert np.all(np.diff(sv) <= 0)

    def test_dense_sampling_full_rank(self):
        g = build_knots(20.0, 1.0, 4)
        A = output_matrix(g, np.linspace(0, 3, 200))
        assert condition_diagnostic(A)[1] == 4

    def test_scalar(self):
        sv, rank = condition_diagnostic([[2.5]])
        assert sv[0] == 2.5 and rank == 1

    def test_empty(self):
        with pytest.raises(InvalidArgument):
            condition_diagnostic(np.zeros((0, 3)))


class TestSpectrumTypes:
    def test_rejects_negative_coeffs(self, grid30):
        with pytest.raises(InvalidArgument):
            MassAttenuationSpectrum(grid30, -np.ones(30))

    def test_immutable(self, grid30):
        spec = MassAttenuationSpectrum(grid30, np.ones(30))
        with pytest.raises(ValueError):
            spec.coeffs[0] = 2.0

    def test_table_validation(self):
        with pytest.raises(InvalidArgument):
            EnergySpectrumTable([1.0], [1.0])
        with pytest.raises(InvalidArgument):
            EnergySpectrumTable([2.0, 1.0], [1.0, 1.0])
        with pytest.raises(InvalidArgument):
            EnergySpectrumTable([1.0, 2.0], [1.0, -1.0])
