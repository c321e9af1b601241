import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import ndimage

from polyct.errors import (
    CalibrationFailure,
    DegenerateSpectrum,
    InvalidArgument,
    InvalidMeasurement,
    UndefinedMetric,
)
from polyct.model import ForwardModel
from polyct.pipeline import (
    SimulationSpec,
    Sinogram,
    baseline,
    benchmark,
    energy_domain_output,
    energy_quadrature,
    linearize,
    make_phantom,
    power_law_curve,
    raised_cosine_table,
    rse,
    simulate,
)
from polyct.projector import build_system_matrix, covering_geometry
from polyct.solvers import OuterConfig, default_config, npg_bfgs
from polyct.spectrum import MassAttenuationSpectrum, build_knots


@pytest.fixture(scope="module")
def geom16():
    return covering_geometry(16, 10)


@pytest.fixture(scope="module")
def sys16(geom16):
    return build_system_matrix(geom16)


@pytest.fixture(scope="module")
def bench64():
    return benchmark(64, 60, seed=0, noise="poisson")


def mono_setup(n=32, n_angles=60, kind="nested"):
    """Near-monochromatic data: one very narrow hat carries the whole spectrum."""
    g = covering_geometry(n, n_angles)
    system = build_system_matrix(g)
    grid = build_knots(1.0001, 0.5, 3)
    I = np.array([0.0, 1000.0, 0.0])
    alpha = make_phantom(n, kind)
    E, _ = ForwardModel(system, grid).forward(alpha, I)
    return g, system, grid, I, alpha, E


class TestPhantom:
    def test_disk(self):
        img = make_phantom(32, "disks")
        c = np.arange(32) - 15.5
        r2 = c[None, :] ** 2 + c[:, None] ** 2
        np.testing.assert_array_equal(img, (r2 <= 8.0**2).astype(float))

    @pytest.mark.parametrize("kind", ["disks", "nested", "defects"])
    def test_deterministic_and_bounded(self, kind):
        a, b = make_phantom(64, kind), make_phantom(64, kind)
        assert np.array_equal(a, b)
        assert a.min() >= 0 and a.max() <= 1

    def test_defects_voids(self):
        img = make_phantom(128, "defects")
        labels, count = ndimage.label(img == 0)
        border = set(labels[0]) | set(labels[-1]) | set(labels[:, 0]) | set(labels[:, -1])
        interior = [k for k in range(1, count + 1) if k not in border]
        assert len(interior) >= 2
        # an isolated small ball separated from the body
        body, parts = ndimage.label(img > 0)
        assert parts >= 2

    def test_errors(self):
        with pytest.raises(InvalidArgument):
            make_phantom(8, "disks")
        with pytest.raises(InvalidArgument):
            make_phantom(32, "squares")


class TestPhysicsFixtures:
    def test_power_law(self):
        curve = power_law_curve()
        lo, hi = curve.kappa_range()
        assert lo == pytest.approx((140 / 60) ** -3, rel=1e-9)
        assert hi == pytest.approx((20 / 60) ** -3, rel=1e-9)

    def test_quadrature_sums(self):
        table = raised_cosine_table()
        kap, w = energy_quadrature(power_law_curve(), table, 2001)
        # the raised cosine of unit peak over a 120 keV window integrates to 60
        assert w.sum() == pytest.approx(60.0, rel=1e-6)
        assert np.all(w >= 0)

    def test_k_edge_node_on_both_sides(self):
        curve = power_law_curve(k_edge=(70.0, 2.0))
        kap, w = energy_quadrature(curve, raised_cosine_table(), 130)
        below = (70.0 / 60) ** -3
        assert np.isclose(kap, below, rtol=1e-12).sum() == 1
        assert np.isclose(kap, 2 * below, rtol=1e-12).sum() == 1

    def test_quadrature_errors(self):
        with pytest.raises(InvalidArgument):
            energy_quadrature(power_law_curve(), raised_cosine_table(), 1)

    def test_energy_output_zero_path(self):
        kap, w = energy_quadrature(power_law_curve(), raised_cosine_table(), 130)
        assert energy_domain_output(kap, w, np.zeros(3)) == pytest.approx(w.sum() * np.ones(3))


class TestSimulate:
    def test_calibration_targets(self, geom16, sys16):
        sim = simulate(SimulationSpec(size=16, geometry=geom16, noise=None), system=sys16)
        assert sim.means.max() == pytest.approx(65536.0, rel=1e-3)
        assert sim.means.min() == pytest.approx(20.0, rel=1e-3)
        np.testing.assert_array_equal(sim.sinogram.values, sim.means)

    def test_truth_spectrum_reproduces_means(self, geom16, sys16):
        spec = SimulationSpec(size=16, geometry=geom16, noise=None, energy_samples=2001, truth_J=300)
        sim = simulate(spec, system=sys16)
        model = ForwardModel(sys16, sim.truth_spectrum.grid)
        out, _ = model.forward(make_phantom(16, "defects"), sim.truth_spectrum)
        np.testing.assert_allclose(out, sim.means, rtol=1e-4)

    def test_same_seed(self, geom16, sys16):
        spec = SimulationSpec(size=16, geometry=geom16, seed=5)
        a = simulate(spec, system=sys16).sinogram.values
        b = simulate(spec, system=sys16).sinogram.values
        assert np.array_equal(a, b)
        c = simulate(SimulationSpec(size=16, geometry=geom16, seed=6), system=sys16).sinogram.values
        assert not np.array_equal(a, c)

    def test_poisson_monte_carlo(self, geom16, sys16):
        draws = np.array(
            [
                simulate(SimulationSpec(size=16, geometry=geom16, seed=k, truth_J=10), system=sys16).sinogram.values
                for k in range(200)
            ]
        )
        means = simulate(SimulationSpec(size=16, geometry=geom16, noise=None, truth_J=10), system=sys16).means
        idx = np.random.default_rng(0).choice(means.size, 10, replace=False)
        for n in idx:
            assert abs(draws[:, n].mean() - means[n]) <= 3 * math.sqrt(means[n] / 200)

    def test_lognormal(self, geom16, sys16):
        sim = simulate(SimulationSpec(size=16, geometry=geom16, noise="lognormal", seed=1), system=sys16)
        r = np.log(sim.sinogram.values / sim.means)
        assert r.std() == pytest.approx(0.02, rel=0.1)

    def test_zero_counts_replaced(self, geom16, sys16):
        sim = simulate(
            SimulationSpec(size=16, geometry=geom16, min_count=0.05, max_count=100.0), system=sys16
        )
        assert sim.zero_counts > 0
        assert sim.sinogram.values.min() >= 1.0

    def test_constant_data_fails(self, geom16, sys16):
        with pytest.raises(CalibrationFailure):
            simulate(SimulationSpec(size=16, geometry=geom16), np.zeros((16, 16)), sys16)

    def test_negative_density(self, geom16, sys16):
        with pytest.raises(InvalidArgument):
            simulate(SimulationSpec(size=16, geometry=geom16), -np.ones((16, 16)), sys16)

    @pytest.mark.parametrize(
        "kw", [{"max_count": 10, "min_count": 20}, {"min_count": 0}, {"energy_samples": 1}, {"size": 32}]
    )
    def test_invalid_spec(self, geom16, kw):
        with pytest.raises(InvalidArgument):
            SimulationSpec(**{"size": 16, "geometry": geom16, **kw})


class TestSinogram:
    def test_normalized(self, geom16, rng):
        s = Sinogram(rng.random(geom16.n_measurements) + 0.1, geom16)
        n = s.normalized()
        assert n.values.max() == 1.0
        np.testing.assert_allclose(n.values * n.scale, s.values, rtol=1e-15)
        assert n.as_image().shape == (10, geom16.detector_count)

    def test_invalid(self, geom16):
        with pytest.raises(InvalidMeasurement):
            Sinogram(np.zeros(geom16.n_measurements), geom16)
        with pytest.raises(InvalidArgument):
            Sinogram(np.ones(3), geom16)


class TestRSE:
    def test_values(self, rng):
        a = rng.random(50)
        assert rse(a, a) == 0.0
        assert rse(7 * a, a) == pytest.approx(0.0, abs=1e-15)
        assert rse([1.0, 0.0], [0.0, 2.0]) == 1.0

    def test_zero(self):
        with pytest.raises(UndefinedMetric):
            rse(np.zeros(4), np.ones(4))

    @given(st.integers(0, 10_000))
    def test_range(self, seed):
        rng = np.random.default_rng(seed)
        v = rse(rng.normal(size=20), rng.normal(size=20))
        assert 0 <= v <= 1


class TestLinearize:
    def test_monochromatic_limit(self):
        grid = build_knots(1.01, 2.0, 3)
        spec = MassAttenuationSpectrum(grid, np.array([0.0, 5.0, 0.0]))
        s = np.linspace(0.0, 3.0, 20)
        E = spec.incident_energy * np.exp(-2.0 * s)
        np.testing.assert_allclose(linearize(E, spec), s, rtol=0.01, atol=1e-12)

    def test_round_trip(self, grid30, rng):
        spec = MassAttenuationSpectrum(grid30, rng.random(30))
        E = spec.incident_energy * np.geomspace(1e-4, 0.999, 40)
        y = linearize(E, spec)
        np.testing.assert_allclose(spec.laplace(y), E, rtol=1e-8)

    def test_clamp(self, grid30):
        spec = MassAttenuationSpectrum(grid30, np.ones(30))
        E = np.array([1.01, 0.5]) * spec.incident_energy
        y, clamped = linearize(E, spec, return_clamped=True)
        assert y[0] == 0.0 and clamped[0]
        assert y[1] > 0 and not clamped[1]

    @given(st.floats(1e-4, 0.99), st.floats(1e-4, 0.99))
    def test_monotone(self, a, b):
        grid = build_knots(1e3, 1.0, 30)
        spec = MassAttenuationSpectrum(grid, np.linspace(0.1, 1.0, 30))
        if a == b:
            return
        ya, yb = linearize(np.array([a, b]) * spec.incident_energy, spec)
        assert (ya > yb) == (a < b)

    def test_errors(self, grid30):
        spec = MassAttenuationSpectrum(grid30, np.ones(30))
        with pytest.raises(InvalidMeasurement):
            linearize(np.array([0.5, 0.0]), spec)
        with pytest.raises(DegenerateSpectrum):
            linearize(np.array([0.5]), MassAttenuationSpectrum(grid30, np.zeros(30)))


class TestBaselines:
    def test_monochromatic_fbp_equals_lin_fbp(self):
        g, system, grid, I, alpha, E = mono_setup()
        sino = Sinogram(E, g)
        f, _ = baseline("fbp", sino, system=system)
        lin, _ = baseline("lin_fbp", sino, MassAttenuationSpectrum(grid, I), system=system)
        assert abs(rse(f, alpha) - rse(lin, alpha)) <= 1e-6

    def test_bpdn_small_weight_limit(self):
        bench = benchmark(32, 180, seed=0, noise=None)
        spec = bench.simulation.truth_spectrum
        lin, _ = baseline("lin_fbp", bench.sinogram, spec, system=bench.system)
        img, res = baseline(
            "lin_bpdn", bench.sinogram, spec, u=1e-6, system=bench.system,
            config=OuterConfig(max_outer=500),
        )
        assert rse(img, bench.phantom) <= 2 * rse(lin, bench.phantom)

    def test_ordering(self, bench64):
        spec = bench64.simulation.truth_spectrum
        r = {
            m: rse(baseline(m, bench64.sinogram, spec, u=3.0, system=bench64.system)[0], bench64.phantom)
            for m in ("fbp", "lin_fbp", "lin_bpdn")
        }
        assert r["fbp"] > r["lin_fbp"] > r["lin_bpdn"]

    def test_missing_spectrum(self, bench64):
        for m in ("lin_fbp", "lin-bpdn"):
            with pytest.raises(InvalidArgument):
                baseline(m, bench64.sinogram)
        with pytest.raises(InvalidArgument):
            baseline("art", bench64.sinogram)


class TestNormalizationInvariance:
    def test_lognormal(self):
        bench = benchmark(32, 60, seed=2, noise="lognormal")
        grid = build_knots(1e3, 1.0, 30)
        E = bench.sinogram.values
        cfg = default_config(u=1e-4, noise="lognormal", max_outer=60)
        a = npg_bfgs(E, bench.system, grid, cfg)
        b = npg_bfgs(3.7 * E, bench.system, grid, cfg)
        assert rse(a.alpha_hat, b.alpha_hat) <= 1e-8

    def test_poisson_fit_ratios(self):
        bench = benchmark(32, 60, seed=2, noise="poisson")
        grid = build_knots(1e3, 1.0, 30)
        E = bench.sinogram.values
        cfg = default_config(u=1e-4, max_outer=60)
        model = ForwardModel(bench.system, grid)
        ratios = []
        for scale in (1.0, 3.7):
            r = npg_bfgs(scale * E, bench.system, grid, cfg)
            En = scale * E / (scale * E).max()
            ratios.append(model.forward(r.alpha_hat, r.I_hat)[0] / En)
        np.testing.assert_allclose(ratios[0], ratios[1], rtol=1e-8)
