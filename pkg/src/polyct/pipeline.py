"""Phantoms, synthetic physics, measurement simulation, linearization and baselines.

The physics fixtures are analytic stand-ins, not tabulated material data:
``kappa(eps) = kappa_ref * (eps / eps_ref)**-3`` with an optional
multiplicative K-edge jump, and a raised-cosine incident spectrum on
20-140 keV.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    CalibrationFailure,
    DegenerateSpectrum,
    InvalidArgument,
    InvalidMeasurement,
    UndefinedMetric,
)
from .model import NoiseModel
from .projector import FanBeamGeometry, SystemMatrix, build_system_matrix, covering_geometry, fbp
from .prox import Regularizer
from .solvers import OuterConfig, ReconResult, npg_quadratic
from .spectrum import (
    EnergySpectrumTable,
    KnotGrid,
    MassAttenuationCurve,
    MassAttenuationSpectrum,
    build_knots,
    construct_spectrum,
    laplace_matrices,
)

PHANTOM_KINDS = ("disks", "nested", "defects")


def _unit_coords(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Pixel centers scaled so the inscribed circle has radius 1."""
    c = (np.arange(n) - n / 2.0 + 0.5) / (n / 2.0)
    return c[None, :] * np.ones((n, 1)), -c[:, None] * np.ones((1, n))


def make_phantom(n: int, kind: str = "defects") -> np.ndarray:
    """Deterministic piecewise-constant test object with values in ``[0, 1]``.

    ``disks`` is a single centered disk of radius ``n/4``.  ``nested`` stacks
    three concentric disks of different densities.  ``defects`` is a body with
    a non-convex dense insert, interior voids, a slot and an isolated small
    ball near the edge of the field of view.
    """
    if int(n) != n or n < 16:
        raise InvalidArgument(f"phantom side must be an integer >= 16, got {n}")
    if kind not in PHANTOM_KINDS:
        raise InvalidArgument(f"unknown phantom kind {kind!r}; choose from {PHANTOM_KINDS}")
    x, y = _unit_coords(int(n))

    def disk(cx, cy, r):
        return (x - cx) ** 2 + (y - cy) ** 2 <= r * r

    img = np.zeros((n, n))
    if kind == "disks":
        img[disk(0.0, 0.0, 0.5)] = 1.0
    elif kind == "nested":
        img[disk(0.0, 0.0, 0.7)] = 0.5
        img[disk(0.05, 0.0, 0.45)] = 1.0
        img[disk(0.1, 0.0, 0.2)] = 0.25
    else:
        img[disk(-0.05, 0.0, 0.7)] = 0.6
        crescent = disk(0.05, 0.05, 0.45) & ~disk(0.2, 0.15, 0.33)
        img[crescent] = 1.0
        img[disk(-0.38, 0.32, 0.09)] = 0.0
        img[disk(-0.3, -0.4, 0.07)] = 0.0
        img[disk(0.25, 0.18, 0.06)] = 0.0
        slot = (np.abs(x + 0.05) < 0.22) & (np.abs(y + 0.55) < 0.04)
        img[slot] = 0.0
        img[disk(0.74, -0.48, 0.07)] = 0.8
    return img


def power_law_curve(
    kappa_ref: float = 1.0,
    eps_ref: float = 60.0,
    energy_range: tuple[float, float] = (20.0, 140.0),
    k_edge: tuple[float, float] | None = None,
    samples: int = 400,
) -> MassAttenuationCurve:
    """Synthetic ``kappa(eps) = kappa_ref (eps/eps_ref)^-3``, optionally with a K-edge.

    ``k_edge = (energy, jump)`` multiplies the curve by ``jump`` above
    ``energy``, splitting it into two decreasing segments.
    """
    lo, hi = energy_range
    if not 0 < lo < hi:
        raise InvalidArgument("energy range must be increasing and positive")

    def kap(e):
        return kappa_ref * (e / eps_ref) ** -3.0

    if k_edge is None:
        e = np.geomspace(lo, hi, samples)
        return MassAttenuationCurve([(e, kap(e))])
    ek, jump = k_edge
    if not lo < ek < hi or not jump > 0:
        raise InvalidArgument("K-edge must lie inside the energy range with a positive jump")
    m = max(8, int(samples * math.log(ek / lo) / math.log(hi / lo)))
    e1 = np.geomspace(lo, ek, m)
    e2 = np.geomspace(ek, hi, max(8, samples - m))
    return MassAttenuationCurve([(e1, kap(e1)), (e2, jump * kap(e2))])


def raised_cosine_table(
    energy_range: tuple[float, float] = (20.0, 140.0), samples: int = 1201
) -> EnergySpectrumTable:
    """Raised-cosine bump vanishing at both ends of ``energy_range`` (unit peak)."""
    lo, hi = energy_range
    e = np.linspace(lo, hi, samples)
    d = 0.5 * (1.0 - np.cos(2.0 * np.pi * (e - lo) / (hi - lo)))
    return EnergySpectrumTable(e, d)


def energy_quadrature(
    curve: MassAttenuationCurve, table: EnergySpectrumTable, samples: int
) -> tuple[np.ndarray, np.ndarray]:
    """Attenuation values and weights ``(kappa_k, w_k)`` of an energy-domain Riemann sum.

    ``samples`` distinct equispaced-per-segment energies over the table support
    with trapezoid weights, so that ``sum_k w_k exp(-kappa_k s)`` approximates
    ``int iota(eps) exp(-kappa(eps) s) deps``.  A K-edge energy is a node of
    both adjacent segments, each side using its own branch of ``kappa``.
    """
    if int(samples) != samples or samples < 2:
        raise InvalidArgument("energy_samples must be an integer >= 2")
    lo, hi = table.support()
    pieces = []
    for seg in curve.segments:
        a, b = max(seg.e_lo, lo), min(seg.e_hi, hi)
        if b > a:
            pieces.append((seg, a, b))
    if not pieces:
        raise InvalidArgument("table support does not meet the curve")
    extra = len(pieces) - 1
    total = int(samples) + extra
    widths = np.array([b - a for _, a, b in pieces])
    counts = np.maximum(2, np.round(total * widths / widths.sum()).astype(int))
    counts[np.argmax(counts)] += total - counts.sum()
    kap, wts = [], []
    for (seg, a, b), m in zip(pieces, counts):
        e = np.linspace(a, b, int(m))
        w = np.full(e.size, (b - a) / (e.size - 1))
        w[0] *= 0.5
        w[-1] *= 0.5
        kap.append(seg.kappa(e))
        wts.append(w * table(e))
    return np.concatenate(kap), np.concatenate(wts)


def energy_domain_output(
    kappa: np.ndarray, weights: np.ndarray, s: np.ndarray, chunk: int = 4096
) -> np.ndarray:
    """``sum_k weights_k exp(-kappa_k s_n)`` for every path length ``s_n``."""
    s = np.asarray(s, dtype=float).ravel()
    out = np.empty(s.size)
    for i in range(0, s.size, chunk):
        out[i : i + chunk] = np.exp(-np.outer(s[i : i + chunk], kappa)) @ weights
    return out


@dataclass(frozen=True)
class Sinogram:
    """Energy measurements with their geometry; ``values * scale`` recovers raw counts."""

    values: np.ndarray = field(repr=False)
    geometry: FanBeamGeometry
    scale: float = 1.0

    def __post_init__(self):
        v = np.array(self.values, dtype=float).ravel()
        if v.size != self.geometry.n_measurements:
            raise InvalidArgument(
                f"sinogram has {v.size} values, geometry expects {self.geometry.n_measurements}"
            )
        if not np.all(np.isfinite(v)) or np.any(v <= 0):
            raise InvalidMeasurement("sinogram values must be finite and strictly positive")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def normalized(self) -> "Sinogram":
        m = float(self.values.max())
        return Sinogram(self.values / m, self.geometry, self.scale * m)

    def as_image(self) -> np.ndarray:
        return self.values.reshape(len(self.geometry.angles_deg), self.geometry.detector_count)


@dataclass(frozen=True)
class SimulationSpec:
    phantom: str = "defects"
    size: int = 128
    geometry: FanBeamGeometry | None = None
    curve: MassAttenuationCurve | None = None
    table: EnergySpectrumTable | None = None
    energy_samples: int = 130
    max_count: float = 2.0**16
    min_count: float = 20.0
    seed: int = 0
    noise: NoiseModel | None = NoiseModel.POISSON
    lognormal_sigma: float = 0.02
    truth_J: int = 100
    truth_coverage: float = 1e3

    def __post_init__(self):
        if not self.max_count > self.min_count > 0:
            raise InvalidArgument("need max_count > min_count > 0")
        if int(self.energy_samples) != self.energy_samples or self.energy_samples < 2:
            raise InvalidArgument("energy_samples must be an integer >= 2")
        if self.noise is not None:
            object.__setattr__(self, "noise", NoiseModel.parse(self.noise))
        if self.geometry is None:
            object.__setattr__(self, "geometry", covering_geometry(self.size, 60))
        if self.geometry.image_side != self.size:
            raise InvalidArgument("geometry image side differs from phantom size")
        if self.curve is None:
            object.__setattr__(self, "curve", power_law_curve())
        if self.table is None:
            object.__setattr__(self, "table", raised_cosine_table())
        if not self.lognormal_sigma > 0:
            raise InvalidArgument("lognormal_sigma must be positive")


@dataclass(frozen=True)
class Simulation:
    sinogram: Sinogram
    truth_spectrum: MassAttenuationSpectrum
    means: np.ndarray = field(repr=False)
    path_scale: float = 1.0
    intensity_scale: float = 1.0
    zero_counts: int = 0


def calibrate(
    kappa: np.ndarray, weights: np.ndarray, s: np.ndarray, max_count: float, min_count: float
) -> tuple[float, float]:
    """Path-length factor ``c`` and intensity factor ``a`` hitting the count targets.

    The output is monotone in path length, so its extremes sit at the extreme
    projections; ``c`` is found by bisection on ``log c`` and ``a`` then
    follows in closed form.
    """
    s = np.asarray(s, dtype=float).ravel()
    s_lo, s_hi = float(s.min()), float(s.max())
    if not s_hi > s_lo:
        raise CalibrationFailure("noiseless measurements are constant; ratio cannot be set")
    target = math.log(min_count / max_count)

    def log_ratio(c):
        o = energy_domain_output(kappa, weights, np.array([c * s_lo, c * s_hi]))
        if o[1] <= 0:
            return -math.inf
        return math.log(o[1] / o[0])

    lo, hi = 1e-12, 1.0
    while log_ratio(hi) > target:
        hi *= 4.0
        if hi > 1e12:
            raise CalibrationFailure("cannot reach the requested dynamic range")
    for _ in range(200):
        mid = math.sqrt(lo * hi)
        if log_ratio(mid) > target:
            lo = mid
        else:
            hi = mid
        if hi / lo - 1.0 < 1e-14:
            break
    c = math.sqrt(lo * hi)
    top = energy_domain_output(kappa, weights, np.array([c * s_lo]))[0]
    return c, max_count / top


def truth_grid(kappa_lo: float, kappa_hi: float, J: int = 100, coverage: float = 1e3) -> KnotGrid:
    """Knot grid of the requested coverage centered geometrically on a kappa range."""
    return build_knots(coverage, math.sqrt(kappa_lo * kappa_hi), J)


def simulate(spec: SimulationSpec, alpha_true=None, system: SystemMatrix | None = None) -> Simulation:
    """Polychromatic measurements of ``alpha_true`` (defaults to ``spec.phantom``).

    Noiseless means come from an energy-domain Riemann sum, calibrated so the
    largest and smallest means equal ``max_count`` and ``min_count``.  The
    returned truth spectrum lives in the calibrated attenuation units, so that
    ``model.forward(alpha_true, truth)`` reproduces the means.
    """
    geom = spec.geometry
    if alpha_true is None:
        alpha_true = make_phantom(spec.size, spec.phantom)
    alpha_true = np.asarray(alpha_true, dtype=float)
    if alpha_true.size != geom.n_pixels:
        raise InvalidArgument("phantom size does not match the geometry")
    if np.any(alpha_true < 0):
        raise InvalidArgument("true density map must be nonnegative")
    system = system or build_system_matrix(geom)
    s = system.project(alpha_true)
    kappa, w = energy_quadrature(spec.curve, spec.table, spec.energy_samples)
    c, a = calibrate(kappa, w, s, spec.max_count, spec.min_count)
    means = a * energy_domain_output(c * kappa, w, s)

    rng = np.random.Generator(np.random.Philox(key=int(spec.seed) & (2**64 - 1)))
    zeros = 0
    if spec.noise is None:
        values = means.copy()
    elif spec.noise is NoiseModel.POISSON:
        values = rng.poisson(means).astype(float)
        zeros = int(np.sum(values == 0))
        values[values == 0] = 1.0
    else:
        values = means * np.exp(spec.lognormal_sigma * rng.standard_normal(means.size))

    curve_c = spec.curve.scaled(c)
    table_a = spec.table.scaled(a)
    k_lo, k_hi = curve_c.kappa_range(*table_a.support())
    grid = truth_grid(k_lo, k_hi, spec.truth_J, spec.truth_coverage)
    truth = construct_spectrum(curve_c, table_a, grid)
    return Simulation(
        sinogram=Sinogram(values, geom),
        truth_spectrum=truth,
        means=means,
        path_scale=c,
        intensity_scale=a,
        zero_counts=zeros,
    )


def rse(alpha_hat, alpha_true) -> float:
    """Scale-invariant relative squared error ``1 - cos^2`` between two images."""
    a = np.asarray(alpha_hat, dtype=float).ravel()
    b = np.asarray(alpha_true, dtype=float).ravel()
    if a.size != b.size:
        raise InvalidArgument("images differ in size")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise UndefinedMetric("RSE undefined for a zero image")
    c = float(a @ b) / (na * nb)
    return float(min(max(1.0 - c * c, 0.0), 1.0))


def linearize(E, spectrum: MassAttenuationSpectrum, return_clamped: bool = False):
    """Invert ``s -> b^L(s) I`` for every measurement by bracketed bisection.

    Measurements at or above the incident energy map to zero path length (and
    are reported when ``return_clamped`` is set).
    """
    E = np.asarray(E.values if isinstance(E, Sinogram) else E, dtype=float).ravel()
    if np.any(E <= 0) or not np.all(np.isfinite(E)):
        raise InvalidMeasurement("measurements must be finite and strictly positive")
    c = spectrum.coeffs
    if not np.any(c > 0):
        raise DegenerateSpectrum("cannot linearize with a zero spectrum")
    grid = spectrum.grid

    def out(s):
        return laplace_matrices(grid, s)[0] @ c

    I_in = spectrum.incident_energy
    clamped = E >= I_in
    y = np.zeros(E.size)
    idx = np.flatnonzero(~clamped)
    if idx.size:
        target = E[idx]
        lo = np.zeros(idx.size)
        hi = np.full(idx.size, 1.0 / grid.knots[-1])
        # grow the upper bracket until it straddles the target
        for _ in range(200):
            bad = out(hi) >= target
            if not np.any(bad):
                break
            lo = np.where(bad, hi, lo)
            hi = np.where(bad, hi * 2.0, hi)
        else:
            raise InvalidMeasurement("measurement below the representable output range")
        active = np.arange(idx.size)
        for _ in range(400):
            mid = 0.5 * (lo[active] + hi[active])
            above = out(mid) >= target[active]
            lo[active] = np.where(above, mid, lo[active])
            hi[active] = np.where(above, hi[active], mid)
            width = hi[active] - lo[active]
            done = (width <= 1e-12 * hi[active]) | (width <= 1e-300)
            active = active[~done]
            if active.size == 0:
                break
        y[idx] = 0.5 * (lo + hi)
    return (y, clamped) if return_clamped else y


BASELINES = ("fbp", "lin_fbp", "lin_bpdn")


def baseline(
    method: str,
    sinogram: Sinogram,
    spectrum: MassAttenuationSpectrum | None = None,
    u: float = 1e-3,
    reg: Regularizer | None = None,
    system: SystemMatrix | None = None,
    config: OuterConfig | None = None,
    truth=None,
) -> tuple[np.ndarray, ReconResult | None]:
    """Reference reconstructions; ``spectrum`` is in the raw units of ``sinogram``.

    Returns the image and, for ``lin_bpdn``, the solver result.
    """
    method = method.replace("-", "_")
    if method not in BASELINES:
        raise InvalidArgument(f"unknown baseline {method!r}; choose from {BASELINES}")
    geom = sinogram.geometry
    norm = sinogram.normalized()
    if method == "fbp":
        return fbp(-np.log(norm.values), geom), None
    if spectrum is None:
        raise InvalidArgument(f"{method} needs the mass-attenuation spectrum")
    spec_n = spectrum.scaled(sinogram.scale / norm.scale)
    y = linearize(norm.values, spec_n)
    a_fbp = fbp(y, geom)
    if method == "lin_fbp":
        return a_fbp, None
    system = system or build_system_matrix(geom)
    cfg = config or OuterConfig()
    cfg = replace(cfg, u=u, reg=reg or cfg.reg)
    res = npg_quadratic(y, system, cfg, alpha0=a_fbp.ravel(), truth=truth)
    return res.alpha_hat, res


@dataclass
class Benchmark:
    phantom: np.ndarray
    system: SystemMatrix
    simulation: Simulation

    @property
    def sinogram(self) -> Sinogram:
        return self.simulation.sinogram


def benchmark(
    n: int = 64,
    n_angles: int = 60,
    seed: int = 0,
    noise: NoiseModel | str | None = NoiseModel.POISSON,
    phantom: str = "defects",
    system: SystemMatrix | None = None,
    **spec_kw,
) -> Benchmark:
    """Simulated problem on the default covering geometry with ``n`` detectors."""
    geom = system.geometry if system is not None else covering_geometry(n, n_angles)
    system = system or build_system_matrix(geom)
    spec = SimulationSpec(
        phantom=phantom, size=n, geometry=geom, seed=seed,
        noise=None if noise is None else NoiseModel.parse(noise), **spec_kw,
    )
    alpha = make_phantom(n, phantom)
    return Benchmark(phantom=alpha, system=system, simulation=simulate(spec, alpha, system))
