"""B1-spline expansion of the mass-attenuation spectrum.

The spectrum ``v(kappa)`` is expanded over hat functions whose knots form a
geometric series ``kappa_j = q**j * kappa0``.  Everything the forward model
needs is the Laplace transform of those hats (and its ``s``-derivatives), which
is available in closed form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numba
import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.optimize import nnls

from .errors import (
    AmbiguityShiftUnavailable,
    CoverageError,
    InvalidArgument,
    InvalidCurve,
)

# Below this argument the moment integrals switch from the exp recurrence to
# their power series (the recurrence loses digits as x -> 0).
_SERIES_CUTOFF = 0.25
_SERIES_TERMS = 28
_MASS_PIN = 1e4


@dataclass(frozen=True)
class KnotGrid:
    """Geometric knot sequence ``kappa_j = q**j * kappa0`` for ``j = 0..J+1``."""

    q: float
    kappa0: float
    J: int

    def __post_init__(self):
        if not self.q > 1.0:
            raise InvalidArgument(f"common ratio must exceed 1, got {self.q}")
        if not self.kappa0 > 0.0:
            raise InvalidArgument(f"kappa0 must be positive, got {self.kappa0}")
        if int(self.J) != self.J or self.J < 1:
            raise InvalidArgument(f"J must be a positive integer, got {self.J}")

    @property
    def knots(self) -> np.ndarray:
        return self.kappa0 * self.q ** np.arange(self.J + 2, dtype=float)

    @property
    def center_index(self) -> int:
        """``ceil((J+1)/2)``, the knot pinned by :func:`build_knots`."""
        return (self.J + 2) // 2

    @property
    def coverage(self) -> float:
        return self.q ** (self.J + 1)

    def areas(self) -> np.ndarray:
        """Integrals of the J hat functions (their Laplace transforms at 0)."""
        k = self.knots
        return 0.5 * (k[2:] - k[:-2])


def build_knots(coverage: float, center_value: float, J: int) -> KnotGrid:
    """Knot grid with ``q**J = coverage`` and ``kappa_{ceil((J+1)/2)} = center_value``."""
    if not coverage > 1.0:
        raise InvalidArgument(f"coverage must exceed 1, got {coverage}")
    if not center_value > 0.0:
        raise InvalidArgument(f"center value must be positive, got {center_value}")
    if int(J) != J or J < 1:
        raise InvalidArgument(f"J must be a positive integer, got {J}")
    J = int(J)
    q = float(coverage) ** (1.0 / J)
    c = (J + 2) // 2
    return KnotGrid(q=q, kappa0=center_value / q**c, J=J)


def _check_index(grid: KnotGrid, j: int) -> None:
    if not 1 <= j <= grid.J:
        raise InvalidArgument(f"basis index {j} outside 1..{grid.J}")


def b1_eval(grid: KnotGrid, j: int, kappa) -> np.ndarray:
    """Hat function ``b_j`` on ``[kappa_{j-1}, kappa_{j+1}]`` peaking at ``kappa_j``."""
    _check_index(grid, j)
    k = grid.knots
    a, b, c = k[j - 1], k[j], k[j + 1]
    kappa = np.asarray(kappa, dtype=float)
    rise = (kappa - a) / (b - a)
    fall = (c - kappa) / (c - b)
    out = np.where((kappa >= a) & (kappa < b), rise, 0.0)
    return np.where((kappa >= b) & (kappa < c), fall, out)


def basis_matrix(grid: KnotGrid, kappa) -> np.ndarray:
    """Rows ``b(kappa_i)`` for each sample; shape ``(len(kappa), J)``."""
    kappa = np.asarray(kappa, dtype=float).ravel()
    return np.stack([b1_eval(grid, j, kappa) for j in range(1, grid.J + 1)], axis=1)


def _exp_moments(x: np.ndarray, n_max: int) -> list[np.ndarray]:
    """``E_n(x) = int_0^1 u**n exp(-x u) du`` for ``n = 0..n_max``.

    Large ``x`` uses the upward recurrence from ``E_0``; small (and negative)
    ``x`` sums the series for ``E_{n_max}`` and recurses downward, which is the
    stable direction there.
    """
    x = np.asarray(x, dtype=float)
    out = [np.empty_like(x) for _ in range(n_max + 1)]
    big = x >= _SERIES_CUTOFF
    small = ~big
    if np.any(big):
        xb = x[big]
        ex = np.exp(-xb)
        e = -np.expm1(-xb) / xb
        out[0][big] = e
        for n in range(1, n_max + 1):
            e = (n * e - ex) / xb
            out[n][big] = e
    if np.any(small):
        xs = x[small]
        # sum_i (-x)^i / (i! (n+i+1)); more terms when x is far below zero
        span = float(np.max(-xs, initial=0.0))
        terms = _SERIES_TERMS + int(math.ceil(3.0 * span))
        term = np.ones_like(xs)
        acc = np.zeros_like(xs)
        for i in range(terms):
            acc += term / (n_max + i + 1)
            term *= -xs / (i + 1)
        ex = np.exp(-xs)
        e = acc
        out[n_max][small] = e
        for n in range(n_max, 0, -1):
            e = (xs * e + ex) / n
            out[n - 1][small] = e
    return out


@numba.njit(cache=True)
def _moments_scalar(x, ex, n_max, out):
    # ex = exp(-x) is passed in because the caller already has it
    if x >= _SERIES_CUTOFF:
        e = (1.0 - ex) / x
        out[0] = e
        for n in range(1, n_max + 1):
            e = (n * e - ex) / x
            out[n] = e
    else:
        term = 1.0
        acc = 0.0
        i = 0
        while True:
            inc = term / (n_max + i + 1)
            acc += inc
            if abs(inc) <= 1e-17 * abs(acc) and i > 2:
                break
            term *= -x / (i + 1)
            i += 1
        e = acc
        out[n_max] = e
        for n in range(n_max, 0, -1):
            e = (x * e + ex) / n
            out[n - 1] = e


@numba.njit(cache=True)
def _laplace_kernel(s, knots, m_max, out):
    # hat j rises over interval j-1 and falls over interval j, so moments are
    # computed once per interval and exponentials once per knot
    J = knots.size - 2
    n_int = J + 1
    # the downward series recursion makes low moments depend on the top order;
    # fixing it at >= 2 keeps A bitwise identical whether or not dA/ds is wanted
    n_mom = max(m_max + 1, 2)
    mom = np.empty((n_int, n_mom + 1))
    ek = np.empty(J + 2)
    width = knots[1:] - knots[:-1]
    # crise[m, i, j] = C(m, i) lo_j^(m-i) d1_j^i and likewise cfall with mid, d2
    crise = np.zeros((m_max + 1, m_max + 1, J))
    cfall = np.zeros((m_max + 1, m_max + 1, J))
    for j in range(J):
        for m in range(m_max + 1):
            c = 1.0
            for i in range(m + 1):
                crise[m, i, j] = c * knots[j] ** (m - i) * width[j] ** i
                cfall[m, i, j] = c * knots[j + 1] ** (m - i) * width[j + 1] ** i
                c = c * (m - i) / (i + 1)
    for r in range(s.size):
        sr = s[r]
        for i in range(J + 2):
            ek[i] = math.exp(-sr * knots[i])
        for i in range(n_int):
            x = sr * width[i]
            # ratio of knot exponentials unless the left one has underflowed
            if ek[i] > 1e-200:
                ex = ek[i + 1] / ek[i]
            else:
                ex = math.exp(-x)
            _moments_scalar(x, ex, n_mom, mom[i])
        for j in range(J):
            w1 = width[j] * ek[j]
            w2 = width[j + 1] * ek[j + 1]
            sign = 1.0
            for m in range(m_max + 1):
                rise = 0.0
                fall = 0.0
                for i in range(m + 1):
                    rise += crise[m, i, j] * mom[j, i + 1]
                    fall += cfall[m, i, j] * (mom[j + 1, i] - mom[j + 1, i + 1])
                out[m, r, j] = sign * (w1 * rise + w2 * fall)
                sign = -sign


def _laplace_numpy(grid: KnotGrid, s: np.ndarray, orders: Sequence[int]) -> list[np.ndarray]:
    k = grid.knots
    lo, mid, hi = k[:-2], k[1:-1], k[2:]
    d1, d2 = mid - lo, hi - mid
    m_max = max(orders)
    x1 = s[:, None] * d1[None, :]
    x2 = s[:, None] * d2[None, :]
    e1 = _exp_moments(x1, max(m_max + 1, 2))
    e2 = _exp_moments(x2, max(m_max + 1, 2))
    w1 = d1 * np.exp(-s[:, None] * lo[None, :])
    w2 = d2 * np.exp(-s[:, None] * mid[None, :])
    result = []
    for m in orders:
        rise = np.zeros_like(x1)
        fall = np.zeros_like(x2)
        for i in range(m + 1):
            c = math.comb(m, i)
            rise += c * lo ** (m - i) * d1**i * e1[i + 1]
            fall += c * mid ** (m - i) * d2**i * (e2[i] - e2[i + 1])
        result.append((-1.0) ** m * (w1 * rise + w2 * fall))
    return result


def laplace_matrices(
    grid: KnotGrid, s, orders: Sequence[int] = (0,), use_numba: bool = True
) -> list[np.ndarray]:
    """``d^m/ds^m b_j^L(s)`` for every ``s`` and ``j``, one ``(N, J)`` array per order.

    No sign check on ``s``; the model evaluates extrapolated points where a
    path length may dip below zero.
    """
    s = np.atleast_1d(np.asarray(s, dtype=float)).ravel()
    if not use_numba:
        return _laplace_numpy(grid, s, orders)
    m_max = max(orders)
    out = np.empty((m_max + 1, s.size, grid.J))
    _laplace_kernel(s, grid.knots, m_max, out)
    return [out[m] for m in orders]


def b1_laplace(grid: KnotGrid, j: int, s, m: int = 0):
    """m-th ``s``-derivative of the Laplace transform of ``b_j``."""
    _check_index(grid, j)
    if int(m) != m or m < 0:
        raise InvalidArgument(f"derivative order must be a nonnegative integer, got {m}")
    s_arr = np.asarray(s, dtype=float)
    if np.any(s_arr < 0):
        raise InvalidArgument("Laplace argument must be nonnegative")
    vals = laplace_matrices(grid, s_arr, orders=(int(m),))[0][:, j - 1]
    return float(vals[0]) if s_arr.ndim == 0 else vals.reshape(s_arr.shape)


def output_matrix(grid: KnotGrid, s) -> np.ndarray:
    """Output basis-function matrix with entries ``b_j^L(s_n)``."""
    s = np.asarray(s, dtype=float).ravel()
    if np.any(s < 0):
        raise InvalidArgument("monochromatic projections must be nonnegative")
    return laplace_matrices(grid, s)[0]


@dataclass(frozen=True)
class MassAttenuationSpectrum:
    grid: KnotGrid
    coeffs: np.ndarray = field(repr=False)

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=float).ravel()
        if c.shape != (self.grid.J,):
            raise InvalidArgument(f"expected {self.grid.J} coefficients, got {c.size}")
        if np.any(c < 0) or not np.all(np.isfinite(c)):
            raise InvalidArgument("spectrum coefficients must be finite and nonnegative")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    def __call__(self, kappa) -> np.ndarray:
        return basis_matrix(self.grid, kappa) @ self.coeffs

    def laplace(self, s, m: int = 0) -> np.ndarray:
        return laplace_matrices(self.grid, s, orders=(m,))[0] @ self.coeffs

    @property
    def incident_energy(self) -> float:
        return float(self.grid.areas() @ self.coeffs)

    def scaled(self, factor: float) -> "MassAttenuationSpectrum":
        return MassAttenuationSpectrum(self.grid, self.coeffs * factor)


@dataclass(frozen=True)
class EnergySpectrumTable:
    """Incident energy density ``iota(eps)`` sampled on a photon-energy grid (keV)."""

    energies: np.ndarray = field(repr=False)
    densities: np.ndarray = field(repr=False)

    def __post_init__(self):
        e = np.array(self.energies, dtype=float).ravel()
        d = np.array(self.densities, dtype=float).ravel()
        if e.size < 2 or e.shape != d.shape:
            raise InvalidArgument("need at least two (energy, density) samples of equal length")
        if np.any(np.diff(e) <= 0):
            raise InvalidArgument("energies must be strictly increasing")
        if np.any(d < 0):
            raise InvalidArgument("densities must be nonnegative")
        for arr in (e, d):
            arr.setflags(write=False)
        object.__setattr__(self, "energies", e)
        object.__setattr__(self, "densities", d)

    def __call__(self, eps) -> np.ndarray:
        return np.interp(eps, self.energies, self.densities, left=0.0, right=0.0)

    def total(self) -> float:
        return float(np.trapezoid(self.densities, self.energies))

    def support(self) -> tuple[float, float]:
        nz = np.flatnonzero(self.densities > 0)
        if nz.size == 0:
            return float(self.energies[0]), float(self.energies[0])
        lo = self.energies[max(nz[0] - 1, 0)]
        hi = self.energies[min(nz[-1] + 1, self.energies.size - 1)]
        return float(lo), float(hi)

    def scaled(self, factor: float) -> "EnergySpectrumTable":
        return EnergySpectrumTable(self.energies, self.densities * factor)


class _Segment:
    """One K-edge-free piece of ``kappa(eps)``, interpolated in log-log space."""

    def __init__(self, energies: np.ndarray, kappas: np.ndarray):
        if energies.size < 2:
            raise InvalidCurve("each segment needs at least two samples")
        if np.any(np.diff(energies) <= 0):
            raise InvalidCurve("segment energies must be strictly increasing")
        if np.any(kappas <= 0) or np.any(np.diff(kappas) >= 0):
            raise InvalidCurve("kappa must be positive and strictly decreasing within a segment")
        self.energies = energies
        self.kappas = kappas
        le, lk = np.log(energies), np.log(kappas)
        self._fwd = PchipInterpolator(le, lk, extrapolate=False)
        self._inv = PchipInterpolator(lk[::-1], le[::-1], extrapolate=False)
        self._dinv = self._inv.derivative()

    @property
    def e_lo(self) -> float:
        return float(self.energies[0])

    @property
    def e_hi(self) -> float:
        return float(self.energies[-1])

    def kappa(self, eps) -> np.ndarray:
        return np.exp(self._fwd(np.log(eps)))

    def inverse(self, kappa) -> tuple[np.ndarray, np.ndarray]:
        """``eps(kappa)`` and ``|d eps / d kappa|``; nan outside the segment range."""
        lk = np.log(kappa)
        le = self._inv(lk)
        eps = np.exp(le)
        return eps, np.abs(self._dinv(lk)) * eps / kappa


class MassAttenuationCurve:
    """Piecewise strictly decreasing ``kappa(eps)`` with K-edge breakpoints.

    Parameters
    ----------
    segments : sequence of (energies, kappas)
        Dense samples for each contiguous energy interval.  Consecutive
        segments must share their boundary energy (the K-edge).
    """

    def __init__(self, segments: Sequence[tuple[Sequence[float], Sequence[float]]]):
        if len(segments) == 0:
            raise InvalidCurve("curve needs at least one segment")
        self.segments = [
            _Segment(np.asarray(e, dtype=float).ravel(), np.asarray(k, dtype=float).ravel())
            for e, k in segments
        ]
        for left, right in zip(self.segments, self.segments[1:]):
            if not math.isclose(left.e_hi, right.e_lo, rel_tol=1e-12, abs_tol=1e-12):
                raise InvalidCurve("segment energy intervals must be contiguous")

    @property
    def breakpoints(self) -> list[float]:
        return [s.e_lo for s in self.segments[1:]]

    @property
    def energy_range(self) -> tuple[float, float]:
        return self.segments[0].e_lo, self.segments[-1].e_hi

    def __call__(self, eps) -> np.ndarray:
        eps = np.asarray(eps, dtype=float)
        out = np.full(eps.shape, np.nan)
        for i, seg in enumerate(self.segments):
            last = i == len(self.segments) - 1
            sel = (eps >= seg.e_lo) & ((eps <= seg.e_hi) if last else (eps < seg.e_hi))
            out[sel] = seg.kappa(eps[sel])
        return out

    def kappa_range(self, e_lo: float | None = None, e_hi: float | None = None) -> tuple[float, float]:
        """Extremes of kappa over ``[e_lo, e_hi]`` intersected with the curve."""
        lo_all, hi_all = self.energy_range
        e_lo = lo_all if e_lo is None else max(e_lo, lo_all)
        e_hi = hi_all if e_hi is None else min(e_hi, hi_all)
        lo, hi = np.inf, -np.inf
        for seg in self.segments:
            a, b = max(seg.e_lo, e_lo), min(seg.e_hi, e_hi)
            if a >= b:
                continue
            ka, kb = seg.kappa(np.array([a, b]))
            lo, hi = min(lo, kb), max(hi, ka)
        return float(lo), float(hi)

    def kappa_breakpoints(self) -> np.ndarray:
        """Sorted kappa values at segment ends, where the density may jump."""
        ends = [seg.kappa(np.array([seg.e_lo, seg.e_hi])) for seg in self.segments]
        return np.unique(np.concatenate(ends))

    def scaled(self, factor: float) -> "MassAttenuationCurve":
        """Same curve with every kappa multiplied by ``factor``."""
        return MassAttenuationCurve([(s.energies, s.kappas * factor) for s in self.segments])

    def mass_attenuation_density(self, table: EnergySpectrumTable, kappa) -> np.ndarray:
        """``sum_m 1_{(u_m, v_m)}(kappa) iota(eps_m(kappa)) |eps_m'(kappa)|``."""
        kappa = np.asarray(kappa, dtype=float)
        total = np.zeros(kappa.shape)
        for seg in self.segments:
            u, v = seg.kappas[-1], seg.kappas[0]
            inside = (kappa > u) & (kappa < v)
            if not np.any(inside):
                continue
            eps, jac = seg.inverse(kappa[inside])
            total[inside] += table(eps) * jac
        return total


def construct_spectrum(
    curve: MassAttenuationCurve,
    table: EnergySpectrumTable,
    grid: KnotGrid,
    samples_per_interval: int = 20,
) -> MassAttenuationSpectrum:
    """Project the change-of-variables spectrum onto the B1 basis.

    The density ``v(kappa)`` is sampled at the midpoints of
    ``samples_per_interval`` sub-cells per knot interval (further split at
    segment ends) and fitted by nonnegative least squares weighted with the
    cell widths, which approximates the L2(kappa) projection, subject to
    conservation of the incident energy.
    """
    e_lo, e_hi = table.support()
    k_lo, k_hi = curve.kappa_range(e_lo, e_hi)
    knots = grid.knots
    if table.total() > 0 and (k_lo < knots[0] * (1 - 1e-12) or k_hi > knots[-1] * (1 + 1e-12)):
        raise CoverageError(
            f"curve spans kappa in [{k_lo:.4g}, {k_hi:.4g}] but grid covers "
            f"[{knots[0]:.4g}, {knots[-1]:.4g}]"
        )
    # sub-cells never straddle a segment end, where the density can jump
    cuts = curve.kappa_breakpoints()
    frac = np.arange(samples_per_interval + 1) / samples_per_interval
    mids, weights = [], []
    for a, b in zip(knots[:-1], knots[1:]):
        edges = a + (b - a) * frac
        inner = cuts[(cuts > a) & (cuts < b)]
        if inner.size:
            edges = np.union1d(edges, inner)
        mids.append(0.5 * (edges[1:] + edges[:-1]))
        weights.append(np.diff(edges))
    kappa = np.concatenate(mids)
    weights = np.concatenate(weights)
    density = curve.mass_attenuation_density(table, kappa)
    if not np.any(density > 0):
        return MassAttenuationSpectrum(grid, np.zeros(grid.J))
    sw = np.sqrt(weights)
    B = basis_matrix(grid, kappa) * sw[:, None]
    rhs = density * sw
    # a heavily weighted extra row pins the incident energy b^L(0) I to the
    # quadrature of v; plain L2 fits leak mass wherever v jumps
    mass = float(weights @ density)
    areas = grid.areas()
    pin = _MASS_PIN * np.linalg.norm(B) / np.linalg.norm(areas)
    B = np.vstack([B, pin * areas])
    rhs = np.append(rhs, pin * mass)
    coeffs, _ = nnls(B, rhs, maxiter=50 * grid.J)
    return MassAttenuationSpectrum(grid, coeffs)


def shift_equivalent(spec: MassAttenuationSpectrum, alpha, direction: str = "left"):
    """Equivalent (spectrum, density) pair under the knot-shift ambiguity.

    A left shift needs ``I_1 = 0`` and scales both blocks by ``q``; a right
    shift needs ``I_J = 0`` and scales both by ``1/q``.
    """
    c = spec.coeffs
    q = spec.grid.q
    alpha = np.asarray(alpha, dtype=float)
    if direction == "left":
        if c[0] != 0:
            raise AmbiguityShiftUnavailable("left shift needs a leading zero coefficient")
        return MassAttenuationSpectrum(spec.grid, q * np.append(c[1:], 0.0)), q * alpha
    if direction == "right":
        if c[-1] != 0:
            raise AmbiguityShiftUnavailable("right shift needs a trailing zero coefficient")
        return MassAttenuationSpectrum(spec.grid, np.insert(c[:-1], 0, 0.0) / q), alpha / q
    raise InvalidArgument(f"direction must be 'left' or 'right', got {direction!r}")


def condition_diagnostic(A, tol: float = 1e-10) -> tuple[np.ndarray, int]:
    """Singular values (descending) and numerical rank at ``tol * sigma_max``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.size == 0:
        raise InvalidArgument("empty matrix")
    if not np.all(np.isfinite(A)):
        raise InvalidArgument("matrix must be finite")
    sv = np.linalg.svd(A, compute_uv=False)
    rank = int(np.sum(sv > tol * sv[0])) if sv[0] > 0 else 0
    return sv, rank
