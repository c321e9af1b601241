"""Polychromatic measurement model, negative log-likelihoods and convexity certificates.

The noiseless output for measurement ``n`` is
``I_out[n] = sum_j I_j * b_j^L((Phi alpha)[n])``: the Laplace transform of the
mass-attenuation spectrum evaluated at the monochromatic projection.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateSpectrum, InvalidArgument, InvalidMeasurement
from .projector import SystemMatrix
from .spectrum import KnotGrid, MassAttenuationSpectrum, laplace_matrices


class NoiseModel(str, enum.Enum):
    LOGNORMAL = "lognormal"
    POISSON = "poisson"

    @classmethod
    def parse(cls, value) -> "NoiseModel":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise InvalidArgument(f"unknown noise model {value!r}") from None


def _coeffs(I, J: int) -> np.ndarray:
    if isinstance(I, MassAttenuationSpectrum):
        I = I.coeffs
    c = np.asarray(I, dtype=float).ravel()
    if c.shape != (J,):
        raise InvalidArgument(f"expected {J} spectrum coefficients, got {c.size}")
    if np.any(c < 0) or not np.all(np.isfinite(c)):
        raise InvalidArgument("spectrum coefficients must be finite and nonnegative")
    if not np.any(c > 0):
        raise DegenerateSpectrum("spectrum is identically zero")
    return c


def _measurements(E, N: int) -> np.ndarray:
    E = np.asarray(E, dtype=float).ravel()
    if E.size != N:
        raise InvalidArgument(f"expected {N} measurements, got {E.size}")
    if not np.all(np.isfinite(E)) or np.any(E <= 0):
        raise InvalidMeasurement("measurements must be finite and strictly positive")
    return E


class ForwardModel:
    """Output matrices ``A = b^L(Phi alpha)`` and ``dA/ds`` cached for the last ``alpha``.

    The cache holds a private copy of ``alpha`` and is rebuilt whenever a call
    passes a different array (compared by value).  The model object is not
    meant to be shared between concurrent writers.
    """

    def __init__(self, system: SystemMatrix, grid: KnotGrid):
        self.system = system
        self.grid = grid
        self._alpha = None
        self._s = None
        self._A = None
        self._Adot = None
        self.evaluations = 0

    @property
    def n_measurements(self) -> int:
        return self.system.shape[0]

    def _alpha_vec(self, alpha) -> np.ndarray:
        a = np.asarray(alpha, dtype=float).ravel()
        if a.size != self.system.shape[1]:
            raise InvalidArgument(
                f"image has {a.size} pixels, operator expects {self.system.shape[1]}"
            )
        if not np.all(np.isfinite(a)):
            raise InvalidArgument("density map must be finite")
        return a

    def _refresh(self, alpha, need_dot: bool) -> None:
        a = self._alpha_vec(alpha)
        fresh = self._alpha is not None and np.array_equal(a, self._alpha)
        if fresh and (self._Adot is not None or not need_dot):
            return
        s = self._s if fresh else self.system.matrix @ a
        if need_dot:
            self._A, self._Adot = laplace_matrices(self.grid, s, orders=(0, 1))
        else:
            (self._A,) = laplace_matrices(self.grid, s, orders=(0,))
            self._Adot = None
        self._s = s
        self._alpha = a.copy()
        self.evaluations += 1

    def matrices(self, alpha) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(Phi alpha, A, dA/ds)`` at ``alpha``, from cache when possible."""
        self._refresh(alpha, True)
        return self._s, self._A, self._Adot

    def output_basis(self, alpha) -> np.ndarray:
        """``A = b^L(Phi alpha)`` alone; skips the derivative when not cached."""
        self._refresh(alpha, False)
        return self._A

    def forward(self, alpha, I) -> tuple[np.ndarray, float]:
        """``(I_out, I_in)`` for density ``alpha`` and spectrum ``I``."""
        c = _coeffs(I, self.grid.J)
        return self.output_basis(alpha) @ c, float(self.grid.areas() @ c)

    def _parts(self, E, alpha, I, need_dot: bool = False):
        c = _coeffs(I, self.grid.J)
        E = _measurements(E, self.n_measurements)
        self._refresh(alpha, need_dot)
        out = self._A @ c
        return E, c, self._A, self._Adot, out

    def nll(self, E, alpha, I, noise) -> float:
        E, c, A, _, out = self._parts(E, alpha, I)
        return nll_from_output(E, out, noise)

    def nll_and_grad_alpha(self, E, alpha, I, noise) -> tuple[float, np.ndarray]:
        E, c, A, Adot, out = self._parts(E, alpha, I, need_dot=True)
        val = nll_from_output(E, out, noise)
        if not np.isfinite(val):
            return val, np.full(self.system.shape[1], np.nan)
        xidot = Adot @ c
        w = xidot * _output_sensitivity(E, out, noise)
        return val, self.system.matrix_t @ w

    def grad_alpha(self, E, alpha, I, noise) -> np.ndarray:
        return self.nll_and_grad_alpha(E, alpha, I, noise)[1]

    def grad_I(self, E, alpha, I, noise) -> np.ndarray:
        E, c, A, _, out = self._parts(E, alpha, I)
        return A.T @ _output_sensitivity(E, out, noise)

    def hessian_I(self, E, alpha, I, noise) -> np.ndarray:
        E, c, A, _, out = self._parts(E, alpha, I)
        noise = NoiseModel.parse(noise)
        if noise is NoiseModel.LOGNORMAL:
            d = (1.0 - np.log(out) + np.log(E)) / out**2
        else:
            d = E / out**2
        return A.T @ (A * d[:, None])

    def spectrum_problem(self, E, alpha, noise):
        """Objective and gradient in ``I`` with ``alpha`` frozen, as plain closures."""
        E = _measurements(E, self.n_measurements)
        noise = NoiseModel.parse(noise)
        A = self.output_basis(alpha).copy()

        def f(c):
            out = A @ c
            if np.any(out <= 0):
                return np.inf
            return nll_from_output(E, out, noise)

        def g(c):
            out = A @ c
            return A.T @ _output_sensitivity(E, out, noise)

        return f, g, A


def nll_from_output(E: np.ndarray, out: np.ndarray, noise) -> float:
    noise = NoiseModel.parse(noise)
    if np.any(out <= 0) or not np.all(np.isfinite(out)):
        return math.inf
    if noise is NoiseModel.LOGNORMAL:
        r = np.log(E) - np.log(out)
        return 0.5 * float(r @ r)
    # generalized KL divergence, summed termwise so each term is >= 0
    return float(np.sum(out - E - E * (np.log(out) - np.log(E))))


def _output_sensitivity(E: np.ndarray, out: np.ndarray, noise) -> np.ndarray:
    """Derivative of the NLL with respect to each output ``I_out[n]``."""
    noise = NoiseModel.parse(noise)
    if noise is NoiseModel.LOGNORMAL:
        return (np.log(out) - np.log(E)) / out
    return 1.0 - E / out


def convexity_bounds(q: float, j0: int) -> tuple[float, float]:
    """Residual bounds ``(U, V)`` delimiting the certified convexity regions in ``alpha``."""
    if not q > 1:
        raise InvalidArgument(f"common ratio must exceed 1, got {q}")
    if int(j0) != j0 or j0 < 1:
        raise InvalidArgument(f"j0 must be a positive integer, got {j0}")
    t = q ** int(j0)
    U = 2.0 * t / (t - 1.0) ** 2
    V = 2.0 * t / (t * t + 1.0)
    return U, V


def default_j0(J: int) -> int:
    return (J + 2) // 2


def _check_j0(J: int, j0: int | None) -> int:
    lo = default_j0(J)
    if j0 is None:
        return lo
    if int(j0) != j0 or not lo <= j0 <= J:
        raise InvalidArgument(f"j0 must lie in [{lo}, {J}], got {j0}")
    return int(j0)


def shape_slack(I, j0: int) -> np.ndarray:
    """Slacks of the spectrum shape constraints; all ``>= 0`` means the shape holds.

    Constraints (1-based): ``I_1 <= ... <= I_{J+1-j0}``,
    ``I_{j0} >= ... >= I_J`` and ``I_j >= I_{J+1-j0}`` on the middle block.
    """
    c = np.asarray(I, dtype=float).ravel()
    J = c.size
    j0 = _check_j0(J, j0)
    lo = J + 1 - j0  # 1-based end of the rising block
    rising = np.diff(c[:lo])
    falling = -np.diff(c[j0 - 1 :])
    middle = c[lo - 1 : j0] - c[lo - 1]
    return np.concatenate([rising, falling, middle])


def in_shape_set(I, j0: int | None = None) -> bool:
    c = np.asarray(I, dtype=float).ravel()
    j0 = _check_j0(c.size, j0)
    return bool(np.all(c >= 0) and np.all(shape_slack(c, j0) >= 0))


@dataclass(frozen=True)
class ConvexityCertificate:
    U: float
    V: float
    j0: int
    noise: NoiseModel
    in_region: bool
    worst_margin: float
    residual_ok: bool
    shape_ok: bool
    alpha_ok: bool
    residual_margin: float
    shape_margin: float
    alpha_margin: float


def region_check(
    model: ForwardModel, E, alpha, I, noise, j0: int | None = None
) -> ConvexityCertificate:
    """Membership of ``(alpha, I)`` in the biconvexity region of the chosen NLL.

    Margins are normalized slacks: residual slacks in log units (lognormal) or
    in units of ``I_out/E`` (Poisson), shape slacks divided by ``max(I)`` and
    density slack divided by ``max|alpha|``.  Negative means violated.
    """
    noise = NoiseModel.parse(noise)
    c = _coeffs(I, model.grid.J)
    j0 = _check_j0(model.grid.J, j0)
    E = _measurements(E, model.n_measurements)
    out, _ = model.forward(alpha, c)
    U, V = convexity_bounds(model.grid.q, j0)
    if noise is NoiseModel.LOGNORMAL:
        d = np.log(E) - np.log(out)
        res = float(min(np.min(U - d), np.min(d + 1.0)))
    else:
        res = float(np.min(out / E - (1.0 - V)))
    sl = shape_slack(c, j0)
    shp = float(np.min(sl) / np.max(c)) if sl.size else 0.0
    a = np.asarray(alpha, dtype=float).ravel()
    scale = float(np.max(np.abs(a))) or 1.0
    alp = float(np.min(a) / scale)
    ok_r, ok_s, ok_a = res >= 0, shp >= 0, alp >= 0
    return ConvexityCertificate(
        U=U,
        V=V,
        j0=j0,
        noise=noise,
        in_region=bool(ok_r and ok_s and ok_a),
        worst_margin=min(res, shp, alp),
        residual_ok=bool(ok_r),
        shape_ok=bool(ok_s),
        alpha_ok=bool(ok_a),
        residual_margin=res,
        shape_margin=shp,
        alpha_margin=alp,
    )


def residuals(model: ForwardModel, E, alpha, I) -> np.ndarray:
    """Per-measurement log residual ``ln E - ln I_out``."""
    E = _measurements(E, model.n_measurements)
    out, _ = model.forward(alpha, I)
    return np.log(E) - np.log(out)
