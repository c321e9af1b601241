"""Proximal-gradient drivers for the density map and the blind block-coordinate scheme.

``npg_bfgs`` alternates one accelerated proximal-gradient step on the density
map with a bound-constrained quasi-Newton solve for the spectrum coefficients.
``pg_bfgs`` drops the momentum term, ``npg_known_spectrum`` keeps the spectrum
fixed and ``npg_quadratic`` runs the same machinery on a least-squares fit of
linearized data.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Protocol

import numpy as np
from scipy.optimize import minimize

from .errors import (
    DegenerateSpectrum,
    InvalidArgument,
    InvalidState,
    PolyCTError,
    StepSizeUnderflow,
)
from .model import ForwardModel, NoiseModel, default_j0
from .projector import SystemMatrix, fbp
from .prox import ProxInfo, ProxSettings, Regularizer, apply_prox
from .spectrum import KnotGrid

log = logging.getLogger(__name__)

MAX_BACKTRACKS = 60
BETA_FLOOR = 1e-18


@dataclass(frozen=True)
class OuterConfig:
    """Tuning constants of the outer iteration.

    ``eps``, ``eta_alpha``, ``eta_I`` and ``n_sub`` control the outer and inner
    stopping rules; ``adapt_n`` and ``adapt_xi`` the step-size adaptation.
    """

    u: float = 1e-3
    reg: Regularizer = field(default_factory=Regularizer)
    noise: NoiseModel = NoiseModel.POISSON
    eps: float = 1e-6
    eta_alpha: float = 1e-3
    eta_I: float = 1e-2
    n_sub: int = 20
    max_outer: int = 4000
    adapt_n: int = 4
    adapt_xi: float = 0.5
    j0: int | None = None
    rho: float = 1.0
    bfgs_memory: int = 10

    def __post_init__(self):
        object.__setattr__(self, "noise", NoiseModel.parse(self.noise))
        if not isinstance(self.reg, Regularizer):
            raise InvalidArgument("reg must be a Regularizer")
        for name in ("u", "eps", "rho"):
            if not getattr(self, name) > 0:
                raise InvalidArgument(f"{name} must be positive")
        for name in ("eta_alpha", "eta_I", "adapt_xi"):
            if not 0 < getattr(self, name) < 1:
                raise InvalidArgument(f"{name} must lie in (0, 1)")
        for name in ("n_sub", "max_outer", "adapt_n", "bfgs_memory"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise InvalidArgument(f"{name} must be a positive integer")

    def regularizer(self) -> Regularizer:
        return replace(self.reg, u=self.u)


@dataclass
class NpgState:
    alpha: np.ndarray
    alpha_prev: np.ndarray
    theta: float
    beta: float
    streak: int = 0
    objective: float = math.inf
    prox_warm: ProxInfo | None = None

    def __post_init__(self):
        if not self.beta > 0:
            raise InvalidState(f"step size must be positive, got {self.beta}")
        if self.theta < 0:
            raise InvalidState("momentum parameter must be nonnegative")


@dataclass
class StepRecord:
    """What one proximal-gradient step did, for traces and audits."""

    beta: float
    nll: float
    objective: float
    backtracks: int
    restarted: bool
    safeguarded: bool
    prox_iters: int
    majorization_gap: float


TRACE_FIELDS = (
    "objective",
    "nll",
    "beta",
    "delta",
    "delta_L",
    "rse",
    "restarts",
    "backtracks",
    "prox_iters",
    "bfgs_iters",
    "majorization_gap",
)


@dataclass
class ReconResult:
    alpha_hat: np.ndarray
    I_hat: np.ndarray | None
    grid: KnotGrid | None
    traces: dict = field(default_factory=lambda: {k: [] for k in TRACE_FIELDS})
    termination: str = "max-iters"
    message: str = ""
    iterations: int = 0
    method: str = ""

    def trace_array(self, name: str) -> np.ndarray:
        return np.asarray(self.traces[name], dtype=float)


class SmoothTerm(Protocol):
    def value(self, alpha: np.ndarray) -> float: ...

    def value_and_grad(self, alpha: np.ndarray) -> tuple[float, np.ndarray]: ...


class PolyNLL:
    """NLL of the polychromatic model in ``alpha`` for the current spectrum ``I``."""

    def __init__(self, model: ForwardModel, E: np.ndarray, noise: NoiseModel, I: np.ndarray):
        self.model = model
        self.E = np.asarray(E, dtype=float).ravel()
        self.noise = NoiseModel.parse(noise)
        self.I = np.asarray(I, dtype=float)

    def value(self, alpha):
        return self.model.nll(self.E, alpha, self.I, self.noise)

    def value_and_grad(self, alpha):
        return self.model.nll_and_grad_alpha(self.E, alpha, self.I, self.noise)


class QuadraticNLL:
    """``0.5 ||y - Phi alpha||^2``."""

    def __init__(self, system: SystemMatrix, y: np.ndarray):
        self.system = system
        self.y = np.asarray(y, dtype=float).ravel()

    def value(self, alpha):
        r = self.system.matrix @ alpha - self.y
        return 0.5 * float(r @ r)

    def value_and_grad(self, alpha):
        r = self.system.matrix @ alpha - self.y
        return 0.5 * float(r @ r), self.system.matrix_t @ r


def theta_update(theta: float) -> float:
    return 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * theta * theta))


def bb_init(alpha0, grad_fn: Callable[[np.ndarray], np.ndarray]) -> float:
    """Barzilai-Borwein step ``<da, dg>/<dg, dg>`` from a unit probe along ``-g``."""
    a0 = np.asarray(alpha0, dtype=float)
    g0 = np.asarray(grad_fn(a0), dtype=float)
    if not np.all(np.isfinite(g0)):
        raise InvalidState("gradient is not finite at the initial point")
    gn = float(np.linalg.norm(g0))
    if gn == 0.0:
        return 1.0
    da = -g0 / gn
    g1 = np.asarray(grad_fn(a0 + da), dtype=float)
    if not np.all(np.isfinite(g1)):
        raise InvalidState("gradient is not finite at the probe point")
    dg = g1 - g0
    num = float(da.ravel() @ dg.ravel())
    den = float(dg.ravel() @ dg.ravel())
    if not (num > 0 and den > 0):
        return 1.0
    return num / den


def npg_step(
    state: NpgState,
    smooth: SmoothTerm,
    reg: Regularizer,
    settings: ProxSettings,
    config: OuterConfig,
    accelerate: bool = True,
) -> tuple[NpgState, StepRecord]:
    """One (N)PG step with majorization backtracking and function restart.

    ``state.objective`` must hold the objective at ``state.alpha`` for the
    current smooth term; the returned state carries the objective at the new
    iterate.
    """
    xi = config.adapt_xi
    beta = state.beta
    streak = state.streak
    if streak >= config.adapt_n:
        beta = beta / xi
        streak = 0
    theta = state.theta
    theta_new = theta_update(theta) if accelerate else theta
    weight = (theta - 1.0) / theta_new if accelerate else 0.0

    restarted = False
    reduced = False
    total_bt = 0
    warm = state.prox_warm
    while True:
        if weight != 0.0:
            abar = state.alpha + weight * (state.alpha - state.alpha_prev)
        else:
            abar = state.alpha
        Lbar, g = smooth.value_and_grad(abar)
        if not np.isfinite(Lbar) or not np.all(np.isfinite(g)):
            if weight != 0.0:
                # extrapolated point left the domain: restart from alpha
                weight, theta_new, restarted = 0.0, 1.0, True
                continue
            raise InvalidState("objective or gradient not finite at the current iterate")
        for bt in range(MAX_BACKTRACKS + 1):
            x, info = apply_prox(abar - beta * g, beta * config.u, reg, settings, warm)
            Lx = smooth.value(x)
            d = (x - abar).ravel()
            bound = Lbar + float(d @ g.ravel()) + float(d @ d) / (2.0 * beta)
            if np.isfinite(Lx) and Lx <= bound:
                break
            beta *= xi
            reduced = True
            total_bt += 1
            if beta < BETA_FLOOR:
                raise StepSizeUnderflow(f"step size fell below {BETA_FLOOR:g}")
        else:
            raise StepSizeUnderflow(f"no admissible step after {MAX_BACKTRACKS} reductions")
        F = Lx + config.u * reg.value(x)
        if F > state.objective and weight != 0.0:
            # function restart: drop the momentum and redo the step from alpha
            weight, theta_new, restarted = 0.0, 1.0, True
            continue
        break

    safeguarded = False
    if F > state.objective:
        # an inexact prox can overshoot the majorized decrease; polish it first
        polished = replace(settings, max_iters=settings.max_iters * 20, tol=settings.tol * 1e-3)
        x2, info2 = apply_prox(abar - beta * g, beta * config.u, reg, polished, info)
        L2 = smooth.value(x2)
        d2 = (x2 - abar).ravel()
        bound2 = Lbar + float(d2 @ g.ravel()) + float(d2 @ d2) / (2.0 * beta)
        F2 = L2 + config.u * reg.value(x2)
        if np.isfinite(L2) and L2 <= bound2 and F2 <= state.objective:
            x, info, Lx, bound, F = x2, info2, L2, bound2, F2
        else:
            x, Lx, F = state.alpha.copy(), smooth.value(state.alpha), state.objective
            bound = Lx
        safeguarded = True

    streak = 0 if reduced else streak + 1
    new = NpgState(
        alpha=x,
        alpha_prev=state.alpha,
        theta=theta_new,
        beta=beta,
        streak=streak,
        objective=F,
        prox_warm=info,
    )
    rec = StepRecord(
        beta=beta,
        nll=Lx,
        objective=F,
        backtracks=total_bt,
        restarted=restarted,
        safeguarded=safeguarded,
        prox_iters=info.iterations,
        majorization_gap=float(bound - Lx),
    )
    return new, rec


def lbfgsb_minimize(
    f: Callable[[np.ndarray], float],
    grad: Callable[[np.ndarray], np.ndarray],
    x0,
    tol: float,
    max_iters: int = 20,
    memory: int = 10,
) -> tuple[np.ndarray, float, int]:
    """Minimize ``f`` over the nonnegative orthant, warm-started at ``x0``.

    Stops once consecutive objective values differ by less than ``tol`` or
    after ``max_iters`` quasi-Newton iterations.  Never returns a point worse
    than ``x0``.  Returns ``(x, f(x), iterations)``.
    """
    x0 = np.maximum(np.asarray(x0, dtype=float), 0.0)
    f0 = float(f(x0))
    g0 = np.asarray(grad(x0), dtype=float)
    if not np.isfinite(f0) or not np.all(np.isfinite(g0)):
        raise InvalidState("objective or gradient not finite at the starting point")
    last = [f0]

    def fun(x):
        v = float(f(x))
        if not np.isfinite(v):
            return 1e300, np.zeros_like(x)
        gv = np.asarray(grad(x), dtype=float)
        if not np.all(np.isfinite(gv)):
            raise InvalidState("gradient is not finite")
        return v, gv

    def stop(intermediate_result):
        v = float(intermediate_result.fun)
        if abs(last[-1] - v) < tol:
            raise StopIteration
        last.append(v)

    res = minimize(
        fun,
        x0,
        jac=True,
        method="L-BFGS-B",
        bounds=[(0.0, None)] * x0.size,
        callback=stop,
        options=dict(maxiter=int(max_iters), maxcor=int(memory), ftol=0.0, gtol=0.0),
    )
    x = np.maximum(res.x, 0.0)
    fx = float(f(x))
    if not fx <= f0:
        return x0, f0, int(res.nit)
    return x, fx, int(res.nit)


def _normalized(E) -> np.ndarray:
    E = np.asarray(E, dtype=float).ravel()
    if not np.all(np.isfinite(E)) or np.any(E <= 0):
        raise InvalidArgument("measurements must be finite and strictly positive")
    return E / E.max()


def fbp_init(E, system: SystemMatrix) -> np.ndarray:
    """Density-map start ``FBP(-ln E)`` on max-normalized measurements."""
    return fbp(-np.log(_normalized(E)), system.geometry).ravel()


def spike_spectrum(E, grid: KnotGrid) -> np.ndarray:
    """Centered single-hat spectrum whose incident energy equals ``max E``."""
    c = grid.center_index
    I0 = np.zeros(grid.J)
    I0[c - 1] = np.max(E) / grid.areas()[c - 1]
    return I0


def _rse(a, b) -> float:
    from .pipeline import rse

    try:
        return rse(a, b)
    except PolyCTError:
        return math.nan


def _run(
    smooth: SmoothTerm,
    alpha0: np.ndarray,
    config: OuterConfig,
    accelerate: bool,
    spectrum_step: Callable | None,
    truth: np.ndarray | None,
    callback: Callable | None,
    method: str,
    I0: np.ndarray | None,
    grid: KnotGrid | None,
) -> ReconResult:
    reg = config.regularizer()
    n = int(round(math.sqrt(alpha0.size)))
    result = ReconResult(alpha_hat=alpha0.reshape(n, n), I_hat=I0, grid=grid, method=method)
    tr = result.traces
    try:
        beta0 = bb_init(alpha0, lambda a: smooth.value_and_grad(a)[1])
        state = NpgState(alpha=alpha0.copy(), alpha_prev=alpha0.copy(), theta=0.0, beta=beta0)
        L_curr = smooth.value(alpha0)
        state.objective = L_curr + config.u * reg.value(alpha0)
        delta_prev = 0.0
        for i in range(1, config.max_outer + 1):
            tol = max(config.eta_alpha * delta_prev, 1e-300)
            settings = ProxSettings(rho=config.rho, tol=tol, max_iters=config.n_sub)
            state, rec = npg_step(state, smooth, reg, settings, config, accelerate)
            delta = float(np.linalg.norm(state.alpha - state.alpha_prev))
            delta_L = abs(rec.nll - L_curr)
            nll, bfgs_iters = rec.nll, 0
            if spectrum_step is not None:
                nll, bfgs_iters = spectrum_step(state.alpha, delta_L if i > 1 else None, rec.nll)
                state.objective = nll + config.u * reg.value(state.alpha)
            L_curr = nll
            tr["objective"].append(state.objective)
            tr["nll"].append(nll)
            tr["beta"].append(rec.beta)
            tr["delta"].append(delta)
            tr["delta_L"].append(delta_L)
            tr["rse"].append(_rse(state.alpha, truth) if truth is not None else math.nan)
            tr["restarts"].append(int(rec.restarted))
            tr["backtracks"].append(rec.backtracks)
            tr["prox_iters"].append(rec.prox_iters)
            tr["bfgs_iters"].append(bfgs_iters)
            tr["majorization_gap"].append(rec.majorization_gap)
            result.iterations = i
            result.alpha_hat = state.alpha.reshape(n, n)
            if callback is not None:
                callback(i, state.alpha, getattr(smooth, "I", None))
            delta_prev = delta
            if delta < config.eps * float(np.linalg.norm(state.alpha)):
                result.termination = "converged"
                break
        else:
            result.termination = "max-iters"
    except (PolyCTError, FloatingPointError) as exc:
        result.termination = "error"
        result.message = f"{type(exc).__name__}: {exc}"
        log.warning("%s stopped at iteration %d: %s", method, result.iterations, result.message)
    if isinstance(smooth, PolyNLL) and spectrum_step is not None:
        result.I_hat = smooth.I.copy()
    return result


def _blind(
    E,
    system: SystemMatrix,
    grid: KnotGrid,
    config: OuterConfig,
    accelerate: bool,
    alpha0=None,
    I0=None,
    truth=None,
    callback=None,
) -> ReconResult:
    E = _normalized(E)
    model = ForwardModel(system, grid)
    a0 = fbp_init(E, system) if alpha0 is None else np.asarray(alpha0, dtype=float).ravel().copy()
    I_init = spike_spectrum(E, grid) if I0 is None else np.asarray(I0, dtype=float).copy()
    if not np.any(I_init > 0):
        raise DegenerateSpectrum("initial spectrum is identically zero")
    smooth = PolyNLL(model, E, config.noise, I_init)

    def spectrum_step(alpha, delta_L, nll_now):
        f, g, _ = model.spectrum_problem(E, alpha, config.noise)
        tol = config.eta_I * delta_L if delta_L is not None else 1e-10 * abs(nll_now)
        I_new, fx, it = lbfgsb_minimize(
            f, g, smooth.I, tol, max_iters=config.n_sub, memory=config.bfgs_memory
        )
        if not np.any(I_new > 0):
            raise DegenerateSpectrum("spectrum estimate collapsed to zero")
        smooth.I = I_new
        return fx, it

    method = "npg-bfgs" if accelerate else "pg-bfgs"
    return _run(smooth, a0, config, accelerate, spectrum_step, truth, callback, method, I_init, grid)


def npg_bfgs(E, system: SystemMatrix, grid: KnotGrid, config: OuterConfig, **kw) -> ReconResult:
    """Blind reconstruction with accelerated density steps."""
    return _blind(E, system, grid, config, True, **kw)


def pg_bfgs(E, system: SystemMatrix, grid: KnotGrid, config: OuterConfig, **kw) -> ReconResult:
    """Blind reconstruction with plain proximal-gradient density steps (monotone)."""
    return _blind(E, system, grid, config, False, **kw)


def npg_known_spectrum(
    E,
    system: SystemMatrix,
    grid: KnotGrid,
    I,
    config: OuterConfig,
    alpha0=None,
    truth=None,
    callback=None,
) -> ReconResult:
    """Density-map reconstruction with the spectrum held fixed at ``I``.

    ``E`` and ``I`` must be on the same intensity scale; no normalization is
    applied.  The default start is FBP of the linearized measurements.
    """
    from .pipeline import linearize
    from .spectrum import MassAttenuationSpectrum

    E = np.asarray(E, dtype=float).ravel()
    I = np.asarray(I, dtype=float)
    spec = MassAttenuationSpectrum(grid, I)
    if alpha0 is None:
        alpha0 = fbp(linearize(E, spec), system.geometry).ravel()
    model = ForwardModel(system, grid)
    smooth = PolyNLL(model, E, config.noise, I)
    res = _run(
        smooth, np.asarray(alpha0, float).ravel().copy(), config, True, None, truth,
        callback, "npg", I, grid,
    )
    res.I_hat = I.copy()
    return res


def npg_quadratic(
    y,
    system: SystemMatrix,
    config: OuterConfig,
    alpha0=None,
    truth=None,
    callback=None,
) -> ReconResult:
    """Regularized least squares ``0.5||y - Phi alpha||^2 + u r(alpha)`` by NPG."""
    y = np.asarray(y, dtype=float).ravel()
    if alpha0 is None:
        alpha0 = fbp(y, system.geometry).ravel()
    smooth = QuadraticNLL(system, y)
    return _run(
        smooth, np.asarray(alpha0, float).ravel().copy(), config, True, None, truth,
        callback, "lin-bpdn", None, None,
    )


def default_config(**overrides) -> OuterConfig:
    return OuterConfig(**overrides)


__all__ = [
    "OuterConfig",
    "NpgState",
    "ReconResult",
    "StepRecord",
    "bb_init",
    "npg_step",
    "lbfgsb_minimize",
    "npg_bfgs",
    "pg_bfgs",
    "npg_known_spectrum",
    "npg_quadratic",
    "fbp_init",
    "spike_spectrum",
    "theta_update",
    "default_j0",
]
