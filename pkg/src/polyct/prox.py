"""Proximal operators for the density-map regularizers.

Both regularizers include the nonnegativity indicator.  The TV prox pairs
each pixel with its upper and right neighbors and is solved in the dual by
fast gradient projection; the wavelet prox uses an orthonormal Haar basis
and ADMM.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument, ProxDiverged


class RegularizerKind(str, enum.Enum):
    TV = "tv"
    WAVELET = "wavelet"

    @classmethod
    def parse(cls, value) -> "RegularizerKind":
        if isinstance(value, cls):
            return value
        v = str(value).lower().replace("-l1", "").replace("_l1", "")
        try:
            return cls(v)
        except ValueError:
            raise InvalidArgument(f"unknown regularizer {value!r}") from None


@dataclass(frozen=True)
class Regularizer:
    kind: RegularizerKind = RegularizerKind.TV
    u: float = 1.0
    levels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "kind", RegularizerKind.parse(self.kind))
        if not self.u > 0:
            raise InvalidArgument(f"regularization weight must be positive, got {self.u}")
        if int(self.levels) != self.levels or self.levels < 1:
            raise InvalidArgument("wavelet levels must be a positive integer")

    def value(self, alpha: np.ndarray) -> float:
        """``r(alpha)`` without the weight ``u``; infinite if any pixel is negative."""
        if np.any(np.asarray(alpha) < 0):
            return np.inf
        img = _as_square(alpha)
        if self.kind is RegularizerKind.TV:
            return tv_norm(img)
        return float(np.abs(dwt(img, self.levels)).sum())


@dataclass(frozen=True)
class ProxSettings:
    rho: float = 1.0
    tol: float = 1e-6
    max_iters: int = 20

    def __post_init__(self):
        if not self.rho > 0:
            raise InvalidArgument("rho must be positive")
        if not self.tol > 0:
            raise InvalidArgument("tol must be positive")
        if int(self.max_iters) != self.max_iters or self.max_iters < 1:
            raise InvalidArgument("max_iters must be a positive integer")


@dataclass
class ProxInfo:
    """Diagnostics of one inner solve; ``dual`` carries the warm-start state."""

    iterations: int = 0
    converged: bool = False
    residual: float = np.inf
    initial_residual: float = np.nan
    dual: object = field(default=None, repr=False)


def project_nonneg(x) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=float), 0.0)


def soft_threshold(x, lam: float) -> np.ndarray:
    if lam < 0:
        raise InvalidArgument(f"threshold must be nonnegative, got {lam}")
    x = np.asarray(x, dtype=float)
    return np.sign(x) * np.maximum(np.abs(x) - lam, 0.0)


def _as_square(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        n = int(round(np.sqrt(a.size)))
        if n * n != a.size:
            raise InvalidArgument(f"{a.size} pixels do not form a square image")
        return a.reshape(n, n)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InvalidArgument(f"expected a square image, got shape {a.shape}")
    return a


# TV operators in the orientation used by the dual solver: row i pairs with
# row i+1 and column j with column j+1.  prox_tv flips rows so that row i+1
# is the pixel above.


def _tv_lt(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return x[:-1, :] - x[1:, :], x[:, :-1] - x[:, 1:]


def _tv_l(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    m, n = q.shape[0], p.shape[1]
    out = np.zeros((m, n))
    out[:-1, :] += p
    out[1:, :] -= p
    out[:, :-1] += q
    out[:, 1:] -= q
    return out


def _tv_project(p: np.ndarray, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = p.copy()
    q = q.copy()
    # interior pixels own both a vertical and a horizontal difference
    pi, qi = p[:, :-1], q[:-1, :]
    scale = np.maximum(1.0, np.hypot(pi, qi))
    p[:, :-1] = pi / scale
    q[:-1, :] = qi / scale
    p[:, -1] /= np.maximum(1.0, np.abs(p[:, -1]))
    q[-1, :] /= np.maximum(1.0, np.abs(q[-1, :]))
    return p, q


def _tv_flipped(x: np.ndarray) -> float:
    dv, dh = _tv_lt(x)
    total = np.sqrt(dv[:, :-1] ** 2 + dh[:-1, :] ** 2).sum()
    return float(total + np.abs(dv[:, -1]).sum() + np.abs(dh[-1, :]).sum())


def tv_norm(img) -> float:
    """Isotropic TV with upper and right neighbors (one-sided at the borders)."""
    return _tv_flipped(np.flipud(_as_square(img)))


def prox_tv(
    a,
    lam: float,
    settings: ProxSettings | None = None,
    warm: ProxInfo | None = None,
) -> tuple[np.ndarray, ProxInfo]:
    """``argmin_x 0.5||x - a||^2 + lam * TV(x)`` subject to ``x >= 0``.

    Fast gradient projection on the dual.  Stops when consecutive primal
    iterates differ by less than ``settings.tol`` in l2 norm or after
    ``settings.max_iters`` iterations.  Passing the ``ProxInfo`` of a previous
    call warm-starts the dual variables.
    """
    if not lam > 0:
        raise InvalidArgument(f"prox weight must be positive, got {lam}")
    settings = settings or ProxSettings()
    shape = np.shape(a)
    b = np.flipud(_as_square(a))
    n = b.shape[0]
    if n < 2:
        return project_nonneg(a), ProxInfo(iterations=0, converged=True, residual=0.0)
    if warm is not None and warm.dual is not None and warm.dual[0].shape == (n - 1, n):
        p, q = warm.dual
    else:
        p, q = np.zeros((n - 1, n)), np.zeros((n, n - 1))
    r, s = p, q
    t = 1.0
    step = 1.0 / (8.0 * lam)
    x_prev = np.maximum(b - lam * _tv_l(p, q), 0.0)
    info = ProxInfo()
    for k in range(1, settings.max_iters + 1):
        x_r = np.maximum(b - lam * _tv_l(r, s), 0.0)
        gp, gq = _tv_lt(x_r)
        p_new, q_new = _tv_project(r + step * gp, s + step * gq)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        w = (t - 1.0) / t_new
        r = p_new + w * (p_new - p)
        s = q_new + w * (q_new - q)
        p, q, t = p_new, q_new, t_new
        x = np.maximum(b - lam * _tv_l(p, q), 0.0)
        change = float(np.linalg.norm(x - x_prev))
        x_prev = x
        info.iterations = k
        info.residual = change
        if k == 1:
            info.initial_residual = change
        if change < settings.tol:
            info.converged = True
            break
    info.dual = (p, q)
    return np.flipud(x_prev).reshape(shape), info


def _check_levels(n: int, levels: int) -> None:
    if int(levels) != levels or levels < 1:
        raise InvalidArgument("wavelet levels must be a positive integer")
    if n % (2**levels) != 0:
        raise InvalidArgument(f"image side {n} not divisible by 2^{levels}")


def dwt(img, levels: int = 3) -> np.ndarray:
    """Orthonormal 2-D Haar analysis ``Psi^T alpha`` in the usual nested layout."""
    x = _as_square(img).copy()
    n = x.shape[0]
    _check_levels(n, levels)
    h = np.sqrt(0.5)
    size = n
    for _ in range(levels):
        blk = x[:size, :size]
        lo = (blk[:, 0::2] + blk[:, 1::2]) * h
        hi = (blk[:, 0::2] - blk[:, 1::2]) * h
        blk = np.concatenate([lo, hi], axis=1)
        lo = (blk[0::2, :] + blk[1::2, :]) * h
        hi = (blk[0::2, :] - blk[1::2, :]) * h
        x[:size, :size] = np.concatenate([lo, hi], axis=0)
        size //= 2
    return x


def idwt(coeffs, levels: int = 3) -> np.ndarray:
    """Synthesis ``Psi c``; exact inverse of :func:`dwt`."""
    x = _as_square(coeffs).copy()
    n = x.shape[0]
    _check_levels(n, levels)
    h = np.sqrt(0.5)
    size = n >> (levels - 1)
    for _ in range(levels):
        half = size // 2
        blk = x[:size, :size]
        out = np.empty_like(blk)
        out[0::2, :] = (blk[:half, :] + blk[half:, :]) * h
        out[1::2, :] = (blk[:half, :] - blk[half:, :]) * h
        blk = out
        out = np.empty_like(blk)
        out[:, 0::2] = (blk[:, :half] + blk[:, half:]) * h
        out[:, 1::2] = (blk[:, :half] - blk[:, half:]) * h
        x[:size, :size] = out
        size *= 2
    return x


def prox_wavelet_admm(
    a,
    lam: float,
    settings: ProxSettings | None = None,
    levels: int = 3,
) -> tuple[np.ndarray, ProxInfo]:
    """``argmin_x 0.5||x - a||^2 + lam * ||Psi^T x||_1`` subject to ``x >= 0``.

    ADMM splitting with ``s ~ Psi^T x`` started from ``s = Psi^T a`` and zero
    scaled dual.  The returned estimate is ``(Psi s)_+`` for the last ``s``.
    """
    if not lam > 0:
        raise InvalidArgument(f"prox weight must be positive, got {lam}")
    settings = settings or ProxSettings()
    shape = np.shape(a)
    a2 = _as_square(a)
    _check_levels(a2.shape[0], levels)
    rho = settings.rho
    s = dwt(a2, levels)
    v = np.zeros_like(s)
    info = ProxInfo()
    first = None
    for k in range(1, settings.max_iters + 1):
        x = np.maximum(a2 + rho * idwt(s + v, levels), 0.0) / (1.0 + rho)
        wx = dwt(x, levels)
        s_new = soft_threshold(wx - v, lam / rho)
        v = v + s_new - wx
        primal = float(np.linalg.norm(s_new - wx))
        dual = float(np.linalg.norm(s_new - s))
        s = s_new
        res = max(primal, dual)
        if first is None:
            first = res
            info.initial_residual = res
        info.iterations = k
        info.residual = res
        if not np.isfinite(res) or (first > 0 and res > 1e6 * first):
            raise ProxDiverged(f"ADMM residual grew to {res:.3g} (initial {first:.3g})")
        if res < settings.tol:
            info.converged = True
            break
    return np.maximum(idwt(s, levels), 0.0).reshape(shape), info


def prox_objective(x, a, lam: float, reg: Regularizer) -> float:
    x = np.asarray(x, dtype=float)
    d = x.ravel() - np.asarray(a, dtype=float).ravel()
    return 0.5 * float(d @ d) + lam * reg.value(x)


def apply_prox(
    a,
    lam: float,
    reg: Regularizer,
    settings: ProxSettings,
    warm: ProxInfo | None = None,
) -> tuple[np.ndarray, ProxInfo]:
    """Dispatch to the prox of ``reg`` scaled by ``lam`` (``u`` is not applied here)."""
    if reg.kind is RegularizerKind.TV:
        return prox_tv(a, lam, settings, warm)
    return prox_wavelet_admm(a, lam, settings, reg.levels)
