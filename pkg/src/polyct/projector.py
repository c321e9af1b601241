"""Fan-beam system matrix, its adjoint, and filtered back-projection.

Image coordinates are in pixel units with the rotation center at the image
center.  Row ``iy`` of an ``n x n`` image sits at ``y = n/2 - 0.5 - iy`` and
column ``ix`` at ``x = ix - n/2 + 0.5``.  For a view at angle ``theta`` the
source sits at ``D * (cos theta, sin theta)`` and the (virtual) flat detector
passes through the rotation center along ``(-sin theta, cos theta)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import InvalidArgument, InvalidGeometry


@dataclass(frozen=True)
class FanBeamGeometry:
    image_side: int
    source_to_center: float
    detector_count: int
    detector_pitch: float
    angles_deg: tuple = field(default=())
    circular_mask: bool = True

    def __post_init__(self):
        object.__setattr__(self, "angles_deg", tuple(float(a) for a in self.angles_deg))
        n = self.image_side
        if int(n) != n or n < 1:
            raise InvalidGeometry(f"image side must be a positive integer, got {n}")
        if not self.source_to_center > n / np.sqrt(2.0):
            raise InvalidGeometry(
                f"source at distance {self.source_to_center} lies inside the image (side {n})"
            )
        if int(self.detector_count) != self.detector_count or self.detector_count < 1:
            raise InvalidGeometry("detector_count must be a positive integer")
        if not self.detector_pitch > 0:
            raise InvalidGeometry("detector_pitch must be positive")
        if len(self.angles_deg) == 0:
            raise InvalidGeometry("need at least one projection angle")
        if any(not 0.0 <= a < 360.0 for a in self.angles_deg):
            raise InvalidGeometry("angles must lie in [0, 360)")

    @property
    def n_measurements(self) -> int:
        return self.detector_count * len(self.angles_deg)

    @property
    def n_pixels(self) -> int:
        return self.image_side**2

    def detector_positions(self) -> np.ndarray:
        k = np.arange(self.detector_count) - (self.detector_count - 1) / 2.0
        return k * self.detector_pitch

    def pixel_centers(self) -> tuple[np.ndarray, np.ndarray]:
        n = self.image_side
        c = np.arange(n) - n / 2.0 + 0.5
        x = np.broadcast_to(c[None, :], (n, n))
        y = np.broadcast_to(-c[:, None], (n, n))
        return x, y

    def mask(self) -> np.ndarray:
        """Boolean ``n x n`` support; pixels whose centers lie in the inscribed circle."""
        n = self.image_side
        if not self.circular_mask:
            return np.ones((n, n), dtype=bool)
        x, y = self.pixel_centers()
        return x**2 + y**2 <= (n / 2.0) ** 2


def equispaced_angles(count: int) -> tuple[float, ...]:
    return tuple(360.0 * np.arange(count) / count)


def covering_geometry(
    n: int,
    n_angles: int,
    detector_count: int | None = None,
    source_to_center: float | None = None,
) -> FanBeamGeometry:
    """Geometry whose fan just covers the inscribed circle of an ``n x n`` image."""
    D = float(source_to_center if source_to_center is not None else 4.0 * n)
    K = int(detector_count if detector_count is not None else n)
    r = n / 2.0
    half = r * D / np.sqrt(D**2 - r**2)
    return FanBeamGeometry(
        image_side=n,
        source_to_center=D,
        detector_count=K,
        detector_pitch=2.0 * half * 1.02 / K,
        angles_deg=equispaced_angles(n_angles),
        circular_mask=True,
    )


def _siddon_view(geom: FanBeamGeometry, theta: float):
    """Intersection lengths of every detector ray in one view with the pixel grid."""
    n = geom.image_side
    D = geom.source_to_center
    es = np.array([np.cos(theta), np.sin(theta)])
    eu = np.array([-np.sin(theta), np.cos(theta)])
    src = D * es
    u = geom.detector_positions()
    tgt = u[:, None] * eu[None, :]
    d = tgt - src[None, :]  # ray runs src + t * d
    length = np.hypot(d[:, 0], d[:, 1])
    planes = np.arange(n + 1) - n / 2.0
    R = u.size

    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        tx = (planes[None, :] - src[0]) / d[:, 0:1]
        ty = (planes[None, :] - src[1]) / d[:, 1:2]
    big = np.inf
    tx = np.where(np.isfinite(tx), tx, np.nan)
    ty = np.where(np.isfinite(ty), ty, np.nan)
    # entry/exit through the bounding box
    tx_lo = np.where(np.isnan(tx[:, 0]), -big, np.minimum(tx[:, 0], tx[:, -1]))
    tx_hi = np.where(np.isnan(tx[:, 0]), big, np.maximum(tx[:, 0], tx[:, -1]))
    ty_lo = np.where(np.isnan(ty[:, 0]), -big, np.minimum(ty[:, 0], ty[:, -1]))
    ty_hi = np.where(np.isnan(ty[:, 0]), big, np.maximum(ty[:, 0], ty[:, -1]))
    # rays parallel to an axis must lie strictly inside that slab
    inside_x = np.where(np.isnan(tx[:, 0]), np.abs(src[0]) < n / 2.0, True)
    inside_y = np.where(np.isnan(ty[:, 0]), np.abs(src[1]) < n / 2.0, True)
    t_in = np.maximum(tx_lo, ty_lo)
    t_out = np.minimum(tx_hi, ty_hi)
    hit = (t_out > t_in) & inside_x & inside_y
    t_in = np.where(hit, t_in, 0.0)
    t_out = np.where(hit, t_out, 0.0)

    allt = np.concatenate([tx, ty, t_in[:, None], t_out[:, None]], axis=1)
    allt = np.where(np.isnan(allt), t_in[:, None], allt)
    allt = np.clip(allt, t_in[:, None], t_out[:, None])
    allt.sort(axis=1)
    seg = np.diff(allt, axis=1) * length[:, None]
    tmid = 0.5 * (allt[:, 1:] + allt[:, :-1])
    xm = src[0] + tmid * d[:, 0:1]
    ym = src[1] + tmid * d[:, 1:2]
    ix = np.floor(xm + n / 2.0).astype(np.int64)
    iy = np.floor(n / 2.0 - ym).astype(np.int64)
    keep = (seg > 1e-12) & (ix >= 0) & (ix < n) & (iy >= 0) & (iy < n) & hit[:, None]
    rows = np.broadcast_to(np.arange(R)[:, None], seg.shape)[keep]
    cols = (iy * n + ix)[keep]
    return rows, cols, seg[keep]


@dataclass(frozen=True, eq=False)
class SystemMatrix:
    """Sparse nonnegative ``N x p`` projection operator for one geometry."""

    geometry: FanBeamGeometry
    matrix: sp.csr_matrix = field(repr=False)
    matrix_t: sp.csr_matrix = field(repr=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    def project(self, alpha) -> np.ndarray:
        return project(self, alpha)

    def backproject(self, y) -> np.ndarray:
        return backproject(self, y)

    def norm_squared(self, iters: int = 50, seed: int = 0) -> float:
        """Largest eigenvalue of ``Phi^T Phi`` by power iteration."""
        rng = np.random.default_rng(seed)
        v = rng.random(self.shape[1])
        lam = 0.0
        for _ in range(iters):
            w = self.matrix_t @ (self.matrix @ v)
            lam = float(np.linalg.norm(w))
            if lam == 0.0:
                return 0.0
            v = w / lam
        return lam


def build_system_matrix(geom: FanBeamGeometry) -> SystemMatrix:
    """Ray-driven (Siddon) intersection-length matrix, rows ordered angle-major."""
    K = geom.detector_count
    p = geom.n_pixels
    mask = geom.mask().ravel()
    rows, cols, vals = [], [], []
    for a, deg in enumerate(geom.angles_deg):
        r, c, v = _siddon_view(geom, np.deg2rad(deg))
        sel = mask[c]
        rows.append(r[sel] + a * K)
        cols.append(c[sel])
        vals.append(v[sel])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    M = sp.csr_matrix((vals, (rows, cols)), shape=(geom.n_measurements, p))
    M.sum_duplicates()
    M.sort_indices()
    Mt = M.T.tocsr()
    Mt.sort_indices()
    return SystemMatrix(geometry=geom, matrix=M, matrix_t=Mt)


def project(system: SystemMatrix, alpha) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=float)
    if alpha.size != system.shape[1]:
        raise InvalidArgument(f"image has {alpha.size} pixels, operator expects {system.shape[1]}")
    return system.matrix @ alpha.ravel()


def backproject(system: SystemMatrix, y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.size != system.shape[0]:
        raise InvalidArgument(f"sinogram has {y.size} entries, operator expects {system.shape[0]}")
    return system.matrix_t @ y.ravel()


def _ramp_filter(n_det: int, pitch: float, window: str) -> tuple[np.ndarray, int]:
    """Frequency response of the band-limited ramp, sampled for zero-padded FFTs."""
    size = max(64, int(2 ** np.ceil(np.log2(2 * n_det))))
    k = np.arange(size)
    k = np.where(k > size // 2, k - size, k)
    h = np.zeros(size)
    h[0] = 1.0 / (4.0 * pitch**2)
    odd = k % 2 == 1
    h[odd] = -1.0 / (np.pi * k[odd] * pitch) ** 2
    H = np.real(np.fft.fft(h)) * pitch
    if window == "hann":
        f = np.abs(np.fft.fftfreq(size))  # cycles/sample, Nyquist at 0.5
        H = H * 0.5 * (1.0 + np.cos(2.0 * np.pi * f))
    elif window != "ramlak":
        raise InvalidArgument(f"unknown FBP window {window!r}")
    return H, size


def fbp(y, geom: FanBeamGeometry, window: str = "hann") -> np.ndarray:
    """Fan-beam filtered back-projection for a flat, equispaced detector.

    Cosine pre-weighting, ramp filtering (optionally Hann-apodized) and
    distance-weighted back-projection over the full rotation.  Returns a
    signed ``n x n`` image.
    """
    y = np.asarray(y, dtype=float)
    if y.size != geom.n_measurements:
        raise InvalidArgument(
            f"sinogram has {y.size} entries, geometry expects {geom.n_measurements}"
        )
    if not np.all(np.isfinite(y)):
        raise InvalidArgument("sinogram must be finite")
    K = geom.detector_count
    n_views = len(geom.angles_deg)
    D = geom.source_to_center
    tau = geom.detector_pitch
    u = geom.detector_positions()
    sino = y.reshape(n_views, K) * (D / np.sqrt(D**2 + u**2))[None, :]
    H, size = _ramp_filter(K, tau, window)
    padded = np.zeros((n_views, size))
    padded[:, :K] = sino
    q = np.real(np.fft.ifft(np.fft.fft(padded, axis=1) * H[None, :], axis=1))[:, :K] * 0.5

    x, yy = geom.pixel_centers()
    x = x.ravel()
    yy = yy.ravel()
    img = np.zeros(x.size)
    # views are spread over the full turn, so the angular step is 2 pi / n_views
    dbeta = 2.0 * np.pi / n_views
    for a, deg in enumerate(geom.angles_deg):
        th = np.deg2rad(deg)
        c, s = np.cos(th), np.sin(th)
        along = D - (x * c + yy * s)
        U = along / D
        pu = D * (-x * s + yy * c) / along
        img += np.interp(pu, u, q[a], left=0.0, right=0.0) / U**2
    img *= dbeta
    img = img.reshape(geom.image_side, geom.image_side)
    if geom.circular_mask:
        img[~geom.mask()] = 0.0
    return img
