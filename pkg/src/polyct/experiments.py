"""Desk-scale experiments shared by ``scripts/`` and the acceptance tests.

Each function simulates its own data from a seed, so results are
reproducible from the arguments alone.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .model import NoiseModel
from .pipeline import baseline, benchmark, rse
from .solvers import OuterConfig, ReconResult, npg_bfgs, pg_bfgs
from .spectrum import build_knots

# lin-BPDN is tuned per run over this grid and the best RSE is kept, which
# favors the baseline; NPG-BFGS uses one fixed weight.
LIN_BPDN_GRID = (3.0, 5.0, 7.0, 10.0, 14.0, 20.0)
NPG_BFGS_U = 1e-3
BLIND_J = 30
BLIND_COVERAGE = 1e3


@dataclass
class Comparison:
    n: int
    n_angles: int
    seed: int
    rse: dict[str, float]
    u_lin_bpdn: float
    raw_max: float = 1.0  # largest raw count; blind estimates are in units of it
    seconds: dict[str, float] = field(default_factory=dict)
    blind: ReconResult | None = field(default=None, repr=False)
    images: dict[str, np.ndarray] = field(default_factory=dict, repr=False)


def blind_grid():
    return build_knots(BLIND_COVERAGE, 1.0, BLIND_J)


def compare_methods(
    n: int = 128,
    n_angles: int = 60,
    seed: int = 0,
    u: float = NPG_BFGS_U,
    lin_grid=LIN_BPDN_GRID,
    max_outer: int = 1500,
    methods=("fbp", "lin_fbp", "lin_bpdn", "npg_bfgs"),
) -> Comparison:
    """RSE of the baselines and of NPG-BFGS on one simulated Poisson scan.

    lin-BPDN uses the true spectrum and the best weight on ``lin_grid``;
    NPG-BFGS is blind and stops after ``max_outer`` outer iterations unless it
    converges first.
    """
    b = benchmark(n, n_angles, seed=seed)
    sino, truth = b.sinogram, b.phantom
    spec = b.simulation.truth_spectrum
    out = Comparison(n=n, n_angles=n_angles, seed=seed, rse={}, u_lin_bpdn=float("nan"),
                     raw_max=float(sino.values.max()))
    for m in ("fbp", "lin_fbp"):
        if m in methods:
            t = time.perf_counter()
            img, _ = baseline(m, sino, spec, system=b.system)
            out.seconds[m] = time.perf_counter() - t
            out.rse[m] = rse(img, truth)
            out.images[m] = img
    if "lin_bpdn" in methods:
        t = time.perf_counter()
        best = (np.inf, None, None)
        for up in lin_grid:
            img, _ = baseline("lin_bpdn", sino, spec, u=up, system=b.system)
            e = rse(img, truth)
            if e < best[0]:
                best = (e, up, img)
        out.seconds["lin_bpdn"] = time.perf_counter() - t
        out.rse["lin_bpdn"], out.u_lin_bpdn, out.images["lin_bpdn"] = best
    if "npg_bfgs" in methods:
        t = time.perf_counter()
        res = npg_bfgs(sino.values, b.system, blind_grid(), OuterConfig(u=u, max_outer=max_outer))
        out.seconds["npg_bfgs"] = time.perf_counter() - t
        out.rse["npg_bfgs"] = rse(res.alpha_hat, truth)
        out.images["npg_bfgs"] = res.alpha_hat
        out.blind = res
    return out


@dataclass
class AccelerationRun:
    pg: ReconResult
    npg: ReconResult
    hit: int | None  # first NPG iteration at or below PG's final objective

    @property
    def ratio(self) -> float:
        return np.inf if self.hit is None else self.hit / self.pg.iterations


def acceleration(
    n: int = 64,
    n_angles: int = 60,
    seed: int = 0,
    noise: NoiseModel | str = NoiseModel.POISSON,
    u: float = 3e-3,
    iterations: int = 1000,
    run_npg: bool = True,
) -> AccelerationRun:
    """PG-BFGS and NPG-BFGS for a fixed iteration budget on the same data.

    The outer tolerance is disabled so both runs use the whole budget.
    """
    noise = NoiseModel.parse(noise)
    b = benchmark(n, n_angles, seed=seed, noise=noise)
    cfg = OuterConfig(u=u, noise=noise, max_outer=iterations, eps=1e-300)
    grid = blind_grid()
    pg = pg_bfgs(b.sinogram.values, b.system, grid, cfg, truth=b.phantom)
    if not run_npg:
        return AccelerationRun(pg=pg, npg=None, hit=None)
    npg = npg_bfgs(b.sinogram.values, b.system, grid, cfg, truth=b.phantom)
    target = pg.trace_array("objective")[-1]
    idx = np.flatnonzero(npg.trace_array("objective") <= target)
    return AccelerationRun(pg=pg, npg=npg, hit=int(idx[0]) + 1 if idx.size else None)


def projection_sweep(
    n: int = 128,
    projections=(30, 60, 120),
    seed: int = 0,
    u: float = NPG_BFGS_U,
    lin_grid=LIN_BPDN_GRID,
    max_outer: int = 1500,
) -> list[Comparison]:
    """lin-BPDN and NPG-BFGS at several projection counts, same seed throughout."""
    return [
        compare_methods(n, p, seed, u, lin_grid, max_outer, methods=("lin_bpdn", "npg_bfgs"))
        for p in projections
    ]
