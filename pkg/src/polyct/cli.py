"""Command-line front end: ``simulate``, ``reconstruct``, ``sweep`` and ``diagnose``.

A run is fully described by one INI file (sections ``[simulation]``,
``[reconstruction]``, ``[sweep]``, ``[diagnose]``).  Every resolved value,
defaults included, is echoed into the output metadata together with a hash of
the resolved configuration.

Exit codes: 0 success, 2 configuration or input error, 3 solver failure.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .errors import InvalidArgument, PolyCTError
from .model import ForwardModel, NoiseModel, region_check
from .pipeline import (
    SimulationSpec,
    Sinogram,
    baseline,
    make_phantom,
    power_law_curve,
    raised_cosine_table,
    rse,
    simulate,
)
from .projector import FanBeamGeometry, build_system_matrix, covering_geometry, equispaced_angles
from .prox import Regularizer
from .solvers import OuterConfig, ReconResult, npg_bfgs, npg_known_spectrum, pg_bfgs
from .spectrum import MassAttenuationSpectrum, build_knots, condition_diagnostic

log = logging.getLogger("polyct")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 2, 3
METHODS = ("fbp", "lin-fbp", "lin-bpdn", "npg", "npg-bfgs", "pg-bfgs")
NEEDS_SPECTRUM = ("lin-fbp", "lin-bpdn", "npg")
THREADS_ENV = "POLYCT_THREADS"


class ConfigError(Exception):
    """Bad or missing configuration; mapped to exit code 2."""


class SolverFailure(Exception):
    """A solver stopped with ``termination == 'error'``; mapped to exit code 3."""


# Resolved defaults per section.  Values are strings, as configparser stores them.
DEFAULTS: dict[str, dict[str, str]] = {
    "simulation": {
        "phantom": "defects",
        "size": "64",
        "n_angles": "60",
        "detector_count": "",
        "source_to_center": "",
        "detector_pitch": "",
        "circular_mask": "true",
        "seed": "0",
        "noise": "poisson",
        "energy_samples": "130",
        "max_count": "65536",
        "min_count": "20",
        "lognormal_sigma": "0.02",
        "k_edge_kev": "",
        "k_edge_jump": "",
    },
    "reconstruction": {
        "method": "npg-bfgs",
        "sinogram": "",
        "spectrum": "",
        "truth": "",
        "u": "1e-3",
        "regularizer": "tv",
        "wavelet_levels": "3",
        "noise": "poisson",
        "J": "30",
        "coverage": "1e3",
        "center": "1.0",
        "eps": "1e-6",
        "eta_alpha": "1e-3",
        "eta_I": "1e-2",
        "n_sub": "20",
        "max_outer": "4000",
        "adapt_n": "4",
        "adapt_xi": "0.5",
        "rho": "1.0",
        "checkpoint_every": "0",
    },
    "sweep": {
        "methods": "fbp, lin-fbp, lin-bpdn, npg-bfgs",
        "projections": "30, 60, 120",
        "trials": "1",
        "u_lin_bpdn": "",
    },
    "diagnose": {
        "sinogram": "",
        "image": "",
        "spectrum": "",
        "j0": "",
    },
}


@dataclass
class RunConfig:
    """Resolved configuration for one command."""

    command: str
    values: dict[str, dict[str, str]]
    out: Path
    quiet: bool = False
    base_dir: Path = field(default_factory=Path.cwd)

    def get(self, section: str, key: str) -> str:
        return self.values[section][key]

    def _typed(self, section, key, conv):
        raw = self.get(section, key).strip()
        try:
            return conv(raw)
        except ValueError:
            raise ConfigError(f"[{section}] {key} = {raw!r} is not a valid {conv.__name__}") from None

    def integer(self, section, key) -> int:
        return self._typed(section, key, int)

    def real(self, section, key) -> float:
        return self._typed(section, key, float)

    def flag(self, section, key) -> bool:
        raw = self.get(section, key).strip().lower()
        if raw in ("1", "true", "yes", "on"):
            return True
        if raw in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"[{section}] {key} = {raw!r} is not a boolean")

    def optional(self, section, key) -> str | None:
        v = self.get(section, key).strip()
        return v or None

    def path(self, section, key, required: bool = True) -> Path | None:
        v = self.optional(section, key)
        if v is None:
            if required:
                raise ConfigError(f"[{section}] {key} is required for this command")
            return None
        p = Path(v)
        return p if p.is_absolute() else self.base_dir / p

    def listing(self, section, key) -> list[str]:
        return [x.strip() for x in self.get(section, key).split(",") if x.strip()]

    def canonical(self) -> str:
        return json.dumps(self.values, sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()


def load_config(path: str | Path | None, command: str, out: str | Path, seed: int | None,
                method: str | None, quiet: bool) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keep "J" and "eta_I" as written
    base = Path.cwd()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} not found")
        try:
            parser.read(p)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {p}: {exc}") from None
        base = p.resolve().parent
    values = {sec: dict(d) for sec, d in DEFAULTS.items()}
    for sec in parser.sections():
        if sec not in values:
            raise ConfigError(f"unknown config section [{sec}]")
        for key, v in parser.items(sec):
            if key not in values[sec]:
                raise ConfigError(f"unknown key {key!r} in section [{sec}]")
            values[sec][key] = v
    if seed is not None:
        values["simulation"]["seed"] = str(seed)
    if method is not None:
        values["reconstruction"]["method"] = method
    return RunConfig(command=command, values=values, out=Path(out), quiet=quiet, base_dir=base)


# -- builders -----------------------------------------------------------------


def geometry_from(cfg: RunConfig, n_angles: int | None = None) -> FanBeamGeometry:
    n = cfg.integer("simulation", "size")
    if n < 16:
        raise ConfigError("[simulation] size must be at least 16")
    na = n_angles if n_angles is not None else cfg.integer("simulation", "n_angles")
    K = cfg.optional("simulation", "detector_count")
    D = cfg.optional("simulation", "source_to_center")
    pitch = cfg.optional("simulation", "detector_pitch")
    g = covering_geometry(
        n, na,
        detector_count=int(K) if K else None,
        source_to_center=float(D) if D else None,
    )
    return FanBeamGeometry(
        image_side=n,
        source_to_center=g.source_to_center,
        detector_count=g.detector_count,
        detector_pitch=float(pitch) if pitch else g.detector_pitch,
        angles_deg=equispaced_angles(na),
        circular_mask=cfg.flag("simulation", "circular_mask"),
    )


def simulation_spec(cfg: RunConfig, geom: FanBeamGeometry, seed: int | None = None) -> SimulationSpec:
    ek = cfg.optional("simulation", "k_edge_kev")
    jump = cfg.optional("simulation", "k_edge_jump")
    if (ek is None) != (jump is None):
        raise ConfigError("[simulation] k_edge_kev and k_edge_jump must be given together")
    curve = power_law_curve(k_edge=(float(ek), float(jump)) if ek else None)
    noise = cfg.get("simulation", "noise").strip().lower()
    return SimulationSpec(
        phantom=cfg.get("simulation", "phantom").strip(),
        size=geom.image_side,
        geometry=geom,
        curve=curve,
        table=raised_cosine_table(),
        energy_samples=cfg.integer("simulation", "energy_samples"),
        max_count=cfg.real("simulation", "max_count"),
        min_count=cfg.real("simulation", "min_count"),
        seed=cfg.integer("simulation", "seed") if seed is None else seed,
        noise=None if noise in ("none", "noiseless") else NoiseModel.parse(noise),
        lognormal_sigma=cfg.real("simulation", "lognormal_sigma"),
    )


def outer_config(cfg: RunConfig, u: float | None = None) -> OuterConfig:
    s = "reconstruction"
    reg = Regularizer(
        kind=cfg.get(s, "regularizer").strip(),
        levels=cfg.integer(s, "wavelet_levels"),
    )
    return OuterConfig(
        u=cfg.real(s, "u") if u is None else u,
        reg=reg,
        noise=cfg.get(s, "noise").strip(),
        eps=cfg.real(s, "eps"),
        eta_alpha=cfg.real(s, "eta_alpha"),
        eta_I=cfg.real(s, "eta_I"),
        n_sub=cfg.integer(s, "n_sub"),
        max_outer=cfg.integer(s, "max_outer"),
        adapt_n=cfg.integer(s, "adapt_n"),
        adapt_xi=cfg.real(s, "adapt_xi"),
        rho=cfg.real(s, "rho"),
    )


def _grid(cfg: RunConfig):
    s = "reconstruction"
    return build_knots(cfg.real(s, "coverage"), cfg.real(s, "center"), cfg.integer(s, "J"))


def _method(name: str) -> str:
    m = name.strip().lower().replace("_", "-")
    if m not in METHODS:
        raise ConfigError(f"unknown method {name!r}; choose from {', '.join(METHODS)}")
    return m


def run_method(method: str, sino: Sinogram, spectrum: MassAttenuationSpectrum | None,
               cfg: RunConfig, system=None, truth=None, u: float | None = None,
               callback=None) -> tuple[np.ndarray, ReconResult | None]:
    """Dispatch one reconstruction; ``spectrum`` is in the raw units of ``sino``."""
    method = _method(method)
    if method in NEEDS_SPECTRUM and spectrum is None:
        raise ConfigError(f"method {method} needs [reconstruction] spectrum")
    oc = outer_config(cfg, u)
    if method in ("fbp", "lin-fbp", "lin-bpdn"):
        return baseline(method, sino, spectrum, u=oc.u, reg=oc.reg, system=system,
                        config=oc, truth=truth)
    system = system or build_system_matrix(sino.geometry)
    t = None if truth is None else np.asarray(truth, dtype=float)
    if method == "npg":
        norm = sino.normalized()
        spec_n = spectrum.scaled(sino.scale / norm.scale)
        res = npg_known_spectrum(norm.values, system, spec_n.grid, spec_n.coeffs, oc,
                                 truth=t, callback=callback)
    else:
        solver = npg_bfgs if method == "npg-bfgs" else pg_bfgs
        res = solver(sino.values, system, _grid(cfg), oc, truth=t, callback=callback)
    return res.alpha_hat, res


# -- commands -----------------------------------------------------------------


def _meta(cfg: RunConfig, **extra) -> dict:
    return {
        "command": cfg.command,
        "config": cfg.values,
        "config_sha256": cfg.digest(),
        **extra,
    }


def _prepare_out(cfg: RunConfig) -> Path:
    try:
        cfg.out.mkdir(parents=True, exist_ok=True)
        probe = cfg.out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory {cfg.out} is not writable: {exc}") from None
    return cfg.out


def cmd_simulate(cfg: RunConfig) -> int:
    out = _prepare_out(cfg)
    geom = geometry_from(cfg)
    spec = simulation_spec(cfg, geom)
    alpha = make_phantom(spec.size, spec.phantom)
    sim = simulate(spec, alpha)
    sino = sim.sinogram
    io.save_sinogram(
        out / "sinogram.csv", sino.values, geom,
        _meta(cfg, seed=spec.seed, normalization=float(sino.values.max()),
              path_scale=sim.path_scale, intensity_scale=sim.intensity_scale,
              zero_counts=sim.zero_counts),
    )
    io.save_image_csv(out / "truth_image.csv", alpha)
    io.save_spectrum(out / "truth_spectrum.csv", sim.truth_spectrum)
    io.save_pgm(out / "truth_image.pgm", alpha)
    io.save_pgm(out / "sinogram.pgm", sino.normalized().as_image(), bits=16)
    if not cfg.quiet:
        print(f"wrote {geom.n_measurements} measurements to {out / 'sinogram.csv'}")
    return EXIT_OK


def _load_inputs(cfg: RunConfig, section: str):
    sino_path = cfg.path(section, "sinogram")
    if not sino_path.exists():
        raise ConfigError(f"sinogram {sino_path} not found")
    values, geom, meta = io.load_sinogram(sino_path)
    sino = Sinogram(values, geom)
    spec_path = cfg.path(section, "spectrum", required=False)
    spectrum = io.load_spectrum(spec_path) if spec_path is not None else None
    return sino, spectrum, meta


def cmd_reconstruct(cfg: RunConfig) -> int:
    out = _prepare_out(cfg)
    method = _method(cfg.get("reconstruction", "method"))
    sino, spectrum, meta = _load_inputs(cfg, "reconstruction")
    truth_path = cfg.path("reconstruction", "truth", required=False)
    truth = io.load_image_csv(truth_path) if truth_path is not None else None
    every = cfg.integer("reconstruction", "checkpoint_every")

    def checkpoint(i, alpha, I):
        if every > 0 and i % every == 0:
            io.save_image_csv(out / f"checkpoint_{i:06d}.csv", alpha)

    t0 = time.perf_counter()
    img, res = run_method(method, sino, spectrum, cfg, truth=truth, callback=checkpoint)
    elapsed = time.perf_counter() - t0
    io.save_image_csv(out / "image.csv", img)
    io.save_pgm(out / "image.pgm", img)
    if res is not None:
        io.save_trace(out / "trace.csv", res.traces)
        if res.I_hat is not None and res.grid is not None and method != "npg":
            # blind solvers fit max-normalized data
            io.save_spectrum(out / "spectrum_estimate.csv",
                             MassAttenuationSpectrum(res.grid, res.I_hat),
                             intensity_scale=float(sino.values.max()))
    err = rse(img, truth) if truth is not None else float("nan")
    io.save_table(
        out / "summary.csv",
        ("method", "rse", "iterations", "termination", "seconds", "config_sha256"),
        [(method, float(err), res.iterations if res else 0,
          res.termination if res else "direct", float(elapsed), cfg.digest())],
    )
    (out / "run.json").write_text(json.dumps(_meta(cfg, input_meta=meta), indent=2, sort_keys=True) + "\n")
    if not cfg.quiet:
        print(f"{method}: rse={err:.6g} iterations={res.iterations if res else 0}")
    if res is not None and res.termination == "error":
        raise SolverFailure(res.message)
    return EXIT_OK


def _sweep_cell(cfg: RunConfig, n_proj: int, trial: int, methods, u_lin):
    geom = geometry_from(cfg, n_proj)
    spec = simulation_spec(cfg, geom, seed=cfg.integer("simulation", "seed") + trial)
    alpha = make_phantom(spec.size, spec.phantom)
    system = build_system_matrix(geom)
    sim = simulate(spec, alpha, system)
    rows = []
    for m in methods:
        u = u_lin if (m == "lin-bpdn" and u_lin is not None) else None
        img, res = run_method(m, sim.sinogram, sim.truth_spectrum, cfg, system=system, u=u)
        if res is not None and res.termination == "error":
            raise SolverFailure(f"{m} at {n_proj} projections, trial {trial}: {res.message}")
        rows.append((m, n_proj, trial, float(rse(img, alpha))))
    return rows


def thread_count() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV}={raw!r} is not an integer") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be at least 1")
    return n


def cmd_sweep(cfg: RunConfig) -> int:
    out = _prepare_out(cfg)
    methods = [_method(m) for m in cfg.listing("sweep", "methods")]
    try:
        projections = [int(p) for p in cfg.listing("sweep", "projections")]
    except ValueError:
        raise ConfigError("[sweep] projections must be integers") from None
    trials = cfg.integer("sweep", "trials")
    u_raw = cfg.optional("sweep", "u_lin_bpdn")
    u_lin = float(u_raw) if u_raw else None
    cells = [(p, t) for p in projections for t in range(trials)]
    with ThreadPoolExecutor(max_workers=thread_count()) as pool:
        # map keeps the submission order, so the table is deterministic
        results = list(pool.map(lambda c: _sweep_cell(cfg, c[0], c[1], methods, u_lin), cells))
    rows = [r for cell in results for r in cell]
    io.save_table(out / "sweep.csv", ("method", "n_proj", "trial", "rse"), rows)
    (out / "run.json").write_text(json.dumps(_meta(cfg), indent=2, sort_keys=True) + "\n")
    if not cfg.quiet:
        for m, p, t, e in rows:
            print(f"{m:>9s} n_proj={p:<4d} trial={t} rse={e:.5f}")
    return EXIT_OK


def cmd_diagnose(cfg: RunConfig) -> int:
    out = _prepare_out(cfg)
    sino, spectrum, _ = _load_inputs(cfg, "diagnose")
    if spectrum is None:
        raise ConfigError("[diagnose] spectrum is required")
    img_path = cfg.path("diagnose", "image")
    alpha = io.load_image_csv(img_path).ravel()
    j0_raw = cfg.optional("diagnose", "j0")
    noise = NoiseModel.parse(cfg.get("reconstruction", "noise").strip())
    system = build_system_matrix(sino.geometry)
    model = ForwardModel(system, spectrum.grid)
    E = sino.values
    cert = region_check(model, E, alpha, spectrum.coeffs, noise, int(j0_raw) if j0_raw else None)
    sv, rank = condition_diagnostic(model.output_basis(alpha))
    header = ("U", "V", "j0", "noise", "in_region", "worst_margin", "residual_margin",
              "shape_margin", "alpha_margin", "rank", "sigma_max", "sigma_min")
    io.save_table(out / "certificate.csv", header, [(
        float(cert.U), float(cert.V), cert.j0, cert.noise.value, int(cert.in_region),
        float(cert.worst_margin), float(cert.residual_margin), float(cert.shape_margin),
        float(cert.alpha_margin), rank, float(sv[0]), float(sv[-1]),
    )])
    io.save_table(out / "singular_values.csv", ("index", "sigma"),
                  [(i + 1, float(s)) for i, s in enumerate(sv)])
    if not cfg.quiet:
        print(f"U={cert.U:.6g} V={cert.V:.6g} in_region={cert.in_region} "
              f"worst_margin={cert.worst_margin:.3g}")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "reconstruct": cmd_reconstruct,
    "sweep": cmd_sweep,
    "diagnose": cmd_diagnose,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="polyct", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="INI configuration file")
    p.add_argument("--out", default="out", help="output directory (default: ./out)")
    p.add_argument("--seed", type=int, help="override [simulation] seed")
    p.add_argument("--method", help="override [reconstruction] method")
    p.add_argument("--quiet", action="store_true", help="suppress progress output")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.seed is not None and args.seed < 0:
            raise ConfigError("--seed must be a nonnegative integer")
        cfg = load_config(args.config, args.command, args.out, args.seed, args.method, args.quiet)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"polyct: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverFailure as exc:
        print(f"polyct: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (InvalidArgument, ValueError, OSError) as exc:
        print(f"polyct: input error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PolyCTError as exc:
        print(f"polyct: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
