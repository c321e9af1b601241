"""File formats: CSV images/sinograms/spectra, JSON sidecars and graymap previews.

CSV files are authoritative.  Floats are written with ``repr`` so a round trip
is exact; graymaps are lossy previews normalized per image.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import InvalidArgument
from .projector import FanBeamGeometry
from .spectrum import KnotGrid, MassAttenuationSpectrum


def _fmt(x: float) -> str:
    return repr(float(x))


def _write_rows(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return path


def _read_rows(path, header: Sequence[str]) -> list[list[str]]:
    with Path(path).open(newline="") as fh:
        r = csv.reader(fh)
        got = next(r, None)
        if got is None or [h.strip() for h in got] != list(header):
            raise InvalidArgument(f"{path}: expected header {list(header)}, got {got}")
        return [row for row in r if row]


def save_image_csv(path, img) -> Path:
    """Row-major square image, one row of pixels per CSV line (no header)."""
    a = np.asarray(img, dtype=float)
    if a.ndim == 1:
        n = int(round(np.sqrt(a.size)))
        a = a.reshape(n, n)
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in a:
            w.writerow([_fmt(v) for v in row])
    return path


def load_image_csv(path) -> np.ndarray:
    with Path(path).open(newline="") as fh:
        rows = [[float(v) for v in row] for row in csv.reader(fh) if row]
    a = np.array(rows, dtype=float)
    if a.ndim != 2:
        raise InvalidArgument(f"{path}: ragged image rows")
    return a


def geometry_to_dict(geom: FanBeamGeometry) -> dict:
    return {
        "image_side": geom.image_side,
        "source_to_center": geom.source_to_center,
        "detector_count": geom.detector_count,
        "detector_pitch": geom.detector_pitch,
        "angles_deg": list(geom.angles_deg),
        "circular_mask": geom.circular_mask,
    }


def geometry_from_dict(d: Mapping) -> FanBeamGeometry:
    try:
        return FanBeamGeometry(
            image_side=int(d["image_side"]),
            source_to_center=float(d["source_to_center"]),
            detector_count=int(d["detector_count"]),
            detector_pitch=float(d["detector_pitch"]),
            angles_deg=tuple(float(a) for a in d["angles_deg"]),
            circular_mask=bool(d.get("circular_mask", True)),
        )
    except KeyError as exc:
        raise InvalidArgument(f"geometry is missing field {exc.args[0]!r}") from None


SINOGRAM_HEADER = ("angle_index", "detector_index", "value")


def save_sinogram(path, values, geom: FanBeamGeometry, meta: Mapping | None = None) -> tuple[Path, Path]:
    """Write ``path`` (tidy CSV) and ``path.json`` (geometry plus ``meta``)."""
    v = np.asarray(values, dtype=float).ravel()
    if v.size != geom.n_measurements:
        raise InvalidArgument("sinogram length does not match the geometry")
    K = geom.detector_count
    rows = ((i // K, i % K, float(x)) for i, x in enumerate(v))
    p = _write_rows(path, SINOGRAM_HEADER, rows)
    side = Path(str(p) + ".json")
    payload = {"geometry": geometry_to_dict(geom), **dict(meta or {})}
    side.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return p, side


def load_sinogram(path) -> tuple[np.ndarray, FanBeamGeometry, dict]:
    side = Path(str(path) + ".json")
    if not side.exists():
        raise InvalidArgument(f"missing sinogram metadata {side}")
    meta = json.loads(side.read_text())
    geom = geometry_from_dict(meta.get("geometry", {}))
    rows = _read_rows(path, SINOGRAM_HEADER)
    v = np.full(geom.n_measurements, np.nan)
    K = geom.detector_count
    for a, d, x in rows:
        v[int(a) * K + int(d)] = float(x)
    if np.any(np.isnan(v)):
        raise InvalidArgument(f"{path}: sinogram has missing entries")
    return v, geom, meta


SPECTRUM_HEADER = ("knot", "kappa", "coeff")


def save_spectrum(path, spectrum: MassAttenuationSpectrum, intensity_scale: float = 1.0) -> Path:
    """Coefficients with their knot locations; the grid is rebuilt on load.

    ``intensity_scale`` records the factor that takes the stored coefficients
    to raw measurement units (the sinogram maximum for estimates fitted to
    max-normalized data).
    """
    g = spectrum.grid
    rows = ((j, float(g.knots[j]), float(c)) for j, c in enumerate(spectrum.coeffs, start=1))
    p = _write_rows(path, SPECTRUM_HEADER, rows)
    side = Path(str(p) + ".json")
    meta = {**grid_to_dict(g), "intensity_scale": float(intensity_scale)}
    side.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return p


def load_spectrum(path) -> MassAttenuationSpectrum:
    """Spectrum in raw measurement units (stored coefficients times ``intensity_scale``)."""
    side = Path(str(path) + ".json")
    rows = _read_rows(path, SPECTRUM_HEADER)
    coeffs = np.array([float(r[2]) for r in rows])
    if not side.exists():
        raise InvalidArgument(f"missing spectrum metadata {side}")
    meta = json.loads(side.read_text())
    spec = MassAttenuationSpectrum(grid_from_dict(meta), coeffs)
    scale = float(meta.get("intensity_scale", 1.0))
    return spec if scale == 1.0 else spec.scaled(scale)


ENERGY_HEADER = ("energy_kev", "value")


def save_energy_curve(path, energies, values) -> Path:
    return _write_rows(path, ENERGY_HEADER, zip(map(float, energies), map(float, values)))


def load_energy_curve(path) -> tuple[np.ndarray, np.ndarray]:
    rows = _read_rows(path, ENERGY_HEADER)
    a = np.array(rows, dtype=float).reshape(-1, 2)
    return a[:, 0], a[:, 1]


TRACE_HEADER = ("iteration", "objective", "nll", "beta", "delta", "deltaL", "rse")


def save_trace(path, traces: Mapping[str, Sequence[float]]) -> Path:
    """Per-iteration solver trace; missing columns are written as ``nan``."""
    keys = ("objective", "nll", "beta", "delta", "delta_L", "rse")
    n = len(traces.get("objective", []))
    cols = [np.asarray(traces.get(k, [np.nan] * n), dtype=float) for k in keys]
    rows = ([i + 1] + [float(c[i]) for c in cols] for i in range(n))
    return _write_rows(path, TRACE_HEADER, rows)


def load_trace(path) -> dict[str, np.ndarray]:
    rows = np.array(_read_rows(path, TRACE_HEADER), dtype=float).reshape(-1, len(TRACE_HEADER))
    return {h: rows[:, i] for i, h in enumerate(TRACE_HEADER)}


def save_table(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    return _write_rows(path, header, rows)


def load_table(path) -> list[dict[str, str]]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def save_pgm(path, img, bits: int = 8) -> Path:
    """Binary portable graymap preview, min/max normalized per image."""
    if bits not in (8, 16):
        raise InvalidArgument("graymap depth must be 8 or 16 bits")
    a = np.asarray(img, dtype=float)
    if a.ndim == 1:
        n = int(round(np.sqrt(a.size)))
        a = a.reshape(n, n)
    lo, hi = float(np.min(a)), float(np.max(a))
    top = 2**bits - 1
    scaled = np.zeros_like(a) if hi <= lo else (a - lo) / (hi - lo)
    q = np.rint(scaled * top)
    data = q.astype(">u2" if bits == 16 else "u1").tobytes()
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(f"P5\n{a.shape[1]} {a.shape[0]}\n{top}\n".encode("ascii"))
        fh.write(data)
    return path


def load_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    pos += 1
    if fields[0] != b"P5":
        raise InvalidArgument(f"{path}: not a binary graymap")
    w, h, top = int(fields[1]), int(fields[2]), int(fields[3])
    dtype = ">u2" if top > 255 else "u1"
    return np.frombuffer(raw[pos:], dtype=dtype, count=w * h).reshape(h, w).astype(float)


def grid_to_dict(grid: KnotGrid) -> dict:
    return {"q": grid.q, "kappa0": grid.kappa0, "J": grid.J}


def grid_from_dict(d: Mapping) -> KnotGrid:
    for key in ("q", "kappa0", "J"):
        if key not in d:
            raise InvalidArgument(f"spectrum metadata lacks field {key!r}")
    return KnotGrid(float(d["q"]), float(d["kappa0"]), int(d["J"]))
