"""Compression curve processing: denoising, replicate averaging, resampling, dissipation.

Stress is in MPa throughout, strain is dimensionless, and dissipation is
reported in kJ/m^3 (1 MPa = 1e3 kJ/m^3).
"""
from __future__ import annotations

import csv
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CANONICAL_POINTS = 120
MPA_TO_KJ_PER_M3 = 1e3
DEFAULT_WINDOW = 11
DEFAULT_ORDER = 3

_REPLICATE_NAME = re.compile(r"^(?P<design>.+)_rep(?P<rep>\d+)\.csv$")


class ConfigurationError(ValueError):
    pass


class CurveError(ValueError):
    pass


@dataclass(eq=False)
class StressStrainCurve:
    """Loading samples ``[:split]`` followed by unloading samples ``[split:]``."""

    strain: np.ndarray
    stress: np.ndarray
    split: int

    def __post_init__(self):
        self.strain = np.asarray(self.strain, dtype=float)
        self.stress = np.asarray(self.stress, dtype=float)
        self.split = int(self.split)
        s, e = self.strain, self.stress
        if s.ndim != 1 or s.shape != e.shape or len(s) < 3:
            raise CurveError("strain and stress must be 1D arrays of equal length >= 3")
        if not (np.all(np.isfinite(s)) and np.all(np.isfinite(e))):
            raise CurveError("curve contains non-finite values")
        if not 0 < self.split < len(s):
            raise CurveError(f"phase split {self.split} out of range for {len(s)} samples")
        if s[0] < 0:
            raise CurveError("strain must start at a nonnegative value")
        if np.any(np.diff(s[: self.split]) < 0):
            raise CurveError("loading strain must be nondecreasing")
        if np.any(np.diff(s[self.split - 1:]) > 0):
            raise CurveError("unloading strain must be nonincreasing")

    @classmethod
    def from_branches(cls, load_strain, load_stress, unload_strain, unload_stress):
        strain = np.concatenate([load_strain, unload_strain])
        stress = np.concatenate([load_stress, unload_stress])
        return cls(strain, stress, len(load_strain))

    @classmethod
    def from_arrays(cls, strain, stress):
        """Split at the global strain maximum; the apex is the last loading sample."""
        strain = np.asarray(strain, dtype=float)
        return cls(strain, stress, int(np.argmax(strain)) + 1)

    @property
    def loading(self):
        return self.strain[: self.split], self.stress[: self.split]

    @property
    def unloading(self):
        return self.strain[self.split:], self.stress[self.split:]

    @property
    def eps_max(self) -> float:
        return float(self.strain.max())

    def __eq__(self, other):
        if not isinstance(other, StressStrainCurve):
            return NotImplemented
        return (self.split == other.split and np.array_equal(self.strain, other.strain)
                and np.array_equal(self.stress, other.stress))


@dataclass(eq=False)
class CanonicalCurve:
    """Both branches sampled on one evenly spaced strain grid from 0 to eps_max."""

    strain: np.ndarray
    loading: np.ndarray
    unloading: np.ndarray

    def __post_init__(self):
        self.strain = np.asarray(self.strain, dtype=float)
        self.loading = np.asarray(self.loading, dtype=float)
        self.unloading = np.asarray(self.unloading, dtype=float)
        n = len(self.strain)
        if n < 2 or self.loading.shape != (n,) or self.unloading.shape != (n,):
            raise CurveError("canonical arrays must share one length >= 2")
        if self.strain[0] != 0.0:
            raise CurveError("canonical grid must start at zero strain")
        spacing = np.diff(self.strain)
        if np.max(np.abs(spacing - spacing[0])) > 1e-12 or spacing[0] <= 0:
            raise CurveError("canonical grid must be evenly spaced and increasing")

    @property
    def eps_max(self) -> float:
        return float(self.strain[-1])

    @classmethod
    def on_grid(cls, eps_max: float, loading, unloading):
        return cls(canonical_grid(eps_max, len(loading)), loading, unloading)

    def to_curve(self) -> StressStrainCurve:
        return StressStrainCurve.from_branches(
            self.strain, self.loading, self.strain[::-1], self.unloading[::-1])

    def __eq__(self, other):
        if not isinstance(other, CanonicalCurve):
            return NotImplemented
        return (np.array_equal(self.strain, other.strain) and np.array_equal(self.loading, other.loading)
                and np.array_equal(self.unloading, other.unloading))


def canonical_grid(eps_max: float, n: int = CANONICAL_POINTS) -> np.ndarray:
    return np.linspace(0.0, float(eps_max), n)


def sg_coefficients(window: int, order: int) -> np.ndarray:
    """Smoothing weights: value at the window centre of the least-squares polynomial."""
    _check_sg(window, order)
    half = window // 2
    offsets = np.arange(-half, half + 1, dtype=float)
    vander = offsets[:, None] ** np.arange(order + 1)[None, :]
    return np.linalg.pinv(vander)[0]


def _check_sg(window, order):
    if int(window) != window or window < 1 or window % 2 == 0:
        raise ConfigurationError(f"window must be a positive odd integer, got {window}")
    if int(order) != order or not 0 <= order < window:
        raise ConfigurationError(f"order must satisfy 0 <= order < window, got {order}")


def savitzky_golay(signal, window: int = DEFAULT_WINDOW, order: int = DEFAULT_ORDER) -> np.ndarray:
    """Savitzky-Golay smoothing with point-mirror padding at both ends.

    Padding reflects samples through the end point (``2*x[0] - x[k]``), so any
    straight line passes through unchanged, edges included.
    """
    signal = np.asarray(signal, dtype=float)
    coeffs = sg_coefficients(window, order)
    if signal.ndim != 1 or len(signal) < window:
        raise ConfigurationError(f"signal of length {len(signal)} is shorter than window {window}")
    half = window // 2
    padded = np.pad(signal, half, mode="reflect", reflect_type="odd")
    return np.correlate(padded, coeffs, mode="valid")


def _fit_window(n, window, order):
    """Largest usable odd window for a branch of ``n`` samples, or None."""
    window = min(window, n if n % 2 else n - 1)
    return window if window > order else None


def denoise(curve: StressStrainCurve, window: int = DEFAULT_WINDOW, order: int = DEFAULT_ORDER):
    """Smooth the stress of each branch separately; short branches shrink the window."""
    _check_sg(window, order)
    stress = curve.stress.copy()
    for sl in (slice(0, curve.split), slice(curve.split, None)):
        branch = stress[sl]
        w = _fit_window(len(branch), window, order)
        if w is not None:
            stress[sl] = savitzky_golay(branch, w, order)
    return StressStrainCurve(curve.strain.copy(), stress, curve.split)


def _ascending(strain, stress):
    return (strain, stress) if len(strain) < 2 or strain[-1] >= strain[0] else (strain[::-1], stress[::-1])


def _branch_at(strain, stress, grid):
    s, e = _ascending(strain, stress)
    return np.interp(grid, s, e)


def average_replicates(curves) -> StressStrainCurve:
    """Pointwise mean of replicate curves.

    Replicates sharing identical strain samples are averaged directly.
    Otherwise every branch is interpolated onto an even grid over
    ``[0, min eps_max]`` and then averaged.
    """
    curves = list(curves)
    if not curves:
        raise CurveError("no replicate curves to average")
    for c in curves:
        if c.split < 2 or len(c.strain) - c.split < 2:
            raise CurveError("each replicate needs >= 2 loading and >= 2 unloading samples")
    if len(curves) == 1:
        return curves[0]
    first = curves[0]
    if all(c.split == first.split and np.array_equal(c.strain, first.strain) for c in curves):
        stress = np.mean([c.stress for c in curves], axis=0)
        return StressStrainCurve(first.strain.copy(), stress, first.split)
    eps = min(c.eps_max for c in curves)
    n = max(max(c.split, len(c.strain) - c.split) for c in curves)
    grid = canonical_grid(eps, n)
    load = np.mean([_branch_at(*c.loading, grid) for c in curves], axis=0)
    unload = np.mean([_branch_at(*c.unloading, grid) for c in curves], axis=0)
    return StressStrainCurve.from_branches(grid, load, grid[::-1], unload[::-1])


def canonicalize(curve, n: int = CANONICAL_POINTS) -> CanonicalCurve:
    """Resample both branches onto ``n`` even strain points over ``[0, eps_max]``.

    Outside a branch's sampled range the nearest end value is held.
    """
    if isinstance(curve, CanonicalCurve):
        curve = curve.to_curve()
    load_s, load_e = curve.loading
    unload_s, unload_e = curve.unloading
    if len(load_s) < 2 or len(unload_s) < 2:
        raise CurveError("each branch needs at least 2 points to canonicalize")
    grid = canonical_grid(curve.eps_max, n)
    return CanonicalCurve(grid, _branch_at(load_s, load_e, grid), _branch_at(unload_s, unload_e, grid))


def energy_dissipation(curve) -> float:
    """Area between loading and unloading branches, in kJ/m^3, by the trapezoidal rule.

    A `CanonicalCurve` integrates on its own grid.  A raw `StressStrainCurve`
    integrates on the union of both branches' strain samples, which is exact
    for piecewise-linear branches.
    """
    if isinstance(curve, CanonicalCurve):
        return float(np.trapezoid(curve.loading - curve.unloading, curve.strain)) * MPA_TO_KJ_PER_M3
    grid = np.union1d(np.union1d(curve.loading[0], curve.unloading[0]), [0.0])
    gap = _branch_at(*curve.loading, grid) - _branch_at(*curve.unloading, grid)
    return float(np.trapezoid(gap, grid)) * MPA_TO_KJ_PER_M3


def trapezoid_weights(grid) -> np.ndarray:
    """Weights ``q`` with ``q @ y == np.trapezoid(y, grid)``."""
    grid = np.asarray(grid, dtype=float)
    dx = np.diff(grid)
    q = np.zeros(len(grid))
    q[:-1] += dx / 2
    q[1:] += dx / 2
    return q


def process_replicates(curves, window: int = DEFAULT_WINDOW, order: int = DEFAULT_ORDER,
                       n: int = CANONICAL_POINTS):
    """Average, denoise and canonicalize one design's replicates.

    Returns ``(processed_curve, canonical_curve, dissipation_kj_m3)``; the
    dissipation is taken from the processed curve at its native sampling.
    """
    processed = denoise(average_replicates(curves), window, order)
    return processed, canonicalize(processed, n), energy_dissipation(processed)


# ---- CSV interchange: header strain,stress_mpa,phase with phase in {load, unload}

def write_curve_csv(curve: StressStrainCurve, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["strain", "stress_mpa", "phase"])
        for i, (s, e) in enumerate(zip(curve.strain, curve.stress)):
            writer.writerow([repr(float(s)), repr(float(e)), "load" if i < curve.split else "unload"])
    return path


def read_curve_csv(path) -> StressStrainCurve:
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise CurveError(f"{path}: {exc}") from exc
    if not rows or [h.strip() for h in rows[0]] != ["strain", "stress_mpa", "phase"]:
        raise CurveError(f"{path}: expected header 'strain,stress_mpa,phase'")
    strain, stress, phases = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != 3:
            raise CurveError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
        phase = row[2].strip()
        if phase not in ("load", "unload"):
            raise CurveError(f"{path}:{lineno}: phase must be 'load' or 'unload', got {phase!r}")
        try:
            strain.append(float(row[0]))
            stress.append(float(row[1]))
        except ValueError as exc:
            raise CurveError(f"{path}:{lineno}: {exc}") from exc
        phases.append(phase)
    split = phases.count("load")
    if phases != ["load"] * split + ["unload"] * (len(phases) - split):
        raise CurveError(f"{path}: loading rows must precede unloading rows")
    try:
        return StressStrainCurve(strain, stress, split)
    except CurveError as exc:
        raise CurveError(f"{path}: {exc}") from exc


def replicate_file_name(design_id: str, rep: int) -> str:
    return f"{design_id}_rep{rep}.csv"


def parse_replicate_name(path):
    """``(design_id, replicate_number)`` from ``<design-id>_rep<k>.csv``."""
    m = _REPLICATE_NAME.match(Path(path).name)
    if not m:
        raise CurveError(f"{path}: file name must look like '<design-id>_rep<k>.csv'")
    return m["design"], int(m["rep"])
