"""Synthetic sensor-grid data, CSV ingestion, normalization, and input noise."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_ROW_SUM_TOL = 1e-9


@dataclass(frozen=True)
class GridGeometry:
    """Cell positions of a 2-D sensor grid; distances between cells define the
    transport ground metric."""

    coords: np.ndarray  # (C, 2) float64

    def __post_init__(self) -> None:
        c = np.asarray(self.coords, dtype=np.float64)
        if c.ndim != 2 or c.shape[1] != 2 or c.shape[0] < 1:
            raise ValueError(f"coords must be (C, 2) with C >= 1, got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("coordinates must be finite")
        object.__setattr__(self, "coords", c)

    @property
    def n_cells(self) -> int:
        return self.coords.shape[0]

    def distance_matrix(self) -> np.ndarray:
        d = self.coords[:, None, :] - self.coords[None, :, :]
        return np.sqrt((d * d).sum(-1))

    @classmethod
    def rectangular(cls, nx: int = 8, ny: int = 6, spacing: float = 1.0) -> "GridGeometry":
        xs, ys = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
        return cls(np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64) * spacing)


def default_geometry() -> GridGeometry:
    return GridGeometry.rectangular(8, 6)


def normalize_rows(samples: np.ndarray) -> np.ndarray:
    """Scale each row to unit sum. Rows must be nonnegative with positive sum.
    Rows already within 1e-12 of unit sum pass through untouched, which makes
    the operation idempotent despite float division."""
    s = np.asarray(samples, dtype=np.float64)
    if np.any(s < 0):
        raise ValueError("samples must be nonnegative")
    sums = s.sum(axis=1, keepdims=True)
    if np.any(sums <= 0):
        bad = int(np.argwhere(sums.ravel() <= 0)[0, 0])
        raise ValueError(f"row {bad} has zero total energy and cannot be normalized")
    keep = np.abs(sums - 1.0) <= 1e-12
    return np.where(keep, s, s / sums)


@dataclass(frozen=True)
class Dataset:
    samples: np.ndarray  # (n, C), rows nonnegative, unit sum
    geometry: GridGeometry
    seed: int | None = None

    def __post_init__(self) -> None:
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 2 or s.shape[1] != self.geometry.n_cells:
            raise ValueError(
                f"samples shape {s.shape} does not match geometry C={self.geometry.n_cells}"
            )
        if np.any(s < 0):
            raise ValueError("samples must be nonnegative")
        if s.shape[0] and np.abs(s.sum(axis=1) - 1.0).max() > _ROW_SUM_TOL:
            raise ValueError("rows must sum to 1 within 1e-9 (use normalize_rows)")
        object.__setattr__(self, "samples", s)

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    def cell_rms(self) -> np.ndarray:
        """Per-cell root-mean-square over samples; the noise scale reference."""
        return np.sqrt(np.mean(self.samples**2, axis=0))


@dataclass(frozen=True)
class BlobConfig:
    """Gaussian-blob generator settings. Ranges are inclusive uniform draws.
    ``photons`` sets Poisson statistics (expected counts for unit intensity);
    None disables fluctuation. ``center`` pins every blob to one position."""

    n_blobs: tuple[int, int] = (1, 3)
    width: tuple[float, float] = (0.5, 2.0)
    amplitude: tuple[float, float] = (0.5, 1.5)
    photons: float | None = 200.0
    center: tuple[float, float] | None = None


def gen_synthetic(
    n: int,
    seed: int,
    geometry: GridGeometry | None = None,
    blobs: BlobConfig = BlobConfig(),
) -> Dataset:
    """Deterministic synthetic shower-like samples: 1-3 Gaussian blobs sampled
    at the cell positions, Poisson-fluctuated, floored at zero, row-normalized."""
    if n < 1:
        raise ValueError("n must be >= 1")
    geom = geometry if geometry is not None else default_geometry()
    rng = np.random.default_rng(seed)
    coords = geom.coords
    lo = coords.min(axis=0)
    hi = coords.max(axis=0)
    out = np.empty((n, geom.n_cells))
    for r in range(n):
        while True:
            k = rng.integers(blobs.n_blobs[0], blobs.n_blobs[1] + 1)
            intensity = np.zeros(geom.n_cells)
            for _ in range(k):
                if blobs.center is not None:
                    c = np.asarray(blobs.center, dtype=np.float64)
                else:
                    c = rng.uniform(lo, hi)
                sigma = rng.uniform(*blobs.width)
                amp = rng.uniform(*blobs.amplitude)
                d2 = ((coords - c) ** 2).sum(axis=1)
                intensity += amp * np.exp(-0.5 * d2 / (sigma * sigma))
            if blobs.photons is not None:
                intensity = rng.poisson(intensity * blobs.photons) / blobs.photons
            intensity = np.maximum(intensity, 0.0)
            total = intensity.sum()
            if total > 0:
                out[r] = intensity / total
                break
    return Dataset(samples=out, geometry=geom, seed=seed)


def load_geometry_csv(path: str | Path) -> GridGeometry:
    """Geometry file: one `x,y` row per cell."""
    rows = []
    with open(path, newline="") as fh:
        for ln, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if len(row) != 2:
                raise ValueError(f"{path}: row {ln}: expected 2 fields, got {len(row)}")
            try:
                rows.append((float(row[0]), float(row[1])))
            except ValueError as e:
                raise ValueError(f"{path}: row {ln}: {e}") from None
    if not rows:
        raise ValueError(f"{path}: empty geometry file")
    return GridGeometry(np.array(rows))


def load_csv(path: str | Path, geometry: GridGeometry) -> Dataset:
    """Data file: C numeric fields per row, no header. Rows are normalized to
    unit sum; negative or zero-sum rows are rejected with their row number."""
    c = geometry.n_cells
    samples = []
    with open(path, newline="") as fh:
        for ln, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if len(row) != c:
                raise ValueError(f"{path}: row {ln}: expected {c} fields, got {len(row)}")
            try:
                vals = np.array([float(v) for v in row])
            except ValueError:
                raise ValueError(f"{path}: row {ln}: non-numeric field") from None
            if not np.all(np.isfinite(vals)):
                raise ValueError(f"{path}: row {ln}: non-finite value")
            if np.any(vals < 0):
                raise ValueError(f"{path}: row {ln}: negative value")
            if vals.sum() <= 0:
                raise ValueError(f"{path}: row {ln}: zero-sum row")
            samples.append(vals / vals.sum())
    if not samples:
        raise ValueError(f"{path}: no data rows")
    return Dataset(samples=np.array(samples), geometry=geometry)


@dataclass(frozen=True)
class NoiseSpec:
    level: float = 0.05
    kind: str = "gaussian-additive"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.level < 0:
            raise ValueError("noise level must be >= 0")
        if self.kind != "gaussian-additive":
            raise ValueError(f"unknown noise kind {self.kind!r}")


def add_noise(x: np.ndarray, spec: NoiseSpec, cell_rms: np.ndarray | None = None) -> np.ndarray:
    """Pre-encoder sensor corruption: x' = max(0, x + level * rms * g) with g
    standard normal per entry. ``cell_rms`` defaults to the per-cell RMS of the
    batch itself. Rows are deliberately not renormalized."""
    x = np.asarray(x, dtype=np.float64)
    batch = x if x.ndim == 2 else x[None, :]
    if spec.level == 0.0:
        return x.copy()
    r = np.asarray(cell_rms, dtype=np.float64) if cell_rms is not None else np.sqrt(
        np.mean(batch**2, axis=0)
    )
    rng = np.random.default_rng(spec.seed)
    noisy = np.maximum(batch + spec.level * r * rng.standard_normal(batch.shape), 0.0)
    return noisy if x.ndim == 2 else noisy[0]
