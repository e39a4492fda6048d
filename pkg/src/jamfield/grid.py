"""Discrete spatial domain: grid, rasters over it, and measurement datasets.

Grid indices are (row, col) integer pairs. Continuous positions (such as the
transmitter estimate) live in the same frame, measured in cells; cell_size
converts to meters only at reporting boundaries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "GridSpec",
    "FieldRaster",
    "Measurement",
    "Dataset",
    "make_grid",
    "raster_at",
    "outdoor_mask",
    "write_raster",
    "read_raster",
    "write_dataset",
    "read_dataset",
]


class GridError(ValueError):
    """Invalid grid construction or indexing."""


@dataclass(frozen=True)
class GridSpec:
    """An H x W grid of square cells, cell_size meters per cell."""

    height: int
    width: int
    cell_size: float

    def __post_init__(self):
        if self.height < 2 or self.width < 2:
            raise GridError(f"grid must be at least 2x2, got {self.height}x{self.width}")
        if not (self.cell_size > 0):
            raise GridError(f"cell_size must be positive, got {self.cell_size}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def n_cells(self) -> int:
        return self.height * self.width

    def contains(self, p) -> bool:
        r, c = p
        return 0 <= r < self.height and 0 <= c < self.width

    def check_index(self, p) -> tuple[int, int]:
        r, c = int(p[0]), int(p[1])
        if not self.contains((r, c)):
            raise GridError(f"index {p!r} outside {self.height}x{self.width} grid")
        return r, c

    def distance_m(self, a, b) -> float:
        """Euclidean distance between two positions (cells), in meters."""
        return self.cell_size * math.hypot(a[0] - b[0], a[1] - b[1])


def make_grid(h: int, w: int, cell_size: float) -> GridSpec:
    if h <= 0 or w <= 0:
        raise GridError(f"grid dimensions must be positive, got {h}x{w}")
    return GridSpec(int(h), int(w), float(cell_size))


@dataclass
class FieldRaster:
    """A scalar field over a grid with a validity mask (True = valid outdoor cell).

    Units are declared per instance: "m" for heights, "dbw" for RSS,
    "dbw2" for predictive variance.
    """

    spec: GridSpec
    values: np.ndarray
    mask: np.ndarray = None
    units: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.spec.shape:
            raise GridError(
                f"values shape {self.values.shape} does not match grid {self.spec.shape}"
            )
        if self.mask is None:
            self.mask = np.ones(self.spec.shape, dtype=bool)
        else:
            self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != self.spec.shape:
            raise GridError(
                f"mask shape {self.mask.shape} does not match grid {self.spec.shape}"
            )
        if self.units == "dbw2" and np.any(self.values[self.mask] < 0):
            raise GridError("variance raster has negative values on masked cells")


def raster_at(r: FieldRaster, p) -> float:
    """Value of the raster at grid index p; rejects out-of-bounds and masked cells."""
    i, j = r.spec.check_index(p)
    if not r.mask[i, j]:
        raise GridError(f"cell {p!r} is masked (inside a building)")
    return float(r.values[i, j])


def outdoor_mask(heights: FieldRaster) -> np.ndarray:
    """Valid outdoor cells: a cell is in-building iff its height is positive."""
    return heights.values <= 0.0


@dataclass(frozen=True)
class Measurement:
    position: tuple[int, int]
    rss: float


@dataclass
class Dataset:
    """Measurement set over one scene; noise_precision_true is generator
    metadata for synthetic data and is never read by inference."""

    spec: GridSpec
    heights: FieldRaster
    measurements: list[Measurement] = field(default_factory=list)
    noise_precision_true: float | None = None

    def __post_init__(self):
        if len(self.measurements) < 1:
            raise GridError("dataset needs at least one measurement")
        mask = outdoor_mask(self.heights)
        seen = set()
        for m in self.measurements:
            i, j = self.spec.check_index(m.position)
            if not mask[i, j]:
                raise GridError(f"measurement at {m.position} is inside a building")
            if (i, j) in seen:
                raise GridError(f"duplicate measurement position {m.position}")
            seen.add((i, j))

    def __len__(self) -> int:
        return len(self.measurements)

    @property
    def positions(self) -> np.ndarray:
        return np.array([m.position for m in self.measurements], dtype=int)

    @property
    def rss(self) -> np.ndarray:
        return np.array([m.rss for m in self.measurements], dtype=float)


# ---------------------------------------------------------------------------
# File formats.
#
# Raster: first line "H,W,cell_size,units", then H lines of W comma-separated
# reals (row-major). Masked cells are written as nan and recovered on read.
# Dataset: header "row,col,rss_dbw", one measurement per line.
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def write_raster(path, raster: FieldRaster) -> None:
    lines = [f"{raster.spec.height},{raster.spec.width},{_fmt(raster.spec.cell_size)},{raster.units}"]
    vals = np.where(raster.mask, raster.values, np.nan)
    for row in vals:
        lines.append(",".join(_fmt(v) for v in row))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_raster(path) -> FieldRaster:
    with open(path) as f:
        header = f.readline().strip()
        parts = header.split(",")
        if len(parts) != 4:
            raise GridError(f"{path}: bad raster header {header!r}")
        h, w, cell_size, units = int(parts[0]), int(parts[1]), float(parts[2]), parts[3]
        values = np.empty((h, w), dtype=float)
        for i in range(h):
            line = f.readline()
            if not line:
                raise GridError(f"{path}: expected {h} rows, got {i}")
            row = line.strip().split(",")
            if len(row) != w:
                raise GridError(f"{path}: line {i + 2}: expected {w} values, got {len(row)}")
            values[i] = [float(v) for v in row]
    mask = ~np.isnan(values)
    values = np.where(mask, values, 0.0)
    return FieldRaster(make_grid(h, w, cell_size), values, mask, units)


def write_dataset(path, ds: Dataset) -> None:
    lines = ["row,col,rss_dbw"]
    for m in ds.measurements:
        lines.append(f"{m.position[0]},{m.position[1]},{_fmt(m.rss)}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_dataset(path, heights: FieldRaster) -> Dataset:
    measurements = []
    with open(path) as f:
        header = f.readline().strip()
        if header != "row,col,rss_dbw":
            raise GridError(f"{path}: bad dataset header {header!r}")
        for lineno, line in enumerate(f, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise GridError(f"{path}: line {lineno}: expected row,col,rss")
            try:
                r, c, y = int(parts[0]), int(parts[1]), float(parts[2])
            except ValueError as e:
                raise GridError(f"{path}: line {lineno}: {e}") from e
            measurements.append(Measurement((r, c), y))
    return Dataset(heights.spec, heights, measurements)
