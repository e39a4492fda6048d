"""Synthetic desk-scale urban scenes.

Stand-in for ray-traced data: Manhattan-style building blocks, an analytic
ground-truth RSS field with per-cell shadowing and a street-canyon bonus, and
seeded measurement sampling. Everything is a pure function of (config, seed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .grid import Dataset, FieldRaster, GridSpec, Measurement, outdoor_mask

__all__ = [
    "SceneConfig",
    "SceneError",
    "gen_buildings",
    "gen_true_field",
    "sample_dataset",
    "cells_crossed",
]

# Matches the path-loss expert's singularity guard so a building-free,
# canyon-free scene is exactly realizable by that expert.
EPSILON_M = 1.0


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    seed: int
    grid: GridSpec
    n_blocks_x: int = 4
    n_blocks_y: int = 4
    street_width: int = 3
    height_range: tuple[float, float] = (10.0, 40.0)
    jammer_true: tuple[float, float] = (16.0, 19.0)
    p0_true: float = 10.0
    gamma_true: float = 2.5
    shadow_db_per_building: float = 0.5
    canyon_gain_db: float = 2.0
    noise_precision: float = 4.0

    def __post_init__(self):
        if self.gamma_true < 1:
            raise SceneError(f"gamma_true must be >= 1, got {self.gamma_true}")
        if not (self.noise_precision > 0):
            raise SceneError("noise_precision must be positive")
        if self.street_width < 1 or self.n_blocks_x < 1 or self.n_blocks_y < 1:
            raise SceneError("block layout parameters must be positive")
        if self.canyon_gain_db < 0 or self.shadow_db_per_building <= 0:
            raise SceneError("canyon_gain_db must be >= 0 and shadow_db_per_building > 0")


def _axis_layout(n_cells: int, n_blocks: int, street: int) -> list[tuple[int, int]]:
    """Block spans [(start, stop), ...] along one axis.

    Layout is street, block, street, ..., block, street; blocks absorb the
    remainder so the axis is covered exactly.
    """
    total_block = n_cells - (n_blocks + 1) * street
    if total_block < n_blocks:
        raise SceneError(
            f"street_width {street} leaves no room for {n_blocks} blocks over {n_cells} cells"
        )
    base, rem = divmod(total_block, n_blocks)
    spans = []
    pos = street
    for b in range(n_blocks):
        w = base + (1 if b < rem else 0)
        spans.append((pos, pos + w))
        pos += w + street
    return spans


def gen_buildings(cfg: SceneConfig) -> FieldRaster:
    """Manhattan block layout; block heights uniform over height_range, streets 0."""
    g = cfg.grid
    rows = _axis_layout(g.height, cfg.n_blocks_y, cfg.street_width)
    cols = _axis_layout(g.width, cfg.n_blocks_x, cfg.street_width)
    rng = np.random.default_rng(cfg.seed)
    lo, hi = cfg.height_range
    heights = np.zeros(g.shape)
    for r0, r1 in rows:
        for c0, c1 in cols:
            heights[r0:r1, c0:c1] = rng.uniform(lo, hi)
    return FieldRaster(g, heights, units="m")


def cells_crossed(a, b) -> list[tuple[int, int]]:
    """Cells whose interior the segment a-b crosses with positive length.

    Positions are (row, col) in cell coordinates with cell centers at the
    integers; cell (r, c) covers [r-1/2, r+1/2] x [c-1/2, c+1/2]. Zero-length
    corner touches are excluded, which keeps the traversal exactly invariant
    under grid isometries.
    """
    ar, ac = float(a[0]), float(a[1])
    br, bc = float(b[0]), float(b[1])
    dr, dc = br - ar, bc - ac
    ts = [0.0, 1.0]
    for a0, d0 in ((ar, dr), (ac, dc)):
        if d0 == 0.0:
            continue
        lo, hi = sorted((a0, a0 + d0))
        k = math.floor(lo + 0.5)
        while k + 0.5 < hi:
            if k + 0.5 > lo:
                ts.append((k + 0.5 - a0) / d0)
            k += 1
    ts.sort()
    cells = []
    seen = set()
    for t0, t1 in zip(ts[:-1], ts[1:]):
        if t1 - t0 < 1e-12:
            continue
        tm = 0.5 * (t0 + t1)
        cell = (math.floor(ar + tm * dr + 0.5), math.floor(ac + tm * dc + 0.5))
        if cell not in seen:
            seen.add(cell)
            cells.append(cell)
    return cells


def _blocking_count(heights: np.ndarray, p, jammer) -> int:
    return sum(
        1
        for (r, c) in cells_crossed(p, jammer)
        if 0 <= r < heights.shape[0] and 0 <= c < heights.shape[1] and heights[r, c] > 0
    )


def gen_true_field(heights: FieldRaster, cfg: SceneConfig) -> FieldRaster:
    """Analytic ground-truth RSS: log-distance path loss, minus a fixed dB
    penalty per in-building cell crossed by the line of sight, plus a canyon
    bonus on the jammer's own unobstructed street axes."""
    g = cfg.grid
    mask = outdoor_mask(heights)
    jr, jc = cfg.jammer_true
    jcell = (int(round(jr)), int(round(jc)))
    if not g.contains(jcell) or not mask[jcell]:
        raise SceneError(f"jammer at {cfg.jammer_true} is inside a building")

    rr, cc = np.meshgrid(np.arange(g.height), np.arange(g.width), indexing="ij")
    dist_m = g.cell_size * np.hypot(rr - jr, cc - jc)
    values = cfg.p0_true - 10.0 * cfg.gamma_true * np.log10(dist_m + EPSILON_M)

    h = heights.values
    if np.any(h > 0):
        for r, c in np.argwhere(mask):
            n_block = _blocking_count(h, (float(r), float(c)), (jr, jc))
            values[r, c] -= cfg.shadow_db_per_building * n_block
            if (r == jcell[0] or c == jcell[1]) and n_block == 0:
                values[r, c] += cfg.canyon_gain_db
    elif cfg.canyon_gain_db != 0.0:
        values[jcell[0], :] += cfg.canyon_gain_db
        values[:, jcell[1]] += cfg.canyon_gain_db
        values[jcell] -= cfg.canyon_gain_db
    values[~mask] = 0.0
    return FieldRaster(g, values, mask, units="dbw")


def sample_dataset(field: FieldRaster, cfg: SceneConfig, n: int, seed: int) -> Dataset:
    """n distinct mask-true positions uniformly without replacement; RSS
    observed with additive Gaussian noise of precision cfg.noise_precision."""
    cells = np.argwhere(field.mask)
    if n > len(cells):
        raise SceneError(f"requested {n} samples but only {len(cells)} outdoor cells")
    if n < 1:
        raise SceneError("need at least one sample")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(cells), size=n, replace=False)
    noise = rng.normal(0.0, 1.0 / math.sqrt(cfg.noise_precision), size=n)
    measurements = [
        Measurement((int(r), int(c)), float(field.values[r, c] + e))
        for (r, c), e in zip(cells[idx], noise)
    ]
    heights = gen_buildings(cfg)
    return Dataset(field.spec, heights, measurements, noise_precision_true=cfg.noise_precision)
