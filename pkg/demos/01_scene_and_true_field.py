#!/usr/bin/env python3
"""Generate a synthetic urban scene and inspect its ground-truth RSS field.

Walks through the scene generator: Manhattan building blocks, the analytic
propagation oracle (path loss + per-cell shadowing + street-canyon bonus),
and seeded measurement sampling. Writes the rasters as CSV next to this
script; renders PNGs as well if matplotlib is importable.
"""

import os

import numpy as np

from jamfield import make_grid, write_dataset, write_raster
from jamfield.scene import SceneConfig, gen_buildings, gen_true_field, sample_dataset

OUT = os.path.join(os.path.dirname(__file__), "out_scene")

scene = SceneConfig(
    seed=0,
    grid=make_grid(32, 32, 15.625),  # 500 m x 500 m at desk scale
    n_blocks_x=4,
    n_blocks_y=4,
    street_width=3,
    height_range=(10.0, 40.0),
    jammer_true=(16.0, 19.0),
    p0_true=10.0,
    gamma_true=2.5,
    shadow_db_per_building=1.0,
    canyon_gain_db=4.0,
    noise_precision=1.0,
)

heights = gen_buildings(scene)
field = gen_true_field(heights, scene)
ds = sample_dataset(field, scene, n=200, seed=0)

outdoor = field.mask
print(f"grid: {scene.grid.height}x{scene.grid.width}, "
      f"{outdoor.sum()} outdoor cells ({100*outdoor.mean():.0f}%)")
print(f"jammer at {scene.jammer_true} (cells), transmit power {scene.p0_true} dBW")
print(f"RSS over outdoor cells: [{field.values[outdoor].min():.1f}, "
      f"{field.values[outdoor].max():.1f}] dBW")

# the canyon effect: the jammer's street row is hotter than the next street over
jrow = int(round(scene.jammer_true[0]))
row_mean = field.values[jrow][outdoor[jrow]].mean()
other = jrow - 7
other_mean = field.values[other][outdoor[other]].mean()
print(f"mean RSS along the jammer's street row: {row_mean:.1f} dBW;"
      f" a parallel street: {other_mean:.1f} dBW")

os.makedirs(OUT, exist_ok=True)
write_raster(os.path.join(OUT, "heights.csv"), heights)
write_raster(os.path.join(OUT, "true_field.csv"), field)
write_dataset(os.path.join(OUT, "dataset.csv"), ds)
print(f"wrote rasters and a 200-point dataset to {OUT}/")

try:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
except ImportError:
    print("matplotlib not available; skipping plots")
else:
    fig, axes = plt.subplots(1, 2, figsize=(11, 5))
    axes[0].imshow(heights.values, cmap="Greys")
    axes[0].set_title("building heights (m)")
    shown = np.where(outdoor, field.values, np.nan)
    im = axes[1].imshow(shown, cmap="viridis")
    axes[1].scatter(scene.jammer_true[1], scene.jammer_true[0], marker="*", c="red", s=150)
    pos = ds.positions
    axes[1].scatter(pos[:, 1], pos[:, 0], s=4, c="white", alpha=0.6)
    axes[1].set_title("true RSS field (dBW), jammer and samples")
    fig.colorbar(im, ax=axes[1], fraction=0.046)
    fig.tight_layout()
    fig.savefig(os.path.join(OUT, "scene.png"), dpi=120)
    print(f"wrote {OUT}/scene.png")
