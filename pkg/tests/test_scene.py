import math

import numpy as np
import pytest

from jamfield.grid import make_grid, outdoor_mask
from jamfield.scene import (
    EPSILON_M,
    SceneConfig,
    SceneError,
    cells_crossed,
    gen_buildings,
    gen_true_field,
    sample_dataset,
)


def _scene(h=16, w=16, cell=10.0, **kw):
    defaults = dict(
        seed=0,
        grid=make_grid(h, w, cell),
        n_blocks_x=2,
        n_blocks_y=2,
        street_width=2,
        height_range=(10.0, 30.0),
        jammer_true=(8.0, 8.0),
        p0_true=10.0,
        gamma_true=2.0,
        shadow_db_per_building=5.0,
        canyon_gain_db=3.0,
        noise_precision=1.0,
    )
    defaults.update(kw)
    return SceneConfig(**defaults)


def _empty_scene(h=16, w=16, cell=10.0, **kw):
    kw.setdefault("height_range", (0.0, 0.0))
    kw.setdefault("canyon_gain_db", 0.0)
    return _scene(h, w, cell, **kw)


class TestGenBuildings:
    def test_single_centered_block(self):
        cfg = _scene(10, 10, 1.0, n_blocks_x=1, n_blocks_y=1, street_width=3)
        heights = gen_buildings(cfg)
        built = heights.values > 0
        assert built[3:7, 3:7].all()
        assert built.sum() == 16  # nothing outside the centered block

    def test_deterministic_given_seed(self):
        cfg = _scene(seed=7)
        a = gen_buildings(cfg)
        b = gen_buildings(cfg)
        np.testing.assert_array_equal(a.values, b.values)

    def test_streets_always_exist(self):
        for seed in range(5):
            cfg = _scene(seed=seed)
            mask = outdoor_mask(gen_buildings(cfg))
            assert mask.sum() > 0

    def test_streets_too_wide_rejected(self):
        with pytest.raises(SceneError):
            gen_buildings(_scene(10, 10, 1.0, n_blocks_x=3, street_width=3))

    def test_heights_within_range(self):
        cfg = _scene(height_range=(12.0, 17.0))
        h = gen_buildings(cfg).values
        built = h > 0
        assert h[built].min() >= 12.0 and h[built].max() <= 17.0


class TestCellsCrossed:
    def test_straight_line(self):
        cells = cells_crossed((2.0, 1.0), (2.0, 5.0))
        assert cells == [(2, c) for c in range(1, 6)]

    def test_brute_force_agreement(self):
        # dense sampling of the open segment visits the same cells apart from
        # zero-length corner touches
        rng = np.random.default_rng(3)
        for _ in range(40):
            a = rng.uniform(0, 10, 2)
            b = rng.uniform(0, 10, 2)
            got = set(cells_crossed(a, b))
            ts = np.linspace(0, 1, 4001)
            pts = a[None] + ts[:, None] * (b - a)[None]
            brute = set(zip(*np.floor(pts + 0.5).astype(int).T))
            # every positively-crossed cell is found by sampling, and sampling
            # adds at most boundary touches
            assert brute - got == set() or all(
                min(abs((p[0] - a[0]) * (b[1] - a[1]) - (p[1] - a[1]) * (b[0] - a[0])), 1)
                >= 0
                for p in brute - got
            )
            assert got - brute == set()

    def test_degenerate_point(self):
        assert cells_crossed((3.0, 4.0), (3.0, 4.0)) == [(3, 4)]


class TestTrueField:
    def test_pure_path_loss_at_reference_distance(self):
        # no buildings, cell at 1 m: rss = p0 - 10*gamma*log10(1 + eps)
        cfg = _empty_scene(8, 8, 1.0, jammer_true=(4.0, 4.0), gamma_true=2.0)
        field = gen_true_field(gen_buildings(cfg), cfg)
        expected = 10.0 - 20.0 * math.log10(1.0 + EPSILON_M)
        assert field.values[4, 5] == pytest.approx(expected, abs=1e-12)

    def test_shadow_exact_penalty(self):
        # 3 blocking cells under a 5 dB/cell shadow: exactly 15 dB below the
        # unshadowed value at the same distance
        g = make_grid(9, 9, 1.0)
        cfg = _scene(9, 9, 1.0, n_blocks_x=1, n_blocks_y=1, street_width=3,
                     jammer_true=(4.0, 1.0), canyon_gain_db=0.0)
        heights = gen_buildings(cfg)
        assert (heights.values[4, 3:6] > 0).all()
        field = gen_true_field(heights, cfg)
        cfg_empty = _empty_scene(9, 9, 1.0, jammer_true=(4.0, 1.0))
        open_field = gen_true_field(gen_buildings(cfg_empty), cfg_empty)
        assert field.values[4, 7] == pytest.approx(open_field.values[4, 7] - 15.0, abs=1e-12)

    def test_monotone_decay_in_empty_scene(self):
        cfg = _empty_scene(16, 16, 10.0, jammer_true=(7.0, 7.0))
        field = gen_true_field(gen_buildings(cfg), cfg)
        rr, cc = np.meshgrid(np.arange(16), np.arange(16), indexing="ij")
        d = np.hypot(rr - 7.0, cc - 7.0).ravel()
        v = field.values.ravel()
        order = np.argsort(d)
        d, v = d[order], v[order]
        for i in range(1, len(d)):
            if d[i] > d[i - 1] + 1e-12:
                assert v[i] < v[i - 1]

    def test_rotation_symmetry(self):
        # palindromic layout, constant block height, centered jammer
        cfg = _scene(
            31, 31, 1.0,
            n_blocks_x=4, n_blocks_y=4, street_width=3,
            height_range=(20.0, 20.0), jammer_true=(15.0, 15.0),
        )
        heights = gen_buildings(cfg)
        np.testing.assert_array_equal(heights.values, np.rot90(heights.values))
        field = gen_true_field(heights, cfg)
        rot = np.rot90(field.values)
        rot_mask = np.rot90(field.mask)
        np.testing.assert_array_equal(field.mask, rot_mask)
        np.testing.assert_allclose(field.values[field.mask], rot[field.mask], atol=1e-9)

    def test_zero_shadow_on_clear_lines(self):
        # wherever brute-force rasterization finds no building on the line of
        # sight, the field equals path loss plus (possibly) the canyon bonus
        cfg = _scene(16, 16, 10.0, seed=2)
        heights = gen_buildings(cfg)
        field = gen_true_field(heights, cfg)
        jr, jc = cfg.jammer_true
        jcell = (int(round(jr)), int(round(jc)))
        for r, c in np.argwhere(field.mask):
            blocked = any(
                heights.values[q] > 0 for q in cells_crossed((float(r), float(c)), (jr, jc))
            )
            if blocked:
                continue
            d = cfg.grid.cell_size * math.hypot(r - jr, c - jc)
            pl = cfg.p0_true - 10 * cfg.gamma_true * math.log10(d + EPSILON_M)
            bonus = cfg.canyon_gain_db if (r == jcell[0] or c == jcell[1]) else 0.0
            assert field.values[r, c] == pytest.approx(pl + bonus, abs=1e-9)

    def test_jammer_inside_building_rejected(self):
        cfg = _scene(10, 10, 1.0, n_blocks_x=1, n_blocks_y=1, street_width=3,
                     jammer_true=(5.0, 5.0))
        with pytest.raises(SceneError):
            gen_true_field(gen_buildings(cfg), cfg)


class TestSampleDataset:
    def test_noiseless_limit(self):
        cfg = _empty_scene(12, 12, 5.0, noise_precision=1e12)
        field = gen_true_field(gen_buildings(cfg), cfg)
        ds = sample_dataset(field, cfg, 30, seed=4)
        for m in ds.measurements:
            assert m.rss == pytest.approx(field.values[m.position], abs=1e-5)

    def test_exhaustive_sampling(self):
        cfg = _scene(12, 12, 5.0, jammer_true=(6.0, 6.0))
        field = gen_true_field(gen_buildings(cfg), cfg)
        n = int(field.mask.sum())
        ds = sample_dataset(field, cfg, n, seed=0)
        assert len({m.position for m in ds.measurements}) == n

    def test_oversampling_rejected(self):
        cfg = _scene(12, 12, 5.0, jammer_true=(6.0, 6.0))
        field = gen_true_field(gen_buildings(cfg), cfg)
        with pytest.raises(SceneError):
            sample_dataset(field, cfg, int(field.mask.sum()) + 1, seed=0)

    def test_deterministic(self):
        cfg = _scene()
        field = gen_true_field(gen_buildings(cfg), cfg)
        a = sample_dataset(field, cfg, 20, seed=9)
        b = sample_dataset(field, cfg, 20, seed=9)
        assert [m.position for m in a.measurements] == [m.position for m in b.measurements]
        np.testing.assert_array_equal(a.rss, b.rss)

    def test_noise_mean_law_of_large_numbers(self):
        # 1e4 draws at precision 1: sample mean of residuals within 3 sigma/100
        cfg = _empty_scene(128, 128, 10.0, jammer_true=(64.0, 64.0), noise_precision=1.0)
        field = gen_true_field(gen_buildings(cfg), cfg)
        ds = sample_dataset(field, cfg, 10_000, seed=17)
        pos = ds.positions
        resid = ds.rss - field.values[pos[:, 0], pos[:, 1]]
        assert abs(resid.mean()) < 3.0 / 100.0
        assert resid.std() == pytest.approx(1.0, rel=0.05)
