import subprocess
import sys

import numpy as np
import pytest

from jamfield.cli import main
from jamfield.config import ConfigError, load_config
from jamfield.grid import read_dataset, read_raster

SMALL_SCENE = """
# desk-scale scene small enough for CLI tests
scene.height=16
scene.width=16
scene.cell_size=10.0
scene.n_blocks_x=2
scene.n_blocks_y=2
scene.street_width=2
scene.height_min=0
scene.height_max=0
scene.jammer_row=7.5
scene.jammer_col=8.5
scene.canyon_db=0
scene.noise_precision=1.0
gen.train_size=40
fit.max_iters=200
sweep.max_iters=120
sweep.n_runs=1
sweep.train_sizes=6,20
sweep.lambda_candidates=0
sweep.n_jobs=1
"""


@pytest.fixture()
def small_cfg(tmp_path):
    p = tmp_path / "scene.cfg"
    p.write_text(SMALL_SCENE)
    return str(p)


def _read(path):
    with open(path, "rb") as f:
        return f.read()


class TestConfig:
    def test_defaults_complete(self):
        cfg = load_config()
        cfg.validate()
        echo = cfg.echo()
        assert "scene.height=32" in echo
        assert "prior.p_min=5.0" in echo

    def test_unknown_key_named(self, tmp_path):
        p = tmp_path / "bad.cfg"
        p.write_text("scene.heigth=10\n")
        with pytest.raises(ConfigError, match="scene.heigth"):
            load_config(str(p))

    def test_bad_line_reports_position(self, tmp_path):
        p = tmp_path / "bad.cfg"
        p.write_text("scene.height=16\njust a line\n")
        with pytest.raises(ConfigError, match=":2"):
            load_config(str(p))

    def test_flag_overrides_file(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("scene.seed=5\n")
        cfg = load_config(str(p), {"scene.seed": 9})
        assert cfg["scene.seed"] == 9


class TestGen:
    def test_writes_three_matching_files(self, small_cfg, tmp_path):
        out = tmp_path / "out"
        assert main(["gen", "--config", small_cfg, "--out", str(out)]) == 0
        heights = read_raster(out / "heights.csv")
        field = read_raster(out / "true_field.csv")
        assert heights.spec == field.spec
        ds = read_dataset(out / "dataset.csv", heights)
        assert len(ds) == 40
        assert (out / "effective_config.txt").exists()

    def test_byte_identical_rerun(self, small_cfg, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["gen", "--config", small_cfg, "--out", str(a), "--seed", "3"]) == 0
        assert main(["gen", "--config", small_cfg, "--out", str(b), "--seed", "3"]) == 0
        for name in ("heights.csv", "true_field.csv", "dataset.csv", "effective_config.txt"):
            assert _read(a / name) == _read(b / name), name

    def test_invalid_prior_range_exits_2(self, small_cfg, tmp_path, capsys):
        p = tmp_path / "bad.cfg"
        p.write_text(SMALL_SCENE + "prior.p_min=30\n")
        code = main(["gen", "--config", str(p), "--out", str(tmp_path / "o")])
        assert code == 2
        assert "p_min" in capsys.readouterr().err

    def test_seed_changes_output(self, small_cfg, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        main(["gen", "--config", small_cfg, "--out", str(a), "--seed", "1"])
        main(["gen", "--config", small_cfg, "--out", str(b), "--seed", "2"])
        assert _read(a / "dataset.csv") != _read(b / "dataset.csv")


class TestFit:
    def _gen(self, small_cfg, tmp_path):
        out = tmp_path / "scene"
        main(["gen", "--config", small_cfg, "--out", str(out)])
        return out

    def test_outputs_roundtrip_and_agree_with_summary(self, small_cfg, tmp_path, capsys):
        scene_dir = self._gen(small_cfg, tmp_path)
        out = tmp_path / "fit"
        code = main(
            [
                "fit",
                str(scene_dir / "dataset.csv"),
                str(scene_dir / "heights.csv"),
                "--config",
                small_cfg,
                "--out",
                str(out),
                "--lambda",
                "0",
            ]
        )
        assert code == 0
        stdout = capsys.readouterr().out
        mean = read_raster(out / "field_mean.csv")
        var = read_raster(out / "field_var.csv")
        assert mean.spec.shape == (16, 16) and var.units == "dbw2"
        assert np.all(var.values[var.mask] >= 0)
        header, row = (out / "estimate.csv").read_text().splitlines()
        cols = dict(zip(header.split(","), row.split(",")))
        assert f"theta_hat_cells=({cols['theta_row_cells']},{cols['theta_col_cells']})" in stdout
        assert float(cols["lambda"]) == 0.0
        # near-exact recovery on the PL-realizable scene
        assert abs(float(cols["theta_row_cells"]) - 7.5) < 0.5
        assert abs(float(cols["theta_col_cells"]) - 8.5) < 0.5

    def test_byte_identical_rerun(self, small_cfg, tmp_path):
        scene_dir = self._gen(small_cfg, tmp_path)
        outs = []
        for name in ("f1", "f2"):
            out = tmp_path / name
            main(
                [
                    "fit",
                    str(scene_dir / "dataset.csv"),
                    str(scene_dir / "heights.csv"),
                    "--config",
                    small_cfg,
                    "--out",
                    str(out),
                    "--lambda",
                    "0",
                ]
            )
            outs.append(out)
        for name in ("estimate.csv", "field_mean.csv", "field_var.csv", "effective_config.txt"):
            assert _read(outs[0] / name) == _read(outs[1] / name), name

    def test_missing_input_exits_3(self, small_cfg, tmp_path, capsys):
        code = main(
            ["fit", str(tmp_path / "nope.csv"), str(tmp_path / "nope2.csv"),
             "--config", small_cfg, "--out", str(tmp_path / "o")]
        )
        assert code == 3

    def test_malformed_dataset_exits_3(self, small_cfg, tmp_path, capsys):
        scene_dir = self._gen(small_cfg, tmp_path)
        bad = tmp_path / "bad.csv"
        bad.write_text("row,col,rss_dbw\n3,3,not-a-number\n")
        code = main(
            ["fit", str(bad), str(scene_dir / "heights.csv"),
             "--config", small_cfg, "--out", str(tmp_path / "o")]
        )
        assert code == 3
        assert "line 2" in capsys.readouterr().err


class TestSweep:
    def test_rows_schema_and_determinism(self, small_cfg, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["sweep", "--config", small_cfg, "--out", str(a)]) == 0
        assert main(["sweep", "--config", small_cfg, "--out", str(b)]) == 0
        la = (a / "sweep.csv").read_text().splitlines()
        lb = (b / "sweep.csv").read_text().splitlines()
        assert la[0] == "n_train,seed,loc_error_m,posterior_std_m,test_rmse_dbw,test_rmpv_dbw,lambda_selected,wall_time_s"
        assert len(la) == 1 + 2  # header + |sizes| * n_runs
        # identical apart from the timing column
        for ra, rb in zip(la, lb):
            assert ra.split(",")[:-1] == rb.split(",")[:-1]

    def test_assert_trend_pass(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text(SMALL_SCENE.replace("sweep.train_sizes=6,20", "sweep.train_sizes=4,100")
                       .replace("sweep.n_runs=1", "sweep.n_runs=3"))
        code = main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "o"), "--assert-trend"])
        assert code == 0

    def test_assert_trend_fail_exits_4(self, tmp_path, capsys):
        # duplicated size: medians tie, so the trend cannot strictly improve
        cfg = tmp_path / "c.cfg"
        cfg.write_text(SMALL_SCENE.replace("sweep.train_sizes=6,20", "sweep.train_sizes=20,20"))
        code = main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "o"), "--assert-trend"])
        assert code == 4


class TestConsoleScript:
    def test_entry_point_runs(self, small_cfg, tmp_path):
        proc = subprocess.run(
            [sys.executable, "-m", "jamfield.cli", "gen", "--config", small_cfg,
             "--out", str(tmp_path / "o")],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 0, proc.stderr
        assert "dataset.csv" in proc.stdout
