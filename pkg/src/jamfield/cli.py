"""Command-line entry point: scene generation, single-shot estimation, and
Monte-Carlo sweeps.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 inference
failure. All outputs are written atomically (temp file, then rename).
"""

from __future__ import annotations

import argparse
import os
import sys
import tempfile

import numpy as np

from .config import ConfigError, load_config
from .evaluation import RESULT_COLUMNS, run_mc, write_results_csv
from .grid import GridError, read_dataset, read_raster, write_dataset, write_raster
from .inference import InferenceError, fit_pipeline, predict_field
from .pooling import build_context
from .scene import SceneError, gen_buildings, gen_true_field, sample_dataset

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_INFERENCE = 4


def _atomic_write(path: str, writer) -> None:
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_text(path: str, text: str) -> None:
    def w(tmp):
        with open(tmp, "w") as f:
            f.write(text)

    _atomic_write(path, w)


def _ensure_outdir(out: str) -> None:
    try:
        os.makedirs(out, exist_ok=True)
    except OSError as e:
        raise IOError(f"cannot create output directory {out}: {e}") from e


def _fmt(x: float) -> str:
    return repr(float(x))


def cmd_gen(cfg, out: str) -> int:
    _ensure_outdir(out)
    scene = cfg.scene()
    heights = gen_buildings(scene)
    true_field = gen_true_field(heights, scene)
    n = cfg["gen.train_size"]
    ds = sample_dataset(true_field, scene, n, scene.seed)

    _atomic_write(os.path.join(out, "heights.csv"), lambda p: write_raster(p, heights))
    _atomic_write(os.path.join(out, "true_field.csv"), lambda p: write_raster(p, true_field))
    _atomic_write(os.path.join(out, "dataset.csv"), lambda p: write_dataset(p, ds))
    _write_text(os.path.join(out, "effective_config.txt"), cfg.echo())
    print(f"wrote heights.csv, true_field.csv, dataset.csv ({n} measurements) to {out}")
    return EXIT_OK


def cmd_fit(dataset_path: str, heights_path: str, cfg, out: str) -> int:
    _ensure_outdir(out)
    heights = read_raster(heights_path)
    ds = read_dataset(dataset_path, heights)
    ctx = build_context(heights, cfg.arch())

    res = fit_pipeline(
        ds,
        cfg.pooling(),
        cfg.priors(),
        cfg.fit(),
        ctx,
        candidates=cfg["fit.lambda_candidates"],
        lam=cfg.fixed_lambda(),
    )
    pool = cfg.pooling(res.lam)
    mean, var = predict_field(res.posterior, pool, ctx)

    psi = res.map_fit.psi
    cell = heights.spec.cell_size
    sig = res.posterior.sigma_theta
    header = (
        "theta_row_cells,theta_col_cells,theta_row_m,theta_col_m,"
        "p0_dbw,gamma,lambda,sigma_rr_cells2,sigma_rc_cells2,sigma_cc_cells2"
    )
    row = ",".join(
        _fmt(v)
        for v in (
            psi.theta[0],
            psi.theta[1],
            psi.theta[0] * cell,
            psi.theta[1] * cell,
            psi.p0,
            psi.gamma,
            res.lam,
            sig[0, 0],
            sig[0, 1],
            sig[1, 1],
        )
    )
    _write_text(os.path.join(out, "estimate.csv"), header + "\n" + row + "\n")
    _atomic_write(os.path.join(out, "field_mean.csv"), lambda p: write_raster(p, mean))
    _atomic_write(os.path.join(out, "field_var.csv"), lambda p: write_raster(p, var))
    _write_text(os.path.join(out, "effective_config.txt"), cfg.echo())
    print(
        f"theta_hat_cells=({_fmt(psi.theta[0])},{_fmt(psi.theta[1])}) "
        f"p0={_fmt(psi.p0)} gamma={_fmt(psi.gamma)} lambda={_fmt(res.lam)}"
    )
    return EXIT_OK


def cmd_sweep(cfg, out: str, assert_trend: bool = False) -> int:
    _ensure_outdir(out)
    scene = cfg.scene()
    results = run_mc(
        scene,
        cfg["sweep.train_sizes"],
        cfg["sweep.n_runs"],
        pooling=cfg.pooling(),
        priors=cfg.priors(),
        fit=cfg.fit(max_iters=cfg["sweep.max_iters"]),
        candidates=cfg["sweep.lambda_candidates"],
        lam=cfg.fixed_lambda(),
        master_seed=cfg["sweep.seed"],
        n_jobs=cfg["sweep.n_jobs"],
    )
    _atomic_write(os.path.join(out, "sweep.csv"), lambda p: write_results_csv(p, results))
    _write_text(os.path.join(out, "effective_config.txt"), cfg.echo())
    print(f"wrote sweep.csv with {len(results)} rows, columns: {','.join(RESULT_COLUMNS)}")

    if assert_trend:
        sizes = sorted({r.n_train for r in results})
        lo, hi = sizes[0], sizes[-1]
        med = {
            n: float(np.median([r.loc_error_m for r in results if r.n_train == n]))
            for n in (lo, hi)
        }
        print(f"median loc_error at n={lo}: {med[lo]:.2f} m; at n={hi}: {med[hi]:.2f} m")
        if not med[hi] < med[lo]:
            print("trend assertion FAILED: localization error did not improve", file=sys.stderr)
            return EXIT_INFERENCE
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="jamfield",
        description="Joint jammer localization and RSS field reconstruction",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="master seed override")
        p.add_argument("--lambda", dest="lam", type=float, help="fix the pooling weight")

    g = sub.add_parser("gen", help="generate a synthetic scene and dataset")
    common(g)
    g.add_argument("--train-size", type=int, help="number of measurements to sample")

    f = sub.add_parser("fit", help="estimate jammer position and field from files")
    f.add_argument("dataset", help="dataset CSV (row,col,rss_dbw)")
    f.add_argument("heights", help="building-heights raster CSV")
    common(f)
    f.add_argument("--train-size", type=int, help=argparse.SUPPRESS)

    s = sub.add_parser("sweep", help="Monte-Carlo sweep over training sizes")
    common(s)
    s.add_argument("--train-size", type=int, help=argparse.SUPPRESS)
    s.add_argument(
        "--assert-trend",
        action="store_true",
        help="exit nonzero unless median localization error improves with size",
    )
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {}
    if args.seed is not None:
        overrides.update(
            {"scene.seed": args.seed, "fit.seed": args.seed, "sweep.seed": args.seed}
        )
    if args.lam is not None:
        overrides["pooling.lambda"] = args.lam
    if getattr(args, "train_size", None) is not None:
        overrides["gen.train_size"] = args.train_size

    try:
        cfg = load_config(args.config, overrides)
        cfg.validate()
        if args.command == "gen":
            return cmd_gen(cfg, args.out)
        if args.command == "fit":
            return cmd_fit(args.dataset, args.heights, cfg, args.out)
        return cmd_sweep(cfg, args.out, assert_trend=args.assert_trend)
    except (ConfigError, SceneError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, GridError) as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO
    except InferenceError as e:
        print(f"inference error: {e}", file=sys.stderr)
        return EXIT_INFERENCE


if __name__ == "__main__":
    sys.exit(main())
