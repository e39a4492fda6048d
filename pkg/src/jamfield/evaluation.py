"""Metrics and the Monte-Carlo benchmark over training-set sizes.

Each (size, run) pair draws a fresh dataset from the shared scene, runs the
full pipeline (pooling-weight selection, MAP fit, Laplace posterior, field
prediction) and scores it on the held-out mask-true cells. Run seeds are
derived from the master seed per (size, run), so results are identical
whether runs execute serially or across a process pool.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, fields

import numpy as np

from .grid import FieldRaster, GridSpec
from .inference import FitConfig, InferenceError, fit_pipeline, predict_field
from .pooling import PoolingConfig, PriorConfig, build_context
from .scene import SceneConfig, gen_buildings, gen_true_field, sample_dataset

__all__ = ["RunResult", "loc_error", "rmpv", "run_mc", "write_results_csv", "RESULT_COLUMNS"]


@dataclass
class RunResult:
    n_train: int
    seed: int
    loc_error_m: float
    posterior_std_m: float
    test_rmse_dbw: float
    test_rmpv_dbw: float
    lambda_selected: float
    wall_time_s: float

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v) or (f.name != "seed" and v < 0):
                raise ValueError(f"{f.name}={v!r} must be finite and nonnegative")


RESULT_COLUMNS = tuple(f.name for f in fields(RunResult))


def loc_error(theta_hat, theta_true, grid: GridSpec) -> float:
    """Euclidean distance between two positions (cells), in meters."""
    return grid.distance_m(theta_hat, theta_true)


def rmpv(variance: FieldRaster, test_points) -> float:
    """Root mean predictive variance over the test set, dBW."""
    pts = np.asarray(list(test_points), dtype=int)
    if len(pts) == 0:
        raise ValueError("empty test set")
    for p in pts:
        variance.spec.check_index(p)
        if not variance.mask[p[0], p[1]]:
            raise ValueError(f"test point {tuple(p)} is masked")
    return float(np.sqrt(variance.values[pts[:, 0], pts[:, 1]].mean()))


def _posterior_std_m(sigma_theta: np.ndarray, grid: GridSpec) -> float:
    """sqrt of the mean marginal theta variance, converted to meters."""
    return float(np.sqrt(np.trace(sigma_theta) / 2.0)) * grid.cell_size


def _run_seed(master_seed: int, n_train: int, run: int) -> int:
    ss = np.random.SeedSequence([master_seed, n_train, run])
    return int(ss.generate_state(1)[0])


def _single_run(args):
    (scene, n_train, run, master_seed, pooling, priors, fit, candidates, lam) = args
    seed = _run_seed(master_seed, n_train, run)
    t0 = time.perf_counter()

    heights = gen_buildings(scene)
    true_field = gen_true_field(heights, scene)
    ds = sample_dataset(true_field, scene, n_train, seed)
    ctx = build_context(heights)

    res = fit_pipeline(
        ds,
        pooling,
        priors,
        FitConfig(
            max_iters=fit.max_iters,
            learning_rate=fit.learning_rate,
            adam_betas=fit.adam_betas,
            convergence_tol=fit.convergence_tol,
            restarts=fit.restarts,
            seed=seed,
        ),
        ctx,
        candidates=candidates,
        lam=lam,
    )
    mean, var = predict_field(res.posterior, _pool_with(pooling, res.lam), ctx)

    train = {tuple(p) for p in ds.positions}
    test = np.array([p for p in np.argwhere(ctx.mask) if tuple(p) not in train])
    if len(test) == 0:
        raise InferenceError("no held-out cells left for evaluation")
    err = mean.values[test[:, 0], test[:, 1]] - true_field.values[test[:, 0], test[:, 1]]

    return RunResult(
        n_train=n_train,
        seed=seed,
        loc_error_m=loc_error(res.map_fit.psi.theta, scene.jammer_true, scene.grid),
        posterior_std_m=_posterior_std_m(res.posterior.sigma_theta, scene.grid),
        test_rmse_dbw=float(np.sqrt(np.mean(err**2))),
        test_rmpv_dbw=rmpv(var, test),
        lambda_selected=res.lam,
        wall_time_s=time.perf_counter() - t0,
    )


def _pool_with(pooling: PoolingConfig, lam: float) -> PoolingConfig:
    return PoolingConfig(lam=lam, beta1=pooling.beta1, beta2=pooling.beta2)


def run_mc(
    scene: SceneConfig,
    train_sizes,
    n_runs: int,
    *,
    pooling: PoolingConfig | None = None,
    priors: PriorConfig | None = None,
    fit: FitConfig | None = None,
    candidates: tuple[float, ...] = (0.0, 0.5, 1.0),
    lam: float | None = None,
    master_seed: int = 0,
    n_jobs: int = 0,
) -> list[RunResult]:
    """Monte-Carlo sweep over training-set sizes; deterministic given the
    master seed. Individual run failures are tolerated up to 10%."""
    pooling = pooling or PoolingConfig()
    priors = priors or PriorConfig()
    fit = fit or FitConfig(max_iters=300)

    jobs = [
        (scene, int(n), run, master_seed, pooling, priors, fit, candidates, lam)
        for n in train_sizes
        for run in range(n_runs)
    ]
    results: list[RunResult | None] = [None] * len(jobs)
    failures: list[str] = []

    if n_jobs == 0:
        import os

        n_jobs = min(os.cpu_count() or 1, 8)
    if n_jobs > 1 and len(jobs) > 1:
        import multiprocessing as mp

        # fork keeps workers independent of how the caller was launched
        method = "fork" if "fork" in mp.get_all_start_methods() else "spawn"
        with mp.get_context(method).Pool(n_jobs, initializer=_limit_blas_threads) as pool:
            outcomes = pool.map(_guarded_run, jobs, chunksize=1)
    else:
        outcomes = [_guarded_run(j) for j in jobs]

    for i, out in enumerate(outcomes):
        if isinstance(out, RunResult):
            results[i] = out
        else:
            failures.append(out)
    ok = [r for r in results if r is not None]
    if len(ok) < 0.9 * len(jobs):
        raise InferenceError(
            f"only {len(ok)}/{len(jobs)} runs succeeded: " + "; ".join(failures[:5])
        )
    return ok


_BLAS_LIMIT = None


def _limit_blas_threads():
    # one BLAS thread per worker; the matrices are small and the workers
    # already saturate the cores
    global _BLAS_LIMIT
    from threadpoolctl import threadpool_limits

    _BLAS_LIMIT = threadpool_limits(limits=1)


def _guarded_run(args):
    try:
        return _single_run(args)
    except Exception as e:  # recorded, not fatal
        n, run = args[1], args[2]
        return f"n={n} run={run}: {type(e).__name__}: {e}"


def write_results_csv(path, results: list[RunResult]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(RESULT_COLUMNS)
        for r in results:
            writer.writerow([getattr(r, c) if c in ("n_train", "seed") else repr(getattr(r, c)) for c in RESULT_COLUMNS])
