"""Flat key=value configuration shared by the CLI commands.

A config file holds one dotted key per line (``scene.height=32``); unknown
keys are rejected with the offending name. Flags override file values, and
every command echoes the effective configuration for reproducibility.
"""

from __future__ import annotations

from dataclasses import dataclass

from .cnn import CnnArchitecture
from .grid import make_grid
from .inference import FitConfig
from .pooling import PoolingConfig, PriorConfig
from .scene import SceneConfig

__all__ = ["ConfigError", "CliConfig", "DEFAULTS", "load_config"]


class ConfigError(ValueError):
    pass


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in str(text).split(",") if str(v).strip())


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in str(text).split(",") if str(v).strip())


# key -> (default, parser)
DEFAULTS: dict[str, tuple] = {
    "scene.seed": (0, int),
    "scene.height": (32, int),
    "scene.width": (32, int),
    "scene.cell_size": (15.625, float),
    "scene.n_blocks_x": (4, int),
    "scene.n_blocks_y": (4, int),
    "scene.street_width": (3, int),
    "scene.height_min": (10.0, float),
    "scene.height_max": (40.0, float),
    "scene.jammer_row": (16.0, float),
    "scene.jammer_col": (19.0, float),
    "scene.p0": (10.0, float),
    "scene.gamma": (2.5, float),
    "scene.shadow_db": (0.5, float),
    "scene.canyon_db": (2.0, float),
    "scene.noise_precision": (4.0, float),
    "gen.train_size": (200, int),
    "pooling.lambda": (-1.0, float),  # negative means: select by evidence
    "pooling.beta1": (0.25, float),
    "pooling.beta2": (0.25, float),
    "prior.sigma_omega": (1.0, float),
    "prior.p_min": (5.0, float),
    "prior.p_max": (20.0, float),
    "prior.gamma_min": (2.0, float),
    "prior.gamma_max": (10.0, float),
    "prior.sigma_c": (10.0, float),
    "prior.tau": (5.0, float),
    "cnn.dropout": (0.1, float),
    "fit.max_iters": (5000, int),
    "fit.learning_rate": (0.05, float),
    "fit.adam_beta1": (0.9, float),
    "fit.adam_beta2": (0.999, float),
    "fit.convergence_tol": (1e-6, float),
    "fit.restarts": (0, int),
    "fit.seed": (0, int),
    "fit.lambda_candidates": ((0.0, 0.25, 0.5, 0.75, 1.0), _float_list),
    "sweep.train_sizes": ((20, 50, 100, 200), _int_list),
    "sweep.n_runs": (20, int),
    "sweep.seed": (0, int),
    "sweep.max_iters": (250, int),
    "sweep.lambda_candidates": ((0.0, 0.5), _float_list),
    "sweep.n_jobs": (0, int),
}


@dataclass
class CliConfig:
    """Merged view of all command settings, keyed by dotted names."""

    values: dict

    def __getitem__(self, key: str):
        return self.values[key]

    def scene(self) -> SceneConfig:
        v = self.values
        try:
            grid = make_grid(v["scene.height"], v["scene.width"], v["scene.cell_size"])
            return SceneConfig(
                seed=v["scene.seed"],
                grid=grid,
                n_blocks_x=v["scene.n_blocks_x"],
                n_blocks_y=v["scene.n_blocks_y"],
                street_width=v["scene.street_width"],
                height_range=(v["scene.height_min"], v["scene.height_max"]),
                jammer_true=(v["scene.jammer_row"], v["scene.jammer_col"]),
                p0_true=v["scene.p0"],
                gamma_true=v["scene.gamma"],
                shadow_db_per_building=v["scene.shadow_db"],
                canyon_gain_db=v["scene.canyon_db"],
                noise_precision=v["scene.noise_precision"],
            )
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def pooling(self, lam: float = 0.0) -> PoolingConfig:
        try:
            return PoolingConfig(
                lam=lam, beta1=self.values["pooling.beta1"], beta2=self.values["pooling.beta2"]
            )
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def fixed_lambda(self) -> float | None:
        lam = self.values["pooling.lambda"]
        if lam < 0:
            return None
        if lam > 1:
            raise ConfigError(f"pooling.lambda must be in [0, 1], got {lam}")
        return lam

    def priors(self) -> PriorConfig:
        v = self.values
        try:
            return PriorConfig(
                sigma_omega=v["prior.sigma_omega"],
                p_min=v["prior.p_min"],
                p_max=v["prior.p_max"],
                gamma_min=v["prior.gamma_min"],
                gamma_max=v["prior.gamma_max"],
                sigma_c=v["prior.sigma_c"],
                tau=v["prior.tau"],
            )
        except ValueError as e:
            raise ConfigError(f"prior: {e}") from e

    def arch(self) -> CnnArchitecture:
        rate = self.values["cnn.dropout"]
        if not (0.0 <= rate < 1.0):
            raise ConfigError(f"cnn.dropout must be in [0, 1), got {rate}")
        return CnnArchitecture(dropout=rate)

    def fit(self, *, max_iters: int | None = None, seed: int | None = None) -> FitConfig:
        v = self.values
        try:
            return FitConfig(
                max_iters=v["fit.max_iters"] if max_iters is None else max_iters,
                learning_rate=v["fit.learning_rate"],
                adam_betas=(v["fit.adam_beta1"], v["fit.adam_beta2"]),
                convergence_tol=v["fit.convergence_tol"],
                restarts=v["fit.restarts"],
                seed=v["fit.seed"] if seed is None else seed,
            )
        except ValueError as e:
            raise ConfigError(f"fit: {e}") from e

    def validate(self) -> None:
        """Construct every settings group, surfacing the first bad field."""
        try:
            self.scene()
        except (ConfigError, ValueError) as e:
            raise ConfigError(f"scene: {e}") from e
        self.pooling()
        self.fixed_lambda()
        self.priors()
        self.arch()
        self.fit()
        for key in ("sweep.n_runs", "sweep.max_iters", "gen.train_size"):
            if self.values[key] < 1:
                raise ConfigError(f"{key} must be positive, got {self.values[key]}")

    def echo(self) -> str:
        lines = []
        for key in sorted(self.values):
            val = self.values[key]
            if isinstance(val, tuple):
                val = ",".join(repr(x) if isinstance(x, float) else str(x) for x in val)
            lines.append(f"{key}={val}")
        return "\n".join(lines) + "\n"


def load_config(path: str | None = None, overrides: dict | None = None) -> CliConfig:
    """Defaults, then file values, then explicit overrides."""
    values = {k: d for k, (d, _) in DEFAULTS.items()}
    if path is not None:
        try:
            with open(path) as f:
                raw = f.read()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        for lineno, line in enumerate(raw.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if key not in DEFAULTS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            try:
                values[key] = DEFAULTS[key][1](val)
            except ValueError as e:
                raise ConfigError(f"{path}:{lineno}: bad value for {key}: {e}") from e
    for key, val in (overrides or {}).items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = DEFAULTS[key][1](val) if isinstance(val, str) else val
    return CliConfig(values)
