"""Log-linear pooling of the two experts, priors, and the MAP objective.

Pooling two Gaussian experts with weight lam gives a Gaussian with precision
beta = lam*beta1 + (1-lam)*beta2 and a precision-weighted mean; the weights
w1 = lam*beta1/beta and w2 = (1-lam)*beta2/beta sum to one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import cnn as cnn_mod
from .cnn import CnnArchitecture, build_input
from .grid import Dataset, FieldRaster, GridSpec, outdoor_mask
from .params import ParamLayout, ParamVector
from .pathloss import PathLossParams, pl_mean_field

__all__ = [
    "PoolingConfig",
    "PriorConfig",
    "ModelContext",
    "build_context",
    "pooled_mean",
    "pooled_mean_field",
    "weighted_centroid",
    "prior_penalty",
    "prior_grad",
    "prior_precision_diag",
    "neg_log_posterior",
]

EPSILON_M = 1.0  # path-loss singularity guard, meters


@dataclass(frozen=True)
class PoolingConfig:
    lam: float = 0.5
    beta1: float = 0.25  # CNN expert precision, 1/dBW^2
    beta2: float = 0.25  # path-loss expert precision, 1/dBW^2

    def __post_init__(self):
        if not (0.0 <= self.lam <= 1.0):
            raise ValueError(f"lambda must be in [0, 1], got {self.lam}")
        if self.beta1 <= 0 or self.beta2 <= 0:
            raise ValueError("expert precisions must be positive")

    @property
    def beta(self) -> float:
        return self.lam * self.beta1 + (1.0 - self.lam) * self.beta2

    @property
    def weights(self) -> tuple[float, float]:
        b = self.beta
        return self.lam * self.beta1 / b, (1.0 - self.lam) * self.beta2 / b


@dataclass(frozen=True)
class PriorConfig:
    sigma_omega: float = 1.0
    p_min: float = 5.0
    p_max: float = 20.0
    gamma_min: float = 2.0
    gamma_max: float = 10.0
    sigma_c: float = 10.0  # cells
    tau: float = 5.0  # dBW

    def __post_init__(self):
        if self.p_min >= self.p_max:
            raise ValueError("p_min must be below p_max")
        if self.gamma_min >= self.gamma_max:
            raise ValueError("gamma_min must be below gamma_max")
        if self.tau <= 0 or self.sigma_c <= 0 or self.sigma_omega <= 0:
            raise ValueError("tau, sigma_c and sigma_omega must be positive")

    @property
    def p0_mean(self) -> float:
        return 0.5 * (self.p_min + self.p_max)

    @property
    def p0_std(self) -> float:
        return 0.5 * (self.p_max - self.p_min)

    @property
    def gamma_mean(self) -> float:
        return 0.5 * (self.gamma_min + self.gamma_max)

    @property
    def gamma_std(self) -> float:
        return 0.5 * (self.gamma_max - self.gamma_min)


@dataclass
class ModelContext:
    """Everything the mean function needs besides the parameters."""

    grid: GridSpec
    heights: FieldRaster
    arch: CnnArchitecture
    cnn_input: np.ndarray
    mask: np.ndarray
    epsilon_m: float = EPSILON_M

    @property
    def layout(self) -> ParamLayout:
        return ParamLayout.for_arch(self.arch)


def build_context(heights: FieldRaster, arch: CnnArchitecture | None = None) -> ModelContext:
    arch = arch or CnnArchitecture()
    return ModelContext(
        grid=heights.spec,
        heights=heights,
        arch=arch,
        cnn_input=build_input(heights),
        mask=outdoor_mask(heights),
    )


def _pl_params(psi: ParamVector, ctx: ModelContext) -> PathLossParams:
    return PathLossParams(tuple(psi.theta), psi.p0, psi.gamma, ctx.epsilon_m)


def pooled_mean_field(
    psi: ParamVector,
    pooling: PoolingConfig,
    ctx: ModelContext,
    *,
    cnn_field: np.ndarray | None = None,
) -> np.ndarray:
    """Pooled mean over the whole grid (H, W). The CNN forward may be passed
    in to avoid recomputation; it is skipped entirely when its weight is zero."""
    w1, w2 = pooling.weights
    h, w = ctx.grid.shape
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    pos = np.stack([rr.ravel(), cc.ravel()], axis=1)
    pl = pl_mean_field(pos, _pl_params(psi, ctx), ctx.grid).reshape(h, w)
    if w1 == 0.0:
        return w2 * pl
    if cnn_field is None:
        cnn_field = cnn_mod.cnn_forward(ctx.cnn_input, psi.omega, ctx.arch, mode="eval")
    return w1 * cnn_field + w2 * pl


def pooled_mean(p, psi: ParamVector, pooling: PoolingConfig, ctx: ModelContext) -> float:
    """beta^-1 (lam beta1 mu_cnn(p) + (1-lam) beta2 mu_pl(p))."""
    i, j = ctx.grid.check_index(p)
    w1, w2 = pooling.weights
    pos = np.array([[i, j]])
    mu = w2 * pl_mean_field(pos, _pl_params(psi, ctx), ctx.grid)[0]
    if w1 != 0.0:
        field = cnn_mod.cnn_forward(ctx.cnn_input, psi.omega, ctx.arch, mode="eval")
        mu += w1 * field[i, j]
    return float(mu)


def weighted_centroid(ds: Dataset, tau: float) -> np.ndarray:
    """Softmax-in-RSS convex combination of the measurement positions."""
    y = ds.rss
    w = np.exp((y - y.max()) / tau)
    w /= w.sum()
    return w @ ds.positions.astype(float)


def prior_penalty(psi: ParamVector, priors: PriorConfig, mu_c: np.ndarray) -> float:
    """Quadratic prior term R(psi), additive constants dropped; the centroid
    mu_c is treated as a fixed constant."""
    r = 0.5 * float(psi.omega @ psi.omega) / priors.sigma_omega**2
    r += 0.5 * (psi.p0 - priors.p0_mean) ** 2 / priors.p0_std**2
    r += 0.5 * (psi.gamma - priors.gamma_mean) ** 2 / priors.gamma_std**2
    d = psi.theta - mu_c
    r += 0.5 * float(d @ d) / priors.sigma_c**2
    return r


def prior_grad(psi: ParamVector, priors: PriorConfig, mu_c: np.ndarray) -> np.ndarray:
    g_omega = psi.omega / priors.sigma_omega**2
    g_theta = (psi.theta - mu_c) / priors.sigma_c**2
    g_p0 = (psi.p0 - priors.p0_mean) / priors.p0_std**2
    g_gamma = (psi.gamma - priors.gamma_mean) / priors.gamma_std**2
    return np.concatenate([g_omega, g_theta, [g_p0], [g_gamma]])


def prior_precision_diag(priors: PriorConfig, layout: ParamLayout) -> np.ndarray:
    """Diagonal of the prior Hessian: blockdiag(sigma_omega^-2 I,
    sigma_c^-2 I, sigma_P0^-2, sigma_gamma^-2) in layout order."""
    d = np.empty(layout.total_dim)
    sl = layout.slices
    d[sl["omega"]] = priors.sigma_omega**-2
    d[sl["theta"]] = priors.sigma_c**-2
    d[sl["p0"]] = priors.p0_std**-2
    d[sl["gamma"]] = priors.gamma_std**-2
    return d


def neg_log_posterior(
    psi: ParamVector,
    ds: Dataset,
    pooling: PoolingConfig,
    priors: PriorConfig,
    ctx: ModelContext,
) -> float:
    """(beta/2) sum_i (y_i - mu(p_i))^2 + R(psi), evaluated deterministically."""
    field = pooled_mean_field(psi, pooling, ctx)
    pos = ds.positions
    r = ds.rss - field[pos[:, 0], pos[:, 1]]
    value = 0.5 * pooling.beta * float(r @ r)
    value += prior_penalty(psi, priors, weighted_centroid(ds, priors.tau))
    if not math.isfinite(value):
        raise FloatingPointError("negative log-posterior is not finite")
    return value
