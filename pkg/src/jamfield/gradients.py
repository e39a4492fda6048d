"""Reverse-mode derivatives for the pipeline's differentiable computations.

Two derivative contracts coexist, matching the two ways the pooled mean is
used downstream:

* the training objective differentiates the mean exactly as evaluated
  (normalization statistics live, dropout masks applied), and
* the Laplace/predictive machinery linearizes the mean with the
  normalization statistics frozen at the evaluation point, which is what
  ``mean_jacobian_row`` returns.

Each matches central finite differences of its own evaluation rule.
"""

from __future__ import annotations

import numpy as np

from . import cnn as cnn_mod
from .grid import Dataset
from .params import ParamVector
from .pooling import (
    ModelContext,
    PoolingConfig,
    PriorConfig,
    _pl_params,
    pl_mean_field,
    prior_grad,
    prior_penalty,
    weighted_centroid,
)

__all__ = ["GradientError", "grad_scalar", "NegLogPosterior", "mean_jacobian_row", "mean_jacobian_rows"]


class GradientError(ArithmeticError):
    """Non-finite value encountered during differentiation."""


def _check_finite(vec: np.ndarray, psi: ParamVector) -> np.ndarray:
    bad = np.flatnonzero(~np.isfinite(vec))
    if bad.size:
        group = psi.layout.group_of(int(bad[0]))
        raise GradientError(
            f"non-finite gradient entries (first in group {group!r}, {bad.size} total)"
        )
    return vec


def grad_scalar(f, psi: ParamVector) -> np.ndarray:
    """Gradient of a scalar function of the parameter vector.

    ``f`` must expose a reverse-mode ``grad(psi)``; the result is checked for
    non-finite entries, reported with the offending parameter group.
    """
    g = np.asarray(f.grad(psi), dtype=float)
    if g.shape != (psi.total_dim,):
        raise GradientError(f"gradient has shape {g.shape}, expected ({psi.total_dim},)")
    return _check_finite(g, psi)


class NegLogPosterior:
    """The MAP objective with its exact reverse-mode gradient.

    ``value``/``grad`` evaluate deterministically (no dropout);
    ``value_and_grad`` with an rng applies dropout for stochastic training
    steps, sharing one forward pass between the value and the gradient.
    """

    def __init__(self, ds: Dataset, pooling: PoolingConfig, priors: PriorConfig, ctx: ModelContext):
        self.ds = ds
        self.pooling = pooling
        self.priors = priors
        self.ctx = ctx
        self.mu_c = weighted_centroid(ds, priors.tau)
        self._pos = ds.positions
        self._y = ds.rss

    def value(self, psi: ParamVector) -> float:
        return self.value_and_grad(psi, rng=None, want_grad=False)[0]

    def grad(self, psi: ParamVector) -> np.ndarray:
        return self.value_and_grad(psi, rng=None)[1]

    def value_and_grad(
        self,
        psi: ParamVector,
        rng: np.random.Generator | None = None,
        *,
        dropout_masks=None,
        want_grad: bool = True,
    ):
        pooling, ctx = self.pooling, self.ctx
        w1, w2 = pooling.weights
        beta = pooling.beta
        pos, y = self._pos, self._y

        mu = w2 * pl_mean_field(pos, _pl_params(psi, ctx), ctx.grid)
        cache = None
        if w1 != 0.0:
            train = rng is not None or dropout_masks is not None
            field, cache = cnn_mod.cnn_forward(
                ctx.cnn_input,
                psi.omega,
                ctx.arch,
                mode="train" if train else "eval",
                rng=rng,
                dropout_masks=dropout_masks,
                want_cache=True,
            )
            mu = mu + w1 * field[pos[:, 0], pos[:, 1]]

        resid = y - mu
        value = 0.5 * beta * float(resid @ resid)
        value += prior_penalty(psi, self.priors, self.mu_c)
        if not np.isfinite(value):
            raise GradientError("negative log-posterior is not finite")
        if not want_grad:
            return value, None

        g = prior_grad(psi, self.priors, self.mu_c)
        sl = psi.layout.slices
        if w2 != 0.0:
            from .pathloss import pl_grad_field

            plg = pl_grad_field(pos, _pl_params(psi, ctx), ctx.grid)
            coeff = -beta * w2 * resid
            g[sl["theta"].start : sl["gamma"].stop] += coeff @ plg
        if w1 != 0.0:
            seed = np.zeros(ctx.grid.shape)
            seed[pos[:, 0], pos[:, 1]] = -beta * w1 * resid
            g[sl["omega"]] += cnn_mod.cnn_backward(seed, cache, psi.omega, ctx.arch)
        return value, _check_finite(g, psi)


def mean_jacobian_rows(
    cells: np.ndarray,
    psi: ParamVector,
    pooling: PoolingConfig,
    ctx: ModelContext,
    *,
    cache: dict | None = None,
) -> np.ndarray:
    """Rows of the pooled-mean Jacobian, (M, total_dim), normalization
    statistics frozen at psi. An eval-mode forward cache may be reused."""
    from .pathloss import pl_grad_field

    cells = np.asarray(cells, dtype=int)
    for p in cells:
        if not ctx.mask[p[0], p[1]]:
            raise ValueError(f"cell {tuple(p)} is masked (inside a building)")
    w1, w2 = pooling.weights
    layout = psi.layout
    rows = np.zeros((len(cells), layout.total_dim))
    sl = layout.slices
    if w2 != 0.0:
        rows[:, sl["theta"].start : sl["gamma"].stop] = w2 * pl_grad_field(
            cells, _pl_params(psi, ctx), ctx.grid
        )
    if w1 != 0.0:
        if cache is None:
            _, cache = cnn_mod.cnn_forward(
                ctx.cnn_input, psi.omega, ctx.arch, mode="eval", want_cache=True
            )
        rows[:, sl["omega"]] = w1 * cnn_mod.cnn_cell_jacobian(cells, cache, psi.omega, ctx.arch)
    return rows


def mean_jacobian_row(p, psi: ParamVector, pooling: PoolingConfig, ctx: ModelContext) -> np.ndarray:
    """Gradient of the pooled mean at one cell with respect to psi."""
    i, j = ctx.grid.check_index(p)
    row = mean_jacobian_rows(np.array([[i, j]]), psi, pooling, ctx)[0]
    return _check_finite(row, psi)
