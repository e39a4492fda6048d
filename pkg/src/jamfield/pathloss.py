"""Log-distance path-loss expert: mean and analytic parameter gradients."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .grid import GridSpec

__all__ = ["PathLossParams", "pl_mean", "pl_mean_field", "pl_grad_field"]

LN10 = math.log(10.0)


@dataclass(frozen=True)
class PathLossParams:
    theta: tuple[float, float]
    p0: float
    gamma: float
    epsilon: float = 1.0  # meters; keeps the log and its gradient bounded

    def __post_init__(self):
        if not (self.epsilon > 0):
            raise ValueError("epsilon must be positive")


def pl_mean(p, params: PathLossParams, grid: GridSpec) -> float:
    """P0 - 10*gamma*log10(distance_m + epsilon) at grid index p."""
    grid.check_index(p)
    d = grid.distance_m(p, params.theta)
    return params.p0 - 10.0 * params.gamma * math.log10(d + params.epsilon)


def pl_mean_field(positions: np.ndarray, params: PathLossParams, grid: GridSpec) -> np.ndarray:
    """Vectorized pl_mean over an (n, 2) array of cell positions."""
    d = grid.cell_size * np.hypot(
        positions[:, 0] - params.theta[0], positions[:, 1] - params.theta[1]
    )
    return params.p0 - 10.0 * params.gamma * np.log10(d + params.epsilon)


def pl_grad_field(positions: np.ndarray, params: PathLossParams, grid: GridSpec) -> np.ndarray:
    """Gradients of pl_mean wrt (theta_row, theta_col, p0, gamma), shape (n, 4).

    At a cell coinciding with theta the direction term is set to zero
    (subgradient choice); epsilon keeps the magnitude bounded everywhere.
    """
    dr = positions[:, 0] - params.theta[0]
    dc = positions[:, 1] - params.theta[1]
    d_cells = np.hypot(dr, dc)
    u = grid.cell_size * d_cells + params.epsilon
    coef = -10.0 * params.gamma / (LN10 * u) * grid.cell_size
    safe = np.where(d_cells > 0, d_cells, 1.0)
    grads = np.empty((len(positions), 4))
    grads[:, 0] = np.where(d_cells > 0, coef * (-dr) / safe, 0.0)
    grads[:, 1] = np.where(d_cells > 0, coef * (-dc) / safe, 0.0)
    grads[:, 2] = 1.0
    grads[:, 3] = -10.0 * np.log10(u)
    return grads
