"""Flat parameter vector over (CNN weights, jammer position, power, exponent)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cnn import CnnArchitecture, param_count

__all__ = ["ParamLayout", "ParamVector"]

GROUPS = ("omega", "theta", "p0", "gamma")


@dataclass(frozen=True)
class ParamLayout:
    """Index map from named parameter groups to ranges of the flat vector."""

    n_omega: int

    @classmethod
    def for_arch(cls, arch: CnnArchitecture) -> "ParamLayout":
        return cls(param_count(arch))

    @property
    def total_dim(self) -> int:
        return self.n_omega + 4

    @property
    def slices(self) -> dict[str, slice]:
        n = self.n_omega
        return {
            "omega": slice(0, n),
            "theta": slice(n, n + 2),
            "p0": slice(n + 2, n + 3),
            "gamma": slice(n + 3, n + 4),
        }

    def indices(self, groups) -> np.ndarray:
        sl = self.slices
        idx = [np.arange(sl[g].start, sl[g].stop) for g in groups]
        return np.concatenate(idx) if idx else np.array([], dtype=int)

    def group_of(self, i: int) -> str:
        for name, sl in self.slices.items():
            if sl.start <= i < sl.stop:
                return name
        raise IndexError(i)


@dataclass
class ParamVector:
    omega: np.ndarray
    theta: np.ndarray
    p0: float
    gamma: float

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=float)
        self.theta = np.asarray(self.theta, dtype=float)
        if self.theta.shape != (2,):
            raise ValueError("theta must be a 2-vector")

    @property
    def layout(self) -> ParamLayout:
        return ParamLayout(len(self.omega))

    @property
    def total_dim(self) -> int:
        return len(self.omega) + 4

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.omega, self.theta, [self.p0], [self.gamma]])

    @classmethod
    def from_flat(cls, vec: np.ndarray, layout: ParamLayout) -> "ParamVector":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (layout.total_dim,):
            raise ValueError(f"flat vector has shape {vec.shape}, expected ({layout.total_dim},)")
        sl = layout.slices
        return cls(
            omega=vec[sl["omega"]].copy(),
            theta=vec[sl["theta"]].copy(),
            p0=float(vec[sl["p0"]][0]),
            gamma=float(vec[sl["gamma"]][0]),
        )

    def copy(self) -> "ParamVector":
        return ParamVector(self.omega.copy(), self.theta.copy(), self.p0, self.gamma)
