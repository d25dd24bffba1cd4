"""Per-cluster fitness rows and the weighted clustering functional."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .hermite import DENSITY_FLOOR, transition_density
from .models import DomainError, SdeModelSpec

__all__ = [
    "UniformTimeSeries",
    "FitnessMatrix",
    "ContractError",
    "fitness_row",
    "fitness_matrix",
    "weighted_negloglik",
    "FLOOR_PENALTY",
]

FLOOR_PENALTY = -np.log(DENSITY_FLOOR)


class ContractError(ValueError):
    """Inputs violate a shape or feasibility precondition."""


@dataclass(frozen=True)
class UniformTimeSeries:
    """Equally spaced samples ``values[i]`` at ``t0 + i * dt``."""

    t0: float
    dt: float
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", values)
        if values.ndim != 1 or values.size < 2:
            raise ValueError("a time series needs at least two samples")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not np.all(np.isfinite(values)):
            raise ValueError("time series contains non-finite values")

    def __len__(self) -> int:
        return self.values.size

    @property
    def n(self) -> int:
        return self.values.size

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.values.size)

    @property
    def horizon(self) -> float:
        return self.dt * (self.values.size - 1)


@dataclass
class FitnessMatrix:
    """``rows[k, i] = -ln p(x_{i+1} | x_i; theta_k)`` with the last column
    copying the first. ``floored`` counts density-floor hits per row."""

    rows: np.ndarray
    dt: float
    floored: np.ndarray

    @property
    def n_clusters(self) -> int:
        return self.rows.shape[0]

    @property
    def n(self) -> int:
        return self.rows.shape[1]

    def to_csv(self, path) -> None:
        np.savetxt(path, self.rows, delimiter=",", fmt="%.17g")


def fitness_row(
    model: SdeModelSpec, series: UniformTimeSeries, theta, *, return_floored: bool = False
):
    """Negative log transition densities along ``series`` for one ``theta``.

    Entry ``i`` covers the transition ``i -> i+1`` for ``i = 0 .. N-2``; entry
    ``N-1`` repeats entry 0 so the row has the length of the series.
    """
    x = series.values
    ok = model.in_domain(x)
    if not ok.all():
        bad = int(np.flatnonzero(~ok)[0])
        raise DomainError(f"{model.name}: sample {bad} (value {x[bad]!r}) outside state domain")
    p = transition_density(model, series.dt, x[:-1], x[1:], theta, check_domain=False)
    row = np.empty(x.size)
    row[:-1] = -np.log(p)
    row[-1] = row[0]
    if return_floored:
        return row, int(np.count_nonzero(p <= DENSITY_FLOOR))
    return row


def fitness_matrix(model: SdeModelSpec, series: UniformTimeSeries, thetas) -> FitnessMatrix:
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    rows = np.empty((thetas.shape[0], series.n))
    floored = np.zeros(thetas.shape[0], dtype=int)
    for k, th in enumerate(thetas):
        rows[k], floored[k] = fitness_row(model, series, th, return_floored=True)
    return FitnessMatrix(rows=rows, dt=series.dt, floored=floored)


def weighted_negloglik(fitness, gamma) -> float:
    """``sum_i sum_k gamma[k, i] * fitness[k, i]`` over the ``N-1`` transitions.

    The wrap entry in the last column is excluded. ``fitness`` may be a
    :class:`FitnessMatrix` or a ``(K, N)`` array.
    """
    rows = fitness.rows if isinstance(fitness, FitnessMatrix) else np.asarray(fitness, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    rows = np.atleast_2d(rows)
    gamma = np.atleast_2d(gamma)
    if rows.shape != gamma.shape:
        raise ContractError(f"fitness shape {rows.shape} != gamma shape {gamma.shape}")
    return float(np.sum(rows[:, :-1] * gamma[:, :-1]))
