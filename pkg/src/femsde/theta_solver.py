"""Derivative-free box-constrained minimisation of the weighted likelihood.

Two phases, both without gradients:

1. controlled random search (CRS2 with local mutation): a population of
   uniformly drawn points is evolved by reflecting a random point through the
   centroid of a random simplex containing the current best, with a local
   mutation around the best point when the reflection fails;
2. a bounded adaptive Nelder-Mead search started from the best CRS point and
   restarted from the incumbent while local budget remains.

The evaluation budget of the global phase includes the initial population,
so a population larger than ``global_evals`` degenerates into pure random
sampling of ``global_evals`` points.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
import logging

import numpy as np
from scipy import optimize

from .hermite import NumericError
from .likelihood import FLOOR_PENALTY, UniformTimeSeries, fitness_row
from .models import SdeModelSpec

__all__ = ["ThetaSolverConfig", "EmptyClusterError", "ThetaObjective", "minimize_theta"]

log = logging.getLogger(__name__)

# relative margin that keeps candidates strictly inside open bounds
_BOUND_MARGIN = 1e-9


class EmptyClusterError(RuntimeError):
    """The cluster carries (numerically) no affiliation weight."""


@dataclass(frozen=True)
class ThetaSolverConfig:
    global_evals: int = 300
    local_evals: int = 300
    population: int = 3000
    rel_tol: float = 1e-10
    seed: int = 0

    def __post_init__(self):
        if min(self.global_evals, self.local_evals, self.population) <= 0:
            raise ValueError("evaluation counts and population must be positive")
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


class ThetaObjective:
    """``theta -> sum_i w_i f(t_i; theta)`` over the ``N-1`` transitions.

    Tracks every evaluation, the best point seen and the best-so-far trace.
    Non-finite evaluations are mapped to the density-floor penalty.
    """

    def __init__(self, model: SdeModelSpec, series: UniformTimeSeries, weights):
        self.model = model
        self.series = series
        w = np.asarray(weights, dtype=float)
        if w.shape != (series.n,):
            raise ValueError("weight row must match the series length")
        self.weights = w[:-1]
        self.penalty = 2.0 * FLOOR_PENALTY * max(float(self.weights.sum()), 1.0)
        lo, hi = model.lower, model.upper
        span = hi - lo
        self.lower = lo + _BOUND_MARGIN * np.maximum(span, 1.0)
        self.upper = hi - _BOUND_MARGIN * np.maximum(span, 1.0)
        self.n_evals = 0
        self.best_x: np.ndarray | None = None
        self.best_f = np.inf
        self.trace: list[float] = []
        self.all_in_bounds = True

    def __call__(self, theta) -> float:
        theta = np.asarray(theta, dtype=float)
        if np.any(theta < self.lower) or np.any(theta > self.upper):
            self.all_in_bounds = False
            theta = np.clip(theta, self.lower, self.upper)
        try:
            with np.errstate(all="ignore"):
                row = fitness_row(self.model, self.series, theta)
            val = float(np.dot(self.weights, row[:-1]))
        except (NumericError, FloatingPointError, OverflowError):
            val = np.inf
        if not np.isfinite(val):
            val = self.penalty
        self.n_evals += 1
        if val < self.best_f:
            self.best_f = val
            self.best_x = theta.copy()
        self.trace.append(self.best_f)
        return val


def _crs(obj: ThetaObjective, cfg: ThetaSolverConfig, rng: np.random.Generator, x0=None) -> None:
    dim = obj.lower.size
    budget = cfg.global_evals
    n_pop = min(cfg.population, budget)
    pts = obj.lower + (obj.upper - obj.lower) * rng.random((n_pop, dim))
    if x0 is not None:
        pts[0] = np.clip(x0, obj.lower, obj.upper)
    vals = np.array([obj(p) for p in pts])
    used = n_pop
    if n_pop < dim + 2:
        return
    while used < budget:
        best = int(np.argmin(vals))
        worst = int(np.argmax(vals))
        others = rng.choice(np.delete(np.arange(n_pop), best), size=dim, replace=False)
        simplex = np.vstack([pts[best], pts[others[:-1]]])
        trial = 2.0 * simplex.mean(axis=0) - pts[others[-1]]
        accepted = False
        if np.all(trial >= obj.lower) and np.all(trial <= obj.upper):
            f = obj(trial)
            used += 1
            if f < vals[worst]:
                pts[worst], vals[worst] = trial, f
                accepted = True
        if not accepted and used < budget:
            w = rng.random(dim)
            trial = np.clip((1.0 + w) * pts[best] - w * pts[others[0]], obj.lower, obj.upper)
            f = obj(trial)
            used += 1
            if f < vals[worst]:
                pts[worst], vals[worst] = trial, f
        spread = vals.max() - vals.min()
        if spread <= cfg.rel_tol * max(abs(vals.min()), 1e-300):
            break


class _BudgetSpent(Exception):
    pass


def _polish(obj: ThetaObjective, cfg: ThetaSolverConfig) -> None:
    budget = cfg.local_evals
    if budget <= 0 or obj.best_x is None:
        return
    stop_at = obj.n_evals + budget
    bounds = optimize.Bounds(obj.lower, obj.upper)
    step = 0.05 * (obj.upper - obj.lower)

    def simplex(x):
        # scipy's default simplex is relative to x and collapses near zero
        pts = np.repeat(x[None, :], x.size + 1, axis=0)
        for i in range(x.size):
            up = x[i] + step[i] <= obj.upper[i]
            pts[i + 1, i] += step[i] if up else -step[i]
        return pts

    def f(x):
        if obj.n_evals >= stop_at:
            raise _BudgetSpent
        return obj(x)

    while obj.n_evals < stop_at:
        before = obj.best_f
        try:
            optimize.minimize(
                f,
                obj.best_x.copy(),
                method="Nelder-Mead",
                bounds=bounds,
                options={"maxfev": stop_at - obj.n_evals, "xatol": 1e-10,
                         "initial_simplex": simplex(obj.best_x),
                         "fatol": cfg.rel_tol * max(abs(before), 1.0), "adaptive": True},
            )
        except _BudgetSpent:
            break
        except (ValueError, RuntimeError) as exc:  # pragma: no cover - scipy edge cases
            log.debug("local polish aborted: %s", exc)
            break
        if not obj.best_f < before - cfg.rel_tol * max(abs(before), 1.0):
            break


def minimize_theta(
    model: SdeModelSpec,
    series: UniformTimeSeries,
    gamma_row,
    cfg: ThetaSolverConfig | None = None,
    *,
    x0=None,
    return_objective: bool = False,
):
    """Minimise ``sum_i gamma_row[i] f(t_i; theta)`` within the model bounds.

    ``x0`` (optional) is injected into the initial population so a warm start
    can never be lost. Returns ``(theta, value)``; with
    ``return_objective=True`` also the :class:`ThetaObjective` holding the
    evaluation trace.
    """
    cfg = cfg or ThetaSolverConfig()
    gamma_row = np.asarray(gamma_row, dtype=float)
    if np.any(gamma_row < -1e-12) or np.any(gamma_row > 1 + 1e-12):
        raise ValueError("gamma_row entries must lie in [0, 1]")
    if gamma_row[:-1].sum() <= 1e-12 * gamma_row.size:
        raise EmptyClusterError("cluster has no affiliation weight")
    obj = ThetaObjective(model, series, gamma_row)
    rng = np.random.default_rng(cfg.seed)
    _crs(obj, cfg, rng, x0=x0)
    _polish(obj, cfg)
    theta = obj.best_x.copy()
    if return_objective:
        return theta, obj.best_f, obj
    return theta, obj.best_f
