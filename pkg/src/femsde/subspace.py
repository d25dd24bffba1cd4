"""Alternating minimisation of the regularised clustering functional.

Each iteration fits one parameter vector per cluster on the data grid with
the current affiliations as weights, rebuilds the fitness rows, reduces them
onto the coarse FEM grid, solves the affiliation QP there and interpolates
the result back. The functional is tracked on the coarse grid.

The parameter step weights transition ``i`` by the same trapezoid weights
the FEM reduction uses (the first transition also collects the half weight
of the wrapped last sample), so both half-steps decrease one and the same
functional and the trace is non-increasing.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict, replace
import json
import logging
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter1d

from .gamma_solver import (
    FemGrid,
    SpgConfig,
    make_grid,
    reduce_fitness,
    restrict_gamma,
    solve_qp,
    interpolate_gamma,
)
from .likelihood import ContractError, UniformTimeSeries, fitness_matrix
from .models import SdeModelSpec, get_model
from .theta_solver import ThetaSolverConfig, minimize_theta

__all__ = [
    "SubspaceConfig",
    "ClusteringResult",
    "initial_gamma",
    "run_subspace",
    "scan_eps2",
    "theta_weights",
]

log = logging.getLogger(__name__)

# clusters whose total weight falls below this share of the series are frozen
_EMPTY_MASS = 1e-10


@dataclass(frozen=True)
class SubspaceConfig:
    alpha: float = 1.0 / 3.0
    tol: float = 1e-8
    max_iter: int = 100
    n_restarts: int = 3
    seed: int = 0
    threads: int = 1
    theta_solver: ThetaSolverConfig = field(default_factory=ThetaSolverConfig)
    spg: SpgConfig = field(default_factory=SpgConfig)

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        if self.max_iter < 1 or self.n_restarts < 1 or self.threads < 1:
            raise ValueError("max_iter, n_restarts and threads must be positive")
        if not self.tol >= 0:
            raise ValueError("tol must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SubspaceConfig":
        d = dict(d)
        if "theta_solver" in d:
            d["theta_solver"] = ThetaSolverConfig(**d["theta_solver"])
        if "spg" in d:
            d["spg"] = SpgConfig(**d["spg"])
        return cls(**d)


@dataclass
class ClusteringResult:
    gamma_fine: np.ndarray
    gamma_coarse: np.ndarray
    theta: np.ndarray
    functional_trace: list
    iterations: int
    converged: bool
    eps2: float
    K: int
    seed: int
    alpha: float
    dt: float
    model: str
    restart: int = 0
    frozen: list = field(default_factory=list)

    @property
    def functional(self) -> float:
        return float(self.functional_trace[-1])

    @property
    def n_coarse(self) -> int:
        return self.gamma_coarse.shape[1]

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.gamma_fine.shape[1])

    def labels(self) -> np.ndarray:
        return np.argmax(self.gamma_fine, axis=0)

    def to_dict(self, include_gamma: bool = False) -> dict:
        d = {
            "model": self.model,
            "K": self.K,
            "eps2": self.eps2,
            "alpha": self.alpha,
            "dt": self.dt,
            "n_fine": int(self.gamma_fine.shape[1]),
            "n_coarse": self.n_coarse,
            "seed": self.seed,
            "restart": self.restart,
            "iterations": self.iterations,
            "converged": self.converged,
            "functional": self.functional,
            "functional_trace": [float(v) for v in self.functional_trace],
            "theta": self.theta.tolist(),
            "frozen": [int(k) for k in self.frozen],
        }
        if include_gamma:
            d["gamma_coarse"] = self.gamma_coarse.tolist()
            d["gamma_fine"] = self.gamma_fine.tolist()
        return d

    def to_json(self, path=None, include_gamma: bool = True) -> str:
        text = json.dumps(self.to_dict(include_gamma=include_gamma), indent=1)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_dict(cls, d: dict) -> "ClusteringResult":
        gc = np.asarray(d["gamma_coarse"], dtype=float)
        gf = np.asarray(d["gamma_fine"], dtype=float)
        return cls(
            gamma_fine=gf,
            gamma_coarse=gc,
            theta=np.asarray(d["theta"], dtype=float),
            functional_trace=list(d["functional_trace"]),
            iterations=int(d["iterations"]),
            converged=bool(d["converged"]),
            eps2=float(d["eps2"]),
            K=int(d["K"]),
            seed=int(d["seed"]),
            alpha=float(d["alpha"]),
            dt=float(d["dt"]),
            model=d["model"],
            restart=int(d.get("restart", 0)),
            frozen=list(d.get("frozen", [])),
        )

    @classmethod
    def from_json(cls, path) -> "ClusteringResult":
        return cls.from_dict(json.loads(Path(path).read_text()))


def initial_gamma(K: int, n: int, rng: np.random.Generator, width: int = 5) -> np.ndarray:
    """Random smooth-ish affiliations from a K-state Markov chain.

    Mean dwell length is ``n / (10 K)``; the first ``K`` segments visit every
    state once in random order. The one-hot path is smoothed by a moving
    average of ``width`` samples, which keeps every column on the simplex.
    """
    if K == 1:
        return np.ones((1, n))
    dwell = max(n / (10.0 * K), 1.0)
    p_switch = 1.0 / dwell
    switches = rng.random(n) < p_switch
    switches[0] = False
    seg_id = np.cumsum(switches)
    n_seg = int(seg_id[-1]) + 1
    seg_label = np.empty(n_seg, dtype=int)
    first = rng.permutation(K)
    seg_label[: min(K, n_seg)] = first[: min(K, n_seg)]
    for s in range(K, n_seg):
        # uniform among the states other than the current one
        step = rng.integers(1, K)
        seg_label[s] = (seg_label[s - 1] + step) % K
    labels = seg_label[seg_id]
    g = np.zeros((K, n))
    g[labels, np.arange(n)] = 1.0
    if width > 1:
        g = uniform_filter1d(g, size=width, axis=1, mode="nearest")
        g = np.clip(g, 0.0, None)
        g /= g.sum(axis=0, keepdims=True)
    return g


def theta_weights(gamma_fine: np.ndarray) -> np.ndarray:
    """Per-transition weights consistent with the trapezoid reduction.

    Transition 0 gets ``(g_0 + g_{N-1}) / 2`` because the wrapped last
    fitness entry repeats it; the last column is ignored by the solver.
    """
    w = np.array(gamma_fine, dtype=float)
    w[:, 0] = 0.5 * (gamma_fine[:, 0] + gamma_fine[:, -1])
    return w


def _solver_seed(seed: int, restart: int, it: int) -> int:
    # shared by all clusters of one iteration so relabelling clusters
    # relabels the result
    return int(np.random.SeedSequence([seed, restart, it]).generate_state(1)[0])


def _single_run(
    model: SdeModelSpec,
    series: UniformTimeSeries,
    grid: FemGrid,
    K: int,
    eps2: float,
    cfg: SubspaceConfig,
    gamma_coarse: np.ndarray,
    theta: np.ndarray | None,
    restart: int,
) -> ClusteringResult:
    gamma_f = interpolate_gamma(gamma_coarse, grid)
    trace: list[float] = []
    frozen: set[int] = set()
    converged = False
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 and K > 1 else None
    it = 0
    try:
        for it in range(1, cfg.max_iter + 1):
            tcfg = replace(cfg.theta_solver, seed=_solver_seed(cfg.seed, restart, it))
            w = theta_weights(gamma_f)

            def solve(k):
                if w[k, :-1].sum() <= _EMPTY_MASS * series.n:
                    if theta is not None:
                        return k, theta[k], True
                    # no previous value to keep: fit the unweighted series
                    return k, minimize_theta(model, series, np.ones(series.n), tcfg)[0], True
                x0 = None if theta is None else theta[k]
                return k, minimize_theta(model, series, w[k], tcfg, x0=x0)[0], False

            jobs = pool.map(solve, range(K)) if pool else map(solve, range(K))
            new_theta = np.empty((K, model.n_params))
            for k, th, empty in jobs:
                new_theta[k] = th
                if empty:
                    frozen.add(k)
                    log.info("cluster %d carries no weight; parameters frozen", k)
            theta = new_theta

            b = reduce_fitness(fitness_matrix(model, series, theta).rows, grid)
            qp = solve_qp(b, eps2, gamma_coarse, cfg.spg)
            if not qp.converged:
                log.debug("QP stopped after %d iterations (pg %.2e)", qp.iterations, qp.pg_norm)
            gamma_coarse = qp.gamma
            gamma_f = interpolate_gamma(gamma_coarse, grid)
            trace.append(qp.objective)
            if len(trace) > 1:
                prev = trace[-2]
                if abs(trace[-1] - prev) <= cfg.tol * max(abs(prev), 1e-300):
                    converged = True
                    break
    finally:
        if pool:
            pool.shutdown()
    return ClusteringResult(
        gamma_fine=gamma_f,
        gamma_coarse=gamma_coarse,
        theta=theta,
        functional_trace=trace,
        iterations=it,
        converged=converged,
        eps2=float(eps2),
        K=K,
        seed=cfg.seed,
        alpha=grid.alpha,
        dt=series.dt,
        model=model.name,
        restart=restart,
        frozen=sorted(frozen),
    )


def run_subspace(
    model: SdeModelSpec | str,
    series: UniformTimeSeries,
    K: int,
    eps2: float,
    cfg: SubspaceConfig | None = None,
    *,
    gamma0=None,
    theta0=None,
) -> ClusteringResult:
    """Cluster ``series`` into ``K`` regimes with regularisation ``eps2``.

    Without ``gamma0`` every restart draws its own random initial
    affiliations and the run with the lowest final functional is returned.
    ``gamma0`` (data grid or coarse grid) and ``theta0`` warm-start a single
    run.
    """
    cfg = cfg or SubspaceConfig()
    if isinstance(model, str):
        model = get_model(model)
    if K < 1:
        raise ValueError("K must be at least 1")
    if eps2 < 0:
        raise ValueError("eps2 must be non-negative")
    if series.n < 10 * K:
        raise ValueError(f"series of length {series.n} is too short for K={K}")
    model.check_domain(series.values, "series")
    grid = make_grid(series.n, series.dt, cfg.alpha)
    theta = None if theta0 is None else np.atleast_2d(np.asarray(theta0, dtype=float)).copy()
    if theta is not None and theta.shape != (K, model.n_params):
        raise ContractError(f"theta0 must have shape ({K}, {model.n_params})")

    if gamma0 is not None:
        g0 = np.asarray(gamma0, dtype=float)
        if g0.shape == (K, grid.n_coarse):
            gc = g0
        elif g0.shape == (K, grid.n_fine):
            gc = restrict_gamma(g0, grid)
        else:
            raise ContractError(f"gamma0 shape {g0.shape} fits neither grid")
        return _single_run(model, series, grid, K, eps2, cfg, gc, theta, 0)

    best = None
    n_restarts = 1 if K == 1 else cfg.n_restarts
    for r in range(n_restarts):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, r, 7919]))
        gc = restrict_gamma(initial_gamma(K, grid.n_fine, rng), grid)
        res = _single_run(model, series, grid, K, eps2, cfg, gc, theta, r)
        log.info("restart %d: functional %.10g after %d iterations", r, res.functional, res.iterations)
        if best is None or res.functional < best.functional:
            best = res
    return best


def scan_eps2(
    model: SdeModelSpec | str,
    series: UniformTimeSeries,
    K: int,
    eps2_list,
    cfg: SubspaceConfig | None = None,
    *,
    round_trip: bool = False,
    first: ClusteringResult | None = None,
) -> list[ClusteringResult]:
    """Warm-started sweep over increasing ``eps2`` values.

    The first value is solved from scratch (or taken from ``first``), each
    later one starts from its predecessor's parameters and affiliations.
    With ``round_trip=True`` the grid is swept back from the top as well and
    the lower functional per value is kept.
    """
    cfg = cfg or SubspaceConfig()
    if isinstance(model, str):
        model = get_model(model)
    eps = [float(e) for e in eps2_list]
    if not eps:
        raise ValueError("eps2_list is empty")
    if any(b < a for a, b in zip(eps, eps[1:])):
        raise ValueError("eps2_list must be sorted ascending")

    def sweep(values, start):
        out = []
        prev = start
        for e in values:
            if prev is None:
                res = run_subspace(model, series, K, e, cfg)
            else:
                res = run_subspace(model, series, K, e, cfg, gamma0=prev.gamma_coarse, theta0=prev.theta)
            out.append(res)
            prev = res
            log.info("eps2 %.6g: functional %.10g (%d iterations)", e, res.functional, res.iterations)
        return out

    if first is not None and first.eps2 == eps[0]:
        forward = [first] + sweep(eps[1:], first)
    else:
        forward = sweep(eps, None)
    if not round_trip or len(eps) == 1:
        return forward
    backward = sweep(eps[-2::-1], forward[-1])[::-1] + [forward[-1]]
    return [b if b.functional < f.functional else f for f, b in zip(forward, backward)]
