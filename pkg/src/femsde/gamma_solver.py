"""Affiliation problem on a coarse P1 finite-element grid.

The fine-grid fitness rows are reduced onto hat functions of a coarser
uniform grid, the regularised problem

    min_G  (1/n) [ sum_k b_k . g_k + eps2 * sum_k g_k' H g_k ]
    s.t.   G >= 0,  columns of G sum to one

is solved by a spectral projected gradient method (Barzilai-Borwein step,
nonmonotone Armijo line search, Euclidean projection of every time-node
column onto the probability simplex) and the result is interpolated
linearly back to the fine grid.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
import logging

import numpy as np
from numba import njit
from scipy import sparse

from .likelihood import ContractError

__all__ = [
    "FemGrid",
    "SpgConfig",
    "QpResult",
    "make_grid",
    "reduce_fitness",
    "reduction_matrix",
    "interpolation_matrix",
    "assemble_stiffness",
    "apply_stiffness",
    "project_simplex_columns",
    "qp_objective",
    "solve_qp",
    "interpolate_gamma",
    "restrict_gamma",
    "is_feasible",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FemGrid:
    n_fine: int
    n_coarse: int
    alpha: float
    dt: float

    def __post_init__(self):
        if self.n_coarse < 2:
            raise ValueError("coarse grid needs at least two nodes")
        if self.n_coarse > self.n_fine:
            raise ValueError("coarse grid cannot be finer than the data grid")
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")

    @property
    def dtau(self) -> float:
        return (self.n_fine - 1) * self.dt / (self.n_coarse - 1)

    @property
    def t(self) -> np.ndarray:
        return self.dt * np.arange(self.n_fine)

    @property
    def tau(self) -> np.ndarray:
        return self.dtau * np.arange(self.n_coarse)


def make_grid(n_fine: int, dt: float, alpha: float) -> FemGrid:
    """Coarse grid with ``round(alpha * n_fine)`` nodes (at least two)."""
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    n_coarse = n_fine if alpha == 1 else max(2, int(round(alpha * n_fine)))
    return FemGrid(n_fine=n_fine, n_coarse=n_coarse, alpha=alpha, dt=dt)


def interpolation_matrix(grid: FemGrid) -> sparse.csr_matrix:
    """``(n_fine, n_coarse)`` matrix of hat-function values ``v_j(t_i)``."""
    n, m = grid.n_fine, grid.n_coarse
    if n == m:
        return sparse.identity(n, format="csr")
    s = np.arange(n) * ((m - 1) / (n - 1))
    j = np.minimum(np.floor(s).astype(int), m - 2)
    frac = s - j
    rows = np.concatenate([np.arange(n), np.arange(n)])
    cols = np.concatenate([j, j + 1])
    vals = np.concatenate([1.0 - frac, frac])
    return sparse.csr_matrix((vals, (rows, cols)), shape=(n, m))


def reduction_matrix(grid: FemGrid) -> sparse.csr_matrix:
    """``(n_coarse, n_fine)`` matrix of trapezoid weights times hat values."""
    w = np.full(grid.n_fine, grid.dt)
    w[0] = w[-1] = 0.5 * grid.dt
    return (interpolation_matrix(grid).T @ sparse.diags(w)).tocsr()


def reduce_fitness(fitness, grid: FemGrid, *, normalize: bool = False) -> np.ndarray:
    """Project fine-grid rows onto the hat functions: ``b_j = int f v_j dt``.

    Accepts one row or a ``(K, n_fine)`` stack. With ``normalize=True`` each
    entry is divided by ``int v_j dt`` (lumped-mass projection), which makes
    the reduction a weighted average of ``f`` around node ``j``.
    """
    f = np.asarray(fitness, dtype=float)
    if f.shape[-1] != grid.n_fine:
        raise ContractError(f"row length {f.shape[-1]} != grid size {grid.n_fine}")
    r = reduction_matrix(grid)
    b = (r @ f.T).T if f.ndim == 2 else r @ f
    if normalize:
        b = b / np.asarray(r.sum(axis=1)).ravel()
    return b


def assemble_stiffness(n_clusters: int, n_coarse: int) -> sparse.csr_matrix:
    """Block-diagonal stiffness: ``n_clusters`` copies of tridiag(-1, 2, -1)."""
    if n_clusters < 1 or n_coarse < 2:
        raise ValueError("need n_clusters >= 1 and n_coarse >= 2")
    h = sparse.diags(
        [-np.ones(n_coarse - 1), 2.0 * np.ones(n_coarse), -np.ones(n_coarse - 1)],
        [-1, 0, 1],
        format="csr",
    )
    return sparse.block_diag([h] * n_clusters, format="csr")


def apply_stiffness(gamma: np.ndarray) -> np.ndarray:
    """Row-wise product ``H g_k`` without forming ``H``."""
    out = 2.0 * gamma
    out[:, 1:] -= gamma[:, :-1]
    out[:, :-1] -= gamma[:, 1:]
    return out


def project_simplex_columns(gamma) -> np.ndarray:
    """Euclidean projection of every column onto the probability simplex."""
    g = np.asarray(gamma, dtype=float)
    squeeze = g.ndim == 1
    if squeeze:
        g = g[:, None]
    k = g.shape[0]
    srt = -np.sort(-g, axis=0)
    css = np.cumsum(srt, axis=0) - 1.0
    idx = np.arange(1, k + 1)[:, None]
    cond = srt - css / idx > 0
    rho = k - 1 - np.argmax(cond[::-1], axis=0)
    tau = css[rho, np.arange(g.shape[1])] / (rho + 1)
    out = np.maximum(g - tau, 0.0)
    return out[:, 0] if squeeze else out


def is_feasible(gamma, tol: float = 1e-10) -> bool:
    g = np.asarray(gamma, dtype=float)
    return bool(np.all(g >= -tol) and np.all(g <= 1 + tol) and np.all(np.abs(g.sum(axis=0) - 1) <= tol))


def qp_objective(b, gamma, eps2: float) -> float:
    """``(1/n) [sum b.G + eps2 sum g_k' H g_k]`` for ``(K, n)`` arrays."""
    b = np.asarray(b, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    n = gamma.shape[1]
    return float((np.sum(b * gamma) + eps2 * np.sum(gamma * apply_stiffness(gamma))) / n)


@dataclass(frozen=True)
class SpgConfig:
    tol: float = 1e-8
    max_iter: int = 10_000
    step_min: float = 1e-10
    step_max: float = 1e10
    memory: int = 10
    armijo: float = 1e-4

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class QpResult:
    gamma: np.ndarray
    objective: float
    iterations: int
    converged: bool
    pg_norm: float
    trace: list


# The kernels below work on node-major (n, K) arrays so that every simplex
# column is contiguous in memory.


@njit(cache=True)
def _project_rows(x, buf):
    n, k = x.shape
    for j in range(n):
        # insertion sort, descending; K is small
        for i in range(k):
            v = x[j, i]
            p = i
            while p > 0 and buf[p - 1] < v:
                buf[p] = buf[p - 1]
                p -= 1
            buf[p] = v
        css = 0.0
        tau = 0.0
        for r in range(k):
            css += buf[r]
            t = (css - 1.0) / (r + 1)
            if buf[r] - t > 0:
                tau = t
        for i in range(k):
            v = x[j, i] - tau
            x[j, i] = v if v > 0.0 else 0.0


@njit(cache=True)
def _stiff_rows(g, out):
    n, k = g.shape
    for j in range(n):
        for i in range(k):
            v = 2.0 * g[j, i]
            if j > 0:
                v -= g[j - 1, i]
            if j < n - 1:
                v -= g[j + 1, i]
            out[j, i] = v


@njit(cache=True)
def _pg_norm(x, g, d, buf):
    n, k = x.shape
    for j in range(n):
        for i in range(k):
            d[j, i] = x[j, i] - g[j, i]
    _project_rows(d, buf)
    pg = 0.0
    for j in range(n):
        for i in range(k):
            pg = max(pg, abs(d[j, i] - x[j, i]))
    return pg


@njit(cache=True)
def _spg_kernel(b, eps2, x, tol, max_iter, step_min, step_max, memory, armijo, check, trace):
    n, k = x.shape
    scale = 1.0 / n
    buf = np.empty(k)
    hx = np.empty_like(x)
    hd = np.empty_like(x)
    g = np.empty_like(x)
    d = np.empty_like(x)
    _stiff_rows(x, hx)
    f = 0.0
    for j in range(n):
        for i in range(k):
            f += b[j, i] * x[j, i] + eps2 * x[j, i] * hx[j, i]
            g[j, i] = scale * (b[j, i] + 2.0 * eps2 * hx[j, i])
    f *= scale
    trace[0] = f
    pg = _pg_norm(x, g, d, buf)
    step = 1.0 / pg if pg > 0 else step_max
    step = min(max(step, step_min), step_max)
    it = 0
    status = 0
    while pg >= tol and it < max_iter:
        it += 1
        for j in range(n):
            for i in range(k):
                d[j, i] = x[j, i] - step * g[j, i]
        _project_rows(d, buf)
        gtd = 0.0
        for j in range(n):
            for i in range(k):
                d[j, i] -= x[j, i]
                gtd += g[j, i] * d[j, i]
        if gtd >= 0:
            status = 1
            break
        lo = max(0, it - memory)
        fmax = trace[lo]
        for m in range(lo, it):
            fmax = max(fmax, trace[m])
        # quadratic objective: f(x + lam d) = f + lam gtd + lam^2 q
        _stiff_rows(d, hd)
        q = 0.0
        for j in range(n):
            for i in range(k):
                q += d[j, i] * hd[j, i]
        q *= eps2 * scale
        lam = 1.0
        while True:
            f_new = f + lam * gtd + lam * lam * q
            if f_new <= fmax + armijo * lam * gtd or lam < 1e-12:
                break
            lam_q = -0.5 * lam * lam * gtd / (f_new - f - lam * gtd)
            lam = lam_q if 0.1 * lam <= lam_q <= 0.9 * lam else 0.5 * lam
        ss = 0.0
        sy = 0.0
        f = 0.0
        for j in range(n):
            for i in range(k):
                s = lam * d[j, i]
                x[j, i] += s
                hx[j, i] += lam * hd[j, i]
                g_new = scale * (b[j, i] + 2.0 * eps2 * hx[j, i])
                ss += s * s
                sy += s * (g_new - g[j, i])
                g[j, i] = g_new
                f += b[j, i] * x[j, i] + eps2 * x[j, i] * hx[j, i]
        f *= scale
        trace[it] = f
        if check:
            for j in range(n):
                cs = 0.0
                for i in range(k):
                    cs += x[j, i]
                    if x[j, i] < -1e-10:
                        status = 2
                if abs(cs - 1.0) > 1e-10:
                    status = 2
            if status == 2:
                break
        step = step_max if sy <= 0 else min(max(ss / sy, step_min), step_max)
        pg = _pg_norm(x, g, d, buf)
    return it, pg, status


def solve_qp(b, eps2: float, gamma0, cfg: SpgConfig | None = None, *, check: bool = False) -> QpResult:
    """Spectral projected gradient for the block QP over per-node simplexes.

    ``b`` and ``gamma0`` are ``(K, n_coarse)``. ``check=True`` asserts
    feasibility of every iterate.
    """
    cfg = cfg or SpgConfig()
    b = np.asarray(b, dtype=float)
    x = np.array(gamma0, dtype=float)
    if x.shape != b.shape:
        raise ContractError(f"gamma0 shape {x.shape} != b shape {b.shape}")
    if eps2 < 0:
        raise ValueError("eps2 must be non-negative")
    if not is_feasible(x, 1e-8):
        raise ContractError("initial affiliations are not feasible")
    xt = np.ascontiguousarray(project_simplex_columns(x).T)
    trace = np.empty(cfg.max_iter + 1)
    it, pg, status = _spg_kernel(
        np.ascontiguousarray(b.T), float(eps2), xt, cfg.tol, cfg.max_iter, cfg.step_min, cfg.step_max,
        cfg.memory, cfg.armijo, check, trace,
    )
    if status == 2:
        raise AssertionError(f"SPG iterate {it} left the feasible set")
    # clean round-off so columns sum to one within 1e-12
    x = np.clip(xt.T, 0.0, None)
    x /= x.sum(axis=0, keepdims=True)
    return QpResult(
        gamma=x,
        objective=qp_objective(b, x, eps2),
        iterations=it,
        converged=bool(pg < cfg.tol),
        pg_norm=float(pg),
        trace=trace[: it + 1].tolist(),
    )


def interpolate_gamma(gamma_coarse, grid: FemGrid) -> np.ndarray:
    """Piecewise-linear lift of ``(K, n_coarse)`` affiliations to the data grid."""
    gc = np.asarray(gamma_coarse, dtype=float)
    if gc.shape[1] != grid.n_coarse:
        raise ContractError("coarse affiliations do not match the grid")
    return (interpolation_matrix(grid) @ gc.T).T


def restrict_gamma(gamma_fine, grid: FemGrid) -> np.ndarray:
    """Coarse affiliations from fine ones by lumped-mass projection.

    Each coarse column is a convex combination of fine columns, so the
    result stays on the simplex.
    """
    return reduce_fitness(gamma_fine, grid, normalize=True)
