"""Hyperparameter selection.

``eps2``: the affiliation energy, i.e. the detail-band energy of an
orthonormal Haar decomposition of every ``gamma_k`` averaged over clusters,
is computed along an ``eps2`` grid and its maximiser is taken. Small
``eps2`` gives noisy but weak affiliations, large ``eps2`` flattens them.

``K``: a diversity score ``W_K`` (pairwise KL divergences between the
clusters' stationary laws, weighted by cluster occupation) is compared with
the same score on clusterings of reflected Wiener reference paths covering
the data range. The recommended K minimises the gap.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import csv
import logging

import numba
import numpy as np
from scipy.integrate import trapezoid

from .likelihood import UniformTimeSeries
from .models import SdeModelSpec, get_model
from .synth import make_rng
from .subspace import SubspaceConfig, run_subspace

__all__ = [
    "DiagnosticsError",
    "EnergyCurve",
    "DiversityReport",
    "haar_dwt",
    "reflect_pad_pow2",
    "gamma_energy",
    "max_level",
    "select_eps2",
    "stationary_density",
    "density_grid",
    "kl_divergence",
    "diversity",
    "reflected_wiener",
    "gap_statistic",
]

log = logging.getLogger(__name__)

KL_FLOOR = 1e-300
MAX_REMOVED_LEVELS = 9


class DiagnosticsError(RuntimeError):
    """A stationary density cannot be normalised or a selection step failed."""


# ---------------------------------------------------------------------------
# Haar energy


def reflect_pad_pow2(x) -> np.ndarray:
    """Reflect-pad a 1-D signal on the right to the next power of two."""
    x = np.asarray(x, dtype=float)
    n = x.size
    target = 1 << max(int(np.ceil(np.log2(n))), 0) if n > 1 else 1
    if target == n:
        return x.copy()
    return np.pad(x, (0, target - n), mode="reflect")


def haar_dwt(x) -> tuple[np.ndarray, list[np.ndarray]]:
    """Full-depth orthonormal Haar transform of a length-``2^C`` signal.

    Returns ``(approx, details)`` with ``details[0]`` the finest band.
    """
    a = np.asarray(x, dtype=float)
    n = a.size
    if n < 1 or n & (n - 1):
        raise ValueError("signal length must be a power of two")
    details = []
    s = 1.0 / np.sqrt(2.0)
    while a.size > 1:
        even, odd = a[0::2], a[1::2]
        details.append((even - odd) * s)
        a = (even + odd) * s
    return a, details


def max_level(n: int) -> int:
    """Decomposition depth ``C`` for a series of ``n`` samples."""
    return int(np.ceil(np.log2(n))) if n > 1 else 0


def gamma_energy(gamma, dt: float, remove_levels: int = 0) -> float:
    """Cluster-averaged detail energy of the affiliations.

    The approximation band and the ``remove_levels`` finest detail bands are
    discarded.
    """
    g = np.atleast_2d(np.asarray(gamma, dtype=float))
    c = max_level(g.shape[1])
    if remove_levels < 0:
        raise ValueError("remove_levels must be non-negative")
    if remove_levels >= c:
        raise DiagnosticsError(f"removing {remove_levels} of {c} levels leaves no detail band")
    total = 0.0
    for row in g:
        _, details = haar_dwt(reflect_pad_pow2(row))
        total += sum(float(np.dot(d, d)) for d in details[remove_levels:])
    return total * dt / g.shape[0]


@dataclass
class EnergyCurve:
    eps2_values: np.ndarray
    energy: np.ndarray  # (levels, n_eps2)
    argmax_per_level: np.ndarray

    def recommended(self, level: int = 0) -> float:
        return float(self.argmax_per_level[level])

    def argmax_index(self, level: int = 0) -> int:
        return int(np.argmax(self.energy[level]))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["eps2"] + [f"energy_L{j}" for j in range(self.energy.shape[0])])
            for i, e in enumerate(self.eps2_values):
                w.writerow([repr(float(e))] + [repr(float(v)) for v in self.energy[:, i]])


def select_eps2(results, max_removed: int = MAX_REMOVED_LEVELS) -> EnergyCurve:
    """Energy curve over a list of clustering results sharing K and data."""
    results = list(results)
    if not results:
        raise ValueError("no clustering results given")
    ks = {r.K for r in results}
    if len(ks) != 1:
        raise ValueError("results must share K")
    n = results[0].gamma_fine.shape[1]
    n_levels = min(max_level(n) - 1, max_removed) + 1
    order = np.argsort([r.eps2 for r in results], kind="stable")
    results = [results[i] for i in order]
    eps = np.array([r.eps2 for r in results])
    energy = np.empty((n_levels, eps.size))
    for j, r in enumerate(results):
        for lev in range(n_levels):
            energy[lev, j] = gamma_energy(r.gamma_fine, r.dt, lev)
    return EnergyCurve(eps, energy, eps[np.argmax(energy, axis=1)])


# ---------------------------------------------------------------------------
# stationary densities and diversity


def _log_stationary(model: SdeModelSpec, theta, grid) -> np.ndarray:
    x = np.asarray(grid, dtype=float)
    with np.errstate(all="ignore"):
        g2 = model.diffusion(x, theta) ** 2
        integrand = 2.0 * model.drift(x, theta) / g2
        # trapezoid increments, summed outwards from the least steep node so
        # a singular integrand near a domain edge cannot swamp the partial sums
        incr = 0.5 * (integrand[1:] + integrand[:-1]) * np.diff(x)
    c = int(np.nanargmin(np.abs(integrand)))
    right = np.concatenate([[0.0], np.cumsum(incr[c:])])
    left = -np.cumsum(incr[:c][::-1])[::-1]
    return np.concatenate([left, right]) - np.log(g2)


def stationary_density(model: SdeModelSpec, theta, grid, label: str = "") -> np.ndarray:
    """Normalised invariant density ``(1/g^2) exp(int 2 f / g^2)`` on ``grid``."""
    x = np.asarray(grid, dtype=float)
    if x.ndim != 1 or x.size < 3 or np.any(np.diff(x) <= 0):
        raise ValueError("grid must be strictly increasing with at least three points")
    theta = model.check_theta(theta)
    lp = _log_stationary(model, theta, x)
    if not np.all(np.isfinite(lp)):
        raise DiagnosticsError(f"stationary density {label or model.name} overflows on the grid")
    p = np.exp(lp - lp.max())
    mass = trapezoid(p, x)
    if not (np.isfinite(mass) and mass > 0):
        raise DiagnosticsError(f"stationary density {label or model.name} cannot be normalised")
    return p / mass


def _support(model: SdeModelSpec, theta, n: int = 20001) -> tuple[float, float]:
    # widen a search window until the density is negligible at both ends
    lo_dom, hi_dom = model.state_domain
    half = 10.0
    for _ in range(40):
        lo = max(-half, lo_dom + 1e-9 * max(1.0, abs(lo_dom))) if np.isfinite(lo_dom) else -half
        hi = min(half, hi_dom) if np.isfinite(hi_dom) else half
        x = np.linspace(lo, hi, n)
        lp = _log_stationary(model, theta, x)
        if not np.all(np.isfinite(lp)):
            raise DiagnosticsError(f"{model.name}: stationary density overflows for theta={theta}")
        lp -= lp.max()
        open_lo = lp[0] > -30.0 and not (np.isfinite(lo_dom) and lo <= lo_dom + 1e-6)
        open_hi = lp[-1] > -30.0 and not (np.isfinite(hi_dom) and hi >= hi_dom)
        if not (open_lo or open_hi):
            p = np.exp(lp)
            p /= trapezoid(p, x)
            mean = trapezoid(x * p, x)
            std = np.sqrt(max(trapezoid((x - mean) ** 2 * p, x), 0.0))
            return mean, std
        half *= 2.0
    raise DiagnosticsError(f"{model.name}: stationary density for theta={theta} is not normalisable")


def density_grid(model: SdeModelSpec, thetas, n: int = 4096, width: float = 8.0) -> np.ndarray:
    """Shared grid covering ``mean +- width * std`` of every cluster's law."""
    lo, hi = np.inf, -np.inf
    for th in np.atleast_2d(thetas):
        m, s = _support(model, th)
        s = max(s, 1e-12)
        lo, hi = min(lo, m - width * s), max(hi, m + width * s)
    d_lo, d_hi = model.state_domain
    if np.isfinite(d_lo):
        lo = max(lo, d_lo + 1e-9 * max(1.0, hi - d_lo))
    if np.isfinite(d_hi):
        hi = min(hi, d_hi - 1e-9 * max(1.0, d_hi - lo))
    return np.linspace(lo, hi, n)


def kl_divergence(p, q, grid) -> float:
    """``int p ln(p / q)`` by trapezoid with densities floored inside the log."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    integrand = p * (np.log(np.maximum(p, KL_FLOOR)) - np.log(np.maximum(q, KL_FLOOR)))
    return float(trapezoid(integrand, grid))


def diversity(thetas, gamma, model: SdeModelSpec | str, dt: float, *, n_grid: int = 4096, return_matrix: bool = False):
    """Occupation-weighted sum of pairwise KL divergences ``W_K``.

    ``d_ij = nu_j KL(p_i || p_j)`` with ``nu_j = sum_t gamma_j(t) dt``.
    """
    if isinstance(model, str):
        model = get_model(model)
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    gamma = np.atleast_2d(np.asarray(gamma, dtype=float))
    k = thetas.shape[0]
    if gamma.shape[0] != k:
        raise ValueError("gamma and thetas disagree on K")
    nu = gamma.sum(axis=1) * dt
    grid = density_grid(model, thetas, n=n_grid)
    dens = [stationary_density(model, th, grid, label=f"cluster {i}") for i, th in enumerate(thetas)]
    d = np.zeros((k, k))
    for i in range(k):
        for j in range(k):
            if i != j:
                d[i, j] = nu[j] * max(kl_divergence(dens[i], dens[j], grid), 0.0)
    w = float(d.sum())
    return (w, d) if return_matrix else w


# ---------------------------------------------------------------------------
# reference processes and the gap statistic


@numba.njit(cache=True)
def _reflected_kernel(x0, steps, lo, hi, out):
    x = x0
    out[0] = x
    span = hi - lo
    for i in range(steps.size):
        x += steps[i]
        if x > hi or x < lo:
            # fold back; the modulo takes care of multiple crossings
            r = (x - lo) % (2.0 * span)
            x = lo + (r if r <= span else 2.0 * span - r)
        out[i + 1] = x


def reflected_wiener(n: int, dt: float, lo: float, hi: float, scale: float, seed: int = 0, x0: float | None = None) -> UniformTimeSeries:
    """Scaled Wiener path confined to ``[lo, hi]`` by reflection."""
    if not lo < hi:
        raise ValueError("need lo < hi")
    if scale < 0:
        raise ValueError("scale must be non-negative")
    x0 = 0.5 * (lo + hi) if x0 is None else float(x0)
    steps = np.sqrt(dt) * scale * make_rng(seed).standard_normal(n - 1)
    out = np.empty(n)
    _reflected_kernel(x0, steps, float(lo), float(hi), out)
    return UniformTimeSeries(0.0, dt, out)


@dataclass
class DiversityReport:
    k_values: np.ndarray
    logW: np.ndarray
    logW_ref_mean: np.ndarray
    logW_ref_std: np.ndarray
    gap: np.ndarray
    B: int
    n_success: np.ndarray
    results: dict = field(default_factory=dict, repr=False)

    @property
    def recommended_k(self) -> int:
        # argmin returns the first minimiser, i.e. the smallest K on ties
        return int(self.k_values[int(np.argmin(self.gap))])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["K", "logW", "logW_ref_mean", "logW_ref_std", "gap", "n_ref"])
            for i, k in enumerate(self.k_values):
                w.writerow(
                    [int(k), repr(float(self.logW[i])), repr(float(self.logW_ref_mean[i])),
                     repr(float(self.logW_ref_std[i])), repr(float(self.gap[i])), int(self.n_success[i])]
                )


def _log_w(w: float) -> float:
    return float(np.log(max(w, KL_FLOOR)))


def gap_statistic(
    model: SdeModelSpec | str,
    series: UniformTimeSeries,
    k_values,
    eps2: float,
    B: int = 10,
    cfg: SubspaceConfig | None = None,
    *,
    seed: int = 0,
    threads: int = 1,
) -> DiversityReport:
    """Gap between reference and data log-diversity for every K.

    References are reflected Wiener paths on ``[min x, max x]`` whose
    one-step increment spread matches the data; the same ``B`` references
    are reused for every K and clustered with the same settings.
    """
    if isinstance(model, str):
        model = get_model(model)
    cfg = cfg or SubspaceConfig()
    k_values = np.asarray(sorted(int(k) for k in k_values))
    if k_values.size == 0:
        raise ValueError("k_values is empty")
    if B < 1:
        raise ValueError("B must be positive")
    x = series.values
    lo, hi = float(x.min()), float(x.max())
    scale = float(np.std(np.diff(x)) / np.sqrt(series.dt))
    seeds = np.random.SeedSequence(seed).spawn(B)
    refs = [
        reflected_wiener(series.n, series.dt, lo, hi, scale, seed=int(s.generate_state(1)[0]), x0=float(x[0]))
        for s in seeds
    ]

    def score(data, k):
        res = run_subspace(model, data, int(k), eps2, cfg)
        return res, diversity(res.theta, res.gamma_fine, model, data.dt)

    log_w = np.empty(k_values.size)
    ref_mean = np.empty(k_values.size)
    ref_std = np.empty(k_values.size)
    n_ok = np.zeros(k_values.size, dtype=int)
    results: dict = {}
    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    try:
        for i, k in enumerate(k_values):
            res, w = score(series, k)
            results[int(k)] = res
            log_w[i] = _log_w(w)

            def ref_job(ref):
                try:
                    return _log_w(score(ref, k)[1])
                except Exception as exc:  # any failed reference run is dropped
                    log.warning("reference clustering failed for K=%d: %s", k, exc)
                    return None

            vals = list(pool.map(ref_job, refs)) if pool else [ref_job(r) for r in refs]
            vals = [v for v in vals if v is not None]
            n_ok[i] = len(vals)
            if len(vals) < B / 2:
                raise DiagnosticsError(f"only {len(vals)} of {B} reference runs succeeded for K={k}")
            ref_mean[i] = float(np.mean(vals))
            ref_std[i] = float(np.std(vals))
            log.info("K=%d: logW %.4f, reference %.4f +- %.4f", k, log_w[i], ref_mean[i], ref_std[i])
    finally:
        if pool:
            pool.shutdown()
    return DiversityReport(
        k_values=k_values,
        logW=log_w,
        logW_ref_mean=ref_mean,
        logW_ref_std=ref_std,
        gap=ref_mean - log_w,
        B=B,
        n_success=n_ok,
        results=results,
    )
