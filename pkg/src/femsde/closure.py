"""Scaling functions and the closed predictive model.

For every cluster the auxiliary series is averaged with the cluster's
affiliation as weight. Each SDE parameter is then regressed, as a
polynomial, on the averaged values of its designated auxiliary series. The
closed model evaluates those polynomials along a known auxiliary path and
integrates the SDE with the resulting time-varying parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import json
import logging
from pathlib import Path

import numpy as np

from .likelihood import UniformTimeSeries
from .models import SdeModelSpec, get_model
from .synth import _substeps, integrate_path, make_rng
from .theta_solver import EmptyClusterError

__all__ = [
    "ClosureFit",
    "RegressionError",
    "cluster_weighted_mean",
    "fit_scaling",
    "reconstruct_theta_path",
    "fit_closure",
    "simulate_closed",
]

log = logging.getLogger(__name__)


class RegressionError(ValueError):
    """The scaling-function regression is under-determined."""


def _values(u) -> np.ndarray:
    return u.values if isinstance(u, UniformTimeSeries) else np.asarray(u, dtype=float)


def cluster_weighted_mean(u, gamma_k) -> float:
    """``sum u gamma_k / sum gamma_k``."""
    u = _values(u)
    w = np.asarray(gamma_k, dtype=float)
    if u.shape != w.shape:
        raise ValueError("u and gamma_k must have the same length")
    mass = w.sum()
    if not mass > 0:
        raise EmptyClusterError("cluster has zero affiliation mass")
    return float(np.dot(u, w) / mass)


def fit_scaling(u_bars, theta_component, degree: int = 1) -> np.ndarray:
    """Least-squares polynomial ``theta ~ S(u)``; coefficients lowest order first."""
    u = np.asarray(u_bars, dtype=float)
    y = np.asarray(theta_component, dtype=float)
    if u.shape != y.shape or u.ndim != 1:
        raise ValueError("u_bars and theta_component must be 1-D of equal length")
    if degree < 0:
        raise ValueError("degree must be non-negative")
    if u.size <= degree:
        raise RegressionError(f"{u.size} points cannot determine a degree-{degree} fit; lower the degree")
    distinct = np.unique(np.round(u / 1e-12)).size
    if distinct <= degree:
        raise RegressionError(
            f"only {distinct} distinct auxiliary values for a degree-{degree} fit; lower the degree"
        )
    # centre and scale for conditioning, then map back to the raw basis
    shift = u.mean()
    span = max(np.ptp(u), 1e-300) if degree > 0 else 1.0
    v = np.polynomial.polynomial.polyvander((u - shift) / span, degree)
    coef, _, rank, _ = np.linalg.lstsq(v, y, rcond=None)
    if rank < degree + 1:
        raise RegressionError(f"rank-deficient degree-{degree} fit; lower the degree")
    scaled = np.polynomial.Polynomial(coef, domain=[shift - span, shift + span], window=[-1, 1])
    raw = scaled.convert(domain=[-1, 1], window=[-1, 1]).coef
    out = np.zeros(degree + 1)
    out[: raw.size] = raw
    return out


def reconstruct_theta_path(result=None, *, theta=None, gamma=None) -> np.ndarray:
    """``theta*(t) = sum_k theta_k gamma_k(t)`` as an ``(n_params, N)`` array."""
    if result is not None:
        theta, gamma = result.theta, result.gamma_fine
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    gamma = np.atleast_2d(np.asarray(gamma, dtype=float))
    if theta.shape[0] != gamma.shape[0]:
        raise ValueError("theta and gamma disagree on K")
    return theta.T @ gamma


@dataclass
class ClosureFit:
    model: str
    u_bars: np.ndarray  # (n_aux, K)
    theta_bars: np.ndarray  # (K, n_params)
    coefficients: list  # per parameter, lowest order first
    degrees: list
    aux_index_per_param: list
    u_range: list  # per parameter (min, max) of the regressed u values
    residuals: list
    clusters: list = field(default_factory=list)

    def evaluate(self, aux, *, clamp_theta: bool = True) -> np.ndarray:
        """Parameters along the auxiliary path(s), ``(n_params, N)``.

        Auxiliary values are clamped to the range seen during fitting and
        the parameters to the model's bounds.
        """
        aux = [_values(a) for a in (aux if isinstance(aux, (list, tuple)) else [aux])]
        n = aux[0].size
        out = np.empty((len(self.coefficients), n))
        for m, coef in enumerate(self.coefficients):
            lo, hi = self.u_range[m]
            u = np.clip(aux[self.aux_index_per_param[m]], lo, hi)
            out[m] = np.polynomial.polynomial.polyval(u, coef)
        if clamp_theta:
            spec = get_model(self.model)
            lo, hi = spec.lower[:, None], spec.upper[:, None]
            outside = (out < lo) | (out > hi)
            if outside.any():
                log.warning(
                    "%d parameter values outside the model bounds were clamped", int(outside.sum())
                )
                out = np.clip(out, lo, hi)
        return out

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "u_bars": np.asarray(self.u_bars).tolist(),
            "theta_bars": np.asarray(self.theta_bars).tolist(),
            "coefficients": [np.asarray(c).tolist() for c in self.coefficients],
            "degrees": [int(d) for d in self.degrees],
            "aux_index_per_param": [int(i) for i in self.aux_index_per_param],
            "u_range": [[float(a), float(b)] for a, b in self.u_range],
            "residuals": [np.asarray(r).tolist() for r in self.residuals],
            "clusters": [int(k) for k in self.clusters],
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=1)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_dict(cls, d: dict) -> "ClosureFit":
        return cls(
            model=d["model"],
            u_bars=np.asarray(d["u_bars"], dtype=float),
            theta_bars=np.asarray(d["theta_bars"], dtype=float),
            coefficients=[np.asarray(c, dtype=float) for c in d["coefficients"]],
            degrees=list(d["degrees"]),
            aux_index_per_param=list(d["aux_index_per_param"]),
            u_range=[tuple(r) for r in d["u_range"]],
            residuals=[np.asarray(r, dtype=float) for r in d["residuals"]],
            clusters=list(d.get("clusters", [])),
        )

    @classmethod
    def from_json(cls, path) -> "ClosureFit":
        return cls.from_dict(json.loads(Path(path).read_text()))


def fit_closure(
    result,
    aux,
    degrees=1,
    aux_index_per_param=None,
    *,
    min_share: float = 1e-3,
) -> ClosureFit:
    """Regress each cluster parameter on its auxiliary series' cluster means.

    ``aux`` is one series or a list; ``aux_index_per_param`` names the series
    driving each parameter and is required when more than one is given.
    Clusters holding less than ``min_share`` of the total affiliation mass
    are left out of the regression.
    """
    aux = list(aux) if isinstance(aux, (list, tuple)) else [aux]
    theta = np.atleast_2d(result.theta)
    gamma = np.atleast_2d(result.gamma_fine)
    k, n_params = theta.shape
    if aux_index_per_param is None:
        if len(aux) != 1:
            raise ValueError("aux_index_per_param is required with several auxiliary series")
        aux_index_per_param = [0] * n_params
    if len(aux_index_per_param) != n_params:
        raise ValueError("aux_index_per_param needs one entry per parameter")
    if any(not 0 <= i < len(aux) for i in aux_index_per_param):
        raise ValueError("aux_index_per_param refers to a missing auxiliary series")
    if np.isscalar(degrees):
        degrees = [int(degrees)] * n_params
    if len(degrees) != n_params:
        raise ValueError("degrees needs one entry per parameter")

    share = gamma.sum(axis=1) / gamma.sum()
    keep = [j for j in range(k) if share[j] >= min_share]
    dropped = sorted(set(range(k)) - set(keep))
    if dropped:
        log.warning("clusters %s carry almost no weight and are left out of the regression", dropped)
    u_bars = np.full((len(aux), k), np.nan)
    for a, series in enumerate(aux):
        for j in keep:
            u_bars[a, j] = cluster_weighted_mean(series, gamma[j])

    coefficients, ranges, residuals = [], [], []
    for m in range(n_params):
        u = u_bars[aux_index_per_param[m], keep]
        y = theta[keep, m]
        coef = fit_scaling(u, y, degrees[m])
        coefficients.append(coef)
        ranges.append((float(u.min()), float(u.max())))
        residuals.append(y - np.polynomial.polynomial.polyval(u, coef))
    return ClosureFit(
        model=result.model,
        u_bars=u_bars,
        theta_bars=theta,
        coefficients=coefficients,
        degrees=list(degrees),
        aux_index_per_param=list(aux_index_per_param),
        u_range=ranges,
        residuals=residuals,
        clusters=keep,
    )


def simulate_closed(
    model: SdeModelSpec | str,
    closure: ClosureFit,
    aux,
    x0: float,
    substeps: int = 100,
    seed: int = 0,
    milstein: bool | None = None,
) -> UniformTimeSeries:
    """Integrate the closed model along the given auxiliary path(s).

    Parameters are held at their left-node value within each output step,
    which is split into ``substeps`` internal steps.
    """
    if isinstance(model, str):
        model = get_model(model)
    if substeps < 1:
        raise ValueError("substeps must be positive")
    aux_list = list(aux) if isinstance(aux, (list, tuple)) else [aux]
    ref = aux_list[0]
    if not isinstance(ref, UniformTimeSeries):
        raise TypeError("auxiliary input must be UniformTimeSeries")
    theta_path = closure.evaluate(aux_list)
    n = ref.n
    dt = ref.dt / substeps
    _substeps(ref.dt, dt)
    rng = make_rng(seed)
    dw = np.sqrt(dt) * rng.standard_normal((n - 1) * substeps)
    step_theta = np.repeat(theta_path[:, :-1].T, substeps, axis=0)
    out = np.empty(n)
    out[0] = x0
    out[1:] = integrate_path(
        model, x0, step_theta, dw, dt, stride=substeps, milstein=milstein, rng=rng, reflect=True
    )
    return UniformTimeSeries(ref.t0, ref.dt, out)
