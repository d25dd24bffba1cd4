"""Synthetic non-stationary datasets.

A slow auxiliary process ``u(t)`` is produced by a fourth-order Butterworth
shaping filter driven by white noise (a 4-D linear SDE), the target SDE
parameters are set to ``theta_m(t) = S_m(u(t))`` and the target SDE is
integrated on a fine internal grid and downsampled.

Random numbers come from the counter-based Philox generator. Fine-grid
Wiener increments for a refinement check can be summed pairwise to obtain
exactly the increments of the coarse grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict, replace
import logging
from typing import Callable

import numba
import numpy as np

from .likelihood import UniformTimeSeries
from .models import SdeModelSpec, get_model

__all__ = [
    "BUTTERWORTH4",
    "AuxProcessConfig",
    "ExampleConfig",
    "SyntheticDataset",
    "SimulationError",
    "SCALING_FUNCTIONS",
    "aux_drift_matrix",
    "simulate_aux",
    "simulate_sde",
    "simulate_switching",
    "integrate_path",
    "generate_example",
    "default_example_config",
    "make_rng",
]

log = logging.getLogger(__name__)

BUTTERWORTH4 = (1.0, 2.61, 3.41, 2.61)
MODEL_CODES = {"ou": 0, "logdrift": 1, "doublewell": 2}
_CHUNK_STEPS = 1 << 18


class SimulationError(RuntimeError):
    pass


def make_rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


# ---------------------------------------------------------------------------
# auxiliary process


@dataclass(frozen=True)
class AuxProcessConfig:
    """Butterworth-shaped OU process; ``u`` relaxes towards ``mean``."""

    T_c: float = 15.0
    b0: float = 1.0
    a: tuple[float, float, float, float] = BUTTERWORTH4
    x0: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    dt_internal: float = 1e-4
    seed: int = 0
    mean: float = 0.0

    def __post_init__(self):
        if not self.T_c > 0:
            raise ValueError("T_c must be positive")
        if self.b0 < 0:
            raise ValueError("b0 must be non-negative")
        if len(self.a) != 4 or len(self.x0) != 4:
            raise ValueError("a and x0 need four entries")


def aux_drift_matrix(cfg: AuxProcessConfig) -> np.ndarray:
    """Drift matrix ``D`` of ``dU = D (U - mean e_1) dt + B dW``.

    Controllable canonical form of the Butterworth denominator in the scaled
    variable ``T_c s``; all eigenvalues lie in the left half plane.
    """
    a0, a1, a2, a3 = cfg.a
    comp = np.array(
        [
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
            [-a0, -a1, -a2, -a3],
        ]
    )
    return comp / cfg.T_c


@numba.njit(cache=True)
def _aux_kernel(state, drift, mean, b0, dt, xi, out):
    sq = np.sqrt(dt)
    n = xi.size
    for i in range(n):
        u0 = state[0] - mean
        d0 = drift[0, 0] * u0 + drift[0, 1] * state[1] + drift[0, 2] * state[2] + drift[0, 3] * state[3]
        d1 = drift[1, 0] * u0 + drift[1, 1] * state[1] + drift[1, 2] * state[2] + drift[1, 3] * state[3]
        d2 = drift[2, 0] * u0 + drift[2, 1] * state[1] + drift[2, 2] * state[2] + drift[2, 3] * state[3]
        d3 = drift[3, 0] * u0 + drift[3, 1] * state[1] + drift[3, 2] * state[2] + drift[3, 3] * state[3]
        state[0] += d0 * dt
        state[1] += d1 * dt
        state[2] += d2 * dt
        state[3] += d3 * dt + b0 * sq * xi[i]
        out[i] = state[0]


def _aux_fine_path(cfg: AuxProcessConfig, n_steps: int, rng: np.random.Generator, state=None):
    """Yield chunks of ``u`` at the internal steps ``1..n_steps``."""
    drift = aux_drift_matrix(cfg)
    state = np.array(cfg.x0, dtype=float) if state is None else state
    done = 0
    while done < n_steps:
        m = min(_CHUNK_STEPS, n_steps - done)
        xi = rng.standard_normal(m)
        out = np.empty(m)
        _aux_kernel(state, drift, float(cfg.mean), float(cfg.b0), float(cfg.dt_internal), xi, out)
        done += m
        yield out


def _substeps(dt_out: float, dt_internal: float) -> int:
    if dt_internal > dt_out * (1 + 1e-12):
        raise ValueError("internal step must not exceed the output step")
    m = int(round(dt_out / dt_internal))
    if abs(m * dt_internal - dt_out) > 1e-9 * dt_out:
        raise ValueError("output step must be an integer multiple of the internal step")
    return m


def simulate_aux(cfg: AuxProcessConfig, n_out: int, dt_out: float) -> UniformTimeSeries:
    """First component of the 4-D shaping process sampled every ``dt_out``."""
    m = _substeps(dt_out, cfg.dt_internal)
    rng = make_rng(cfg.seed)
    out = np.empty(n_out)
    out[0] = cfg.x0[0]
    fine = np.concatenate(list(_aux_fine_path(cfg, (n_out - 1) * m, rng))) if n_out > 1 else np.empty(0)
    out[1:] = fine[m - 1 :: m]
    return UniformTimeSeries(0.0, dt_out, out)


# ---------------------------------------------------------------------------
# target SDE integration


@numba.njit(cache=True)
def _coeffs(code, x, t1, t2, t3):
    # returns drift, diffusion, d diffusion / dx
    if code == 0:
        return t1 - t2 * x, t3, 0.0
    elif code == 1:
        return 2.0 - t1 * x - np.log(x * x), t2 * x, t2
    else:
        r = np.sqrt(1.0 + x * x)
        return t1 * x - x * x * x, t2 * r, t2 * x / r


@numba.njit(cache=True)
def _sde_kernel(code, x, thetas, dw, dt, milstein, lower, stride, out):
    """Advance ``x`` through ``dw.size`` steps; record every ``stride``-th.

    Returns the final state and the index of the first step that left the
    domain (``-1`` if none).
    """
    k = 0
    for i in range(dw.size):
        f, g, gx = _coeffs(code, x, thetas[i, 0], thetas[i, 1], thetas[i, 2])
        xn = x + f * dt + g * dw[i]
        if milstein:
            xn += 0.5 * g * gx * (dw[i] * dw[i] - dt)
        if not (xn > lower) or not np.isfinite(xn):
            return x, i
        x = xn
        if (i + 1) % stride == 0:
            out[k] = x
            k += 1
    return x, -1


def _python_kernel(model, x, thetas, dw, dt, milstein, stride, out):
    k = 0
    for i in range(dw.size):
        th = thetas[i, : model.n_params]
        f = float(model.drift(x, th))
        g = float(model.diffusion(x, th))
        xn = x + f * dt + g * dw[i]
        if milstein:
            xn += 0.5 * g * float(model.diffusion_dx(x, th)) * (dw[i] ** 2 - dt)
        if not model.in_domain(xn):
            return x, i
        x = xn
        if (i + 1) % stride == 0:
            out[k] = x
            k += 1
    return x, -1


def _uses_milstein(model: SdeModelSpec) -> bool:
    # additive noise: Milstein and Euler-Maruyama coincide
    return model.name != "ou"


def integrate_path(
    model: SdeModelSpec,
    x0: float,
    thetas: np.ndarray,
    dw: np.ndarray,
    dt: float,
    *,
    stride: int = 1,
    milstein: bool | None = None,
    max_halvings: int = 6,
    rng: np.random.Generator | None = None,
    reflect: bool = False,
) -> np.ndarray:
    """Integrate on a fixed grid with given Wiener increments ``dw``.

    ``thetas[i]`` is the parameter vector used in step ``i``. Returns the
    states after every ``stride`` steps. A step leaving the state domain
    triggers a Brownian-bridge refinement of that step (halved step size),
    repeated up to ``max_halvings`` times. If that still fails the path is
    either mirrored at the domain boundary (``reflect=True``) or a
    :class:`SimulationError` is raised.
    """
    milstein = _uses_milstein(model) if milstein is None else milstein
    thetas = np.ascontiguousarray(np.asarray(thetas, dtype=float))
    if thetas.ndim == 1:
        thetas = np.broadcast_to(thetas, (dw.size, thetas.size))
    th3 = np.zeros((dw.size, 3))
    th3[:, : thetas.shape[1]] = thetas
    dw = np.ascontiguousarray(dw, dtype=float)
    n_out = dw.size // stride
    out = np.empty(n_out)
    code = MODEL_CODES.get(model.name, -1)
    lower = model.state_domain[0]
    x = float(x0)
    start = 0
    k_out = 0
    rng = rng or make_rng(0)
    while start < dw.size:
        seg_out = np.empty(out.size - k_out)
        # keep output strides aligned with the global step index
        seg_stride_offset = start % stride
        if seg_stride_offset:
            raise AssertionError("restart must happen on an output boundary")
        if code >= 0:
            x_end, fail = _sde_kernel(code, x, th3[start:], dw[start:], dt, milstein, lower, stride, seg_out)
        else:
            x_end, fail = _python_kernel(model, x, th3[start:], dw[start:], dt, milstein, stride, seg_out)
        if fail < 0:
            out[k_out:] = seg_out
            return out
        # redo the output block containing the failing step on a refined grid
        block = (start + fail) // stride
        done_outputs = block - start // stride
        out[k_out : k_out + done_outputs] = seg_out[:done_outputs]
        k_out += done_outputs
        b0 = block * stride
        x = float(out[k_out - 1]) if k_out > 0 else float(x0)
        x = _refine_block(
            model, code, x, th3[b0 : b0 + stride], dw[b0 : b0 + stride], dt, milstein, lower, max_halvings, rng, reflect
        )
        out[k_out] = x
        k_out += 1
        start = b0 + stride
    return out


def _refine_block(model, code, x, th3, dw, dt, milstein, lower, max_halvings, rng, reflect=False):
    for level in range(1, max_halvings + 1):
        # Brownian bridge: split each increment into two conditionally exact halves
        fine_dw = dw
        fine_th = th3
        h = dt
        for _ in range(level):
            mid = 0.5 * fine_dw + 0.5 * np.sqrt(h) * rng.standard_normal(fine_dw.size)
            fine_dw = np.column_stack([mid, fine_dw - mid]).ravel()
            fine_th = np.repeat(fine_th, 2, axis=0)
            h *= 0.5
        buf = np.empty(1)
        if code >= 0:
            x_end, fail = _sde_kernel(code, x, np.ascontiguousarray(fine_th), fine_dw, h, milstein, lower, fine_dw.size, buf)
        else:
            x_end, fail = _python_kernel(model, x, fine_th, fine_dw, h, milstein, fine_dw.size, buf)
        if fail < 0:
            log.warning("%s: state left the domain; step refined %d times", model.name, level)
            return float(buf[0])
    if reflect:
        log.warning("%s: state left the domain; mirrored at the boundary", model.name)
        return _reflect_block(model, x, th3, dw, dt, milstein, lower)
    raise SimulationError(
        f"{model.name}: path leaves the state domain even after {max_halvings} step halvings"
    )


def _reflect_block(model, x, th3, dw, dt, milstein, lower):
    for i in range(dw.size):
        th = th3[i, : model.n_params]
        g = float(model.diffusion(x, th))
        xn = x + float(model.drift(x, th)) * dt + g * dw[i]
        if milstein:
            xn += 0.5 * g * float(model.diffusion_dx(x, th)) * (dw[i] ** 2 - dt)
        if not np.isfinite(xn):
            raise SimulationError(f"{model.name}: path diverged")
        if xn <= lower:
            xn = lower + max(lower - xn, 1e-12 * max(1.0, abs(lower)))
        x = xn
    return float(x)


def simulate_sde(
    model: SdeModelSpec,
    theta,
    x0: float,
    n_out: int,
    dt_out: float,
    dt_internal: float = 1e-4,
    seed: int = 0,
    milstein: bool | None = None,
) -> UniformTimeSeries:
    """Stationary-parameter simulation sampled every ``dt_out`` (``n_out`` samples)."""
    theta = model.check_theta(theta)
    m = _substeps(dt_out, dt_internal)
    rng = make_rng(seed)
    out = np.empty(n_out)
    out[0] = x0
    x = float(x0)
    done = 1
    chunk_out = max(1, _CHUNK_STEPS // m)
    while done < n_out:
        c = min(chunk_out, n_out - done)
        dw = np.sqrt(dt_internal) * rng.standard_normal(c * m)
        seg = integrate_path(model, x, theta, dw, dt_internal, stride=m, milstein=milstein, rng=rng)
        out[done : done + c] = seg
        x = float(seg[-1])
        done += c
    return UniformTimeSeries(0.0, dt_out, out)


def simulate_switching(
    model: SdeModelSpec,
    thetas,
    labels,
    x0: float,
    dt_out: float,
    dt_internal: float = 1e-4,
    seed: int = 0,
) -> SyntheticDataset:
    """Regime-switching path with known hard affiliations.

    ``labels[i]`` selects the row of ``thetas`` used on ``[t_i, t_{i+1})``;
    the returned dataset carries the one-hot ``gamma_true``.
    """
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    labels = np.asarray(labels, dtype=int)
    for th in thetas:
        model.check_theta(th)
    n = labels.size
    m = _substeps(dt_out, dt_internal)
    rng = make_rng(seed)
    step_theta = np.repeat(thetas[labels[:-1]], m, axis=0)
    dw = np.sqrt(dt_internal) * rng.standard_normal((n - 1) * m)
    out = np.empty(n)
    out[0] = x0
    out[1:] = integrate_path(model, x0, step_theta, dw, dt_internal, stride=m, rng=rng)
    gamma = np.zeros((thetas.shape[0], n))
    gamma[labels, np.arange(n)] = 1.0
    return SyntheticDataset(
        x=UniformTimeSeries(0.0, dt_out, out),
        aux=[],
        theta_true=thetas[labels].T,
        model_id=model.name,
        example="switching",
        gamma_true=gamma,
        metadata={"seed": int(seed), "dt_internal": dt_internal},
    )


# ---------------------------------------------------------------------------
# example datasets


def _s_ou(u):
    u = np.asarray(u, dtype=float)
    return np.stack([2.0 * u, 1.0 / ((u - 1.0) ** 4 + 0.1), (u - 1.0) ** 2 + 0.1])


def _s_logdrift(u, v):
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    return np.stack([(u + 1.0) ** 4 + 0.1, -2.0 * v + 2.0])


def _s_doublewell(u):
    u = np.asarray(u, dtype=float)
    return np.stack([-0.4 * (u - 1.0) ** 2 + 2.5, -4.0 * u + 5.0])


SCALING_FUNCTIONS: dict[str, Callable[..., np.ndarray]] = {
    "ou": _s_ou,
    "logdrift_2aux": _s_logdrift,
    "doublewell": _s_doublewell,
}

_EXAMPLE_MODEL = {"ou": "ou", "logdrift_2aux": "logdrift", "doublewell": "doublewell"}


@dataclass(frozen=True)
class ExampleConfig:
    which: str
    n: int
    dt_out: float
    dt_internal: float
    x0: float
    aux: tuple[AuxProcessConfig, ...]
    seed: int = 0
    freeze_u: float | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["aux"] = [asdict(a) for a in self.aux]
        return d


def default_example_config(which: str, seed: int = 0, n: int | None = None) -> ExampleConfig:
    """Default generation settings for the three examples.

    ``seed`` seeds the target-SDE Wiener stream; auxiliary streams get
    independent seeds derived from it.
    """
    ss = np.random.SeedSequence(seed)
    child = [int(c.generate_state(1)[0]) for c in ss.spawn(3)]
    if which == "ou":
        aux = (AuxProcessConfig(T_c=20.0, b0=0.14, x0=(0.5, 0.0, 0.0, 0.0), mean=0.5, seed=child[1]),)
        return ExampleConfig("ou", n or 16384, 0.1, 1e-4, 0.0, aux, seed=child[0])
    if which == "logdrift_2aux":
        tc = 10.0
        aux = (
            AuxProcessConfig(T_c=tc, b0=0.1, seed=child[1]),
            AuxProcessConfig(T_c=4.0 * tc, b0=0.1, seed=child[2]),
        )
        return ExampleConfig("logdrift_2aux", n or 131072, 0.01, 1e-4, 1.0, aux, seed=child[0])
    if which == "doublewell":
        aux = (AuxProcessConfig(T_c=15.0, b0=0.2, x0=(1.0, 0.0, 0.0, 0.0), seed=child[1]),)
        return ExampleConfig("doublewell", n or 65536, 0.01, 1e-4, 0.0, aux, seed=child[0])
    raise KeyError(f"unknown example {which!r}; known: {sorted(SCALING_FUNCTIONS)}")


@dataclass
class SyntheticDataset:
    x: UniformTimeSeries
    aux: list[UniformTimeSeries]
    theta_true: np.ndarray
    model_id: str
    example: str
    gamma_true: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)


def generate_example(which: str | ExampleConfig, cfg: ExampleConfig | None = None, **overrides) -> SyntheticDataset:
    """Simulate one of ``ou``, ``logdrift_2aux``, ``doublewell``.

    The auxiliary process(es) and the target SDE advance together on the
    internal grid; the parameters used in every internal step are the
    scaling functions evaluated at the current auxiliary values.
    """
    if isinstance(which, ExampleConfig):
        cfg = which
    elif cfg is None:
        cfg = default_example_config(which)
    if overrides:
        cfg = replace(cfg, **overrides)
    model = get_model(_EXAMPLE_MODEL[cfg.which])
    scale = SCALING_FUNCTIONS[cfg.which]
    m = _substeps(cfg.dt_out, cfg.dt_internal)
    n_steps = (cfg.n - 1) * m
    aux_cfgs = [replace(a, dt_internal=cfg.dt_internal) for a in cfg.aux]

    rng_x = make_rng(cfg.seed)
    aux_out = [np.empty(cfg.n) for _ in aux_cfgs]
    aux_states = [np.array(a.x0, dtype=float) for a in aux_cfgs]
    aux_rngs = [make_rng(a.seed) for a in aux_cfgs]
    drifts = [aux_drift_matrix(a) for a in aux_cfgs]
    for j, a in enumerate(aux_cfgs):
        aux_out[j][0] = a.x0[0] if cfg.freeze_u is None else cfg.freeze_u
    x_out = np.empty(cfg.n)
    x_out[0] = cfg.x0
    x = float(cfg.x0)
    done_out = 1
    chunk_out = max(1, _CHUNK_STEPS // m)
    while done_out < cfg.n:
        c = min(chunk_out, cfg.n - done_out)
        steps = c * m
        # aux values at the start of each internal step
        starts = []
        for j, a in enumerate(aux_cfgs):
            if cfg.freeze_u is not None:
                starts.append(np.full(steps, cfg.freeze_u))
                aux_out[j][done_out : done_out + c] = cfg.freeze_u
                continue
            first = aux_states[j][0]
            fine = np.empty(steps)
            xi = aux_rngs[j].standard_normal(steps)
            _aux_kernel(aux_states[j], drifts[j], float(a.mean), float(a.b0), float(a.dt_internal), xi, fine)
            starts.append(np.concatenate([[first], fine[:-1]]))
            aux_out[j][done_out : done_out + c] = fine[m - 1 :: m]
        thetas = scale(*starts).T
        dw = np.sqrt(cfg.dt_internal) * rng_x.standard_normal(steps)
        seg = integrate_path(model, x, thetas, dw, cfg.dt_internal, stride=m, rng=rng_x)
        x_out[done_out : done_out + c] = seg
        x = float(seg[-1])
        done_out += c

    theta_true = scale(*aux_out)
    return SyntheticDataset(
        x=UniformTimeSeries(0.0, cfg.dt_out, x_out),
        aux=[UniformTimeSeries(0.0, cfg.dt_out, a) for a in aux_out],
        theta_true=theta_true,
        model_id=model.name,
        example=cfg.which,
        metadata={"config": cfg.to_dict()},
    )
