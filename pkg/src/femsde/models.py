"""Scalar Ito SDE models with their Lamperti machinery.

Every model carries the drift ``f(x; theta)``, diffusion ``g(x; theta)``, the
Lamperti transform ``F`` (with ``F' = 1/g``), its inverse, and the drift of
the unit-diffusion process ``Y = F(X)`` together with its first five
derivatives in ``y``. All callables are numpy-vectorised over the state
argument; ``theta`` is a 1-D sequence of parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "DomainError",
    "SdeModelSpec",
    "builtin_ou",
    "builtin_logdrift",
    "builtin_doublewell",
    "finite_difference_model",
    "get_model",
    "register_model",
    "MODEL_REGISTRY",
]


class DomainError(ValueError):
    """A state lies outside the model's state domain."""


ArrayFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class SdeModelSpec:
    """Immutable description of ``dX = f(X; theta) dt + g(X; theta) dW``.

    ``transformed_drift_derivs(y, theta)`` returns an array of shape
    ``(6,) + y.shape`` holding ``mu, mu', ..., mu^(5)`` of the Lamperti
    transformed drift ``mu = f/g - g'/2`` evaluated at ``x = F^{-1}(y)``.
    """

    name: str
    n_params: int
    drift: ArrayFn
    diffusion: ArrayFn
    diffusion_dx: ArrayFn
    lamperti: ArrayFn
    lamperti_inverse: ArrayFn
    transformed_drift_derivs: ArrayFn
    param_bounds: tuple[tuple[float, float], ...]
    state_domain: tuple[float, float] = (-np.inf, np.inf)
    # open interval => states on the boundary are invalid as well
    closed_form_derivs: bool = True
    param_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if len(self.param_bounds) != self.n_params:
            raise ValueError("param_bounds must have n_params entries")

    @property
    def lower(self) -> np.ndarray:
        return np.array([b[0] for b in self.param_bounds], dtype=float)

    @property
    def upper(self) -> np.ndarray:
        return np.array([b[1] for b in self.param_bounds], dtype=float)

    def in_domain(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        lo, hi = self.state_domain
        return np.isfinite(x) & (x > lo) & (x < hi)

    def check_domain(self, x, what: str = "state") -> None:
        ok = self.in_domain(x)
        if not np.all(ok):
            bad = np.flatnonzero(~np.atleast_1d(ok))
            raise DomainError(
                f"{self.name}: {what} outside state domain {self.state_domain} "
                f"at index {int(bad[0])}"
            )

    def check_theta(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ValueError(
                f"{self.name}: expected {self.n_params} parameters, got shape {theta.shape}"
            )
        return theta

    def in_bounds(self, theta) -> bool:
        theta = np.asarray(theta, dtype=float)
        return bool(np.all(theta > self.lower) and np.all(theta < self.upper))


# ---------------------------------------------------------------------------
# Ornstein-Uhlenbeck: dX = (t1 - t2 X) dt + t3 dW


def _ou_drift(x, th):
    return th[0] - th[1] * np.asarray(x, dtype=float)


def _ou_diffusion(x, th):
    return np.full_like(np.asarray(x, dtype=float), th[2])


def _ou_diffusion_dx(x, th):
    return np.zeros_like(np.asarray(x, dtype=float))


def _ou_lamperti(x, th):
    return np.asarray(x, dtype=float) / th[2]


def _ou_lamperti_inv(y, th):
    return np.asarray(y, dtype=float) * th[2]


def _ou_mu(y, th):
    y = np.asarray(y, dtype=float)
    out = np.zeros((6,) + y.shape)
    out[0] = (th[0] - th[1] * th[2] * y) / th[2]
    out[1] = -th[1]
    return out


def builtin_ou() -> SdeModelSpec:
    return SdeModelSpec(
        name="ou",
        n_params=3,
        drift=_ou_drift,
        diffusion=_ou_diffusion,
        diffusion_dx=_ou_diffusion_dx,
        lamperti=_ou_lamperti,
        lamperti_inverse=_ou_lamperti_inv,
        transformed_drift_derivs=_ou_mu,
        param_bounds=((-20.0, 20.0), (0.0, 20.0), (0.0, 20.0)),
        param_names=("theta1", "theta2", "theta3"),
    )


# ---------------------------------------------------------------------------
# Nonlinear drift, multiplicative noise:
#   dX = (2 - t1 X - ln X^2) dt + t2 X dW,  x > 0
# With s = t2 y:  mu(y) = (2/t2)(1 - s) e^{-s} - t1/t2 - t2/2
# and d^n/dy^n [(1 - s) e^{-s}] = (-t2)^n (n + 1 - s) e^{-s}.


def _log_drift(x, th):
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return 2.0 - th[0] * x - np.log(x * x)


def _log_diffusion(x, th):
    return th[1] * np.asarray(x, dtype=float)


def _log_diffusion_dx(x, th):
    return np.full_like(np.asarray(x, dtype=float), th[1])


def _log_lamperti(x, th):
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log(x) / th[1]


def _log_lamperti_inv(y, th):
    return np.exp(th[1] * np.asarray(y, dtype=float))


def _log_mu(y, th):
    y = np.asarray(y, dtype=float)
    c = th[1]
    s = c * y
    e = np.exp(-s)
    out = np.empty((6,) + y.shape)
    out[0] = (2.0 / c) * (1.0 - s) * e - th[0] / c - c / 2.0
    for n in range(1, 6):
        out[n] = (2.0 / c) * (-c) ** n * (n + 1.0 - s) * e
    return out


def builtin_logdrift() -> SdeModelSpec:
    return SdeModelSpec(
        name="logdrift",
        n_params=2,
        drift=_log_drift,
        diffusion=_log_diffusion,
        diffusion_dx=_log_diffusion_dx,
        lamperti=_log_lamperti,
        lamperti_inverse=_log_lamperti_inv,
        transformed_drift_derivs=_log_mu,
        param_bounds=((-10.0, 10.0), (0.0, 10.0)),
        state_domain=(0.0, np.inf),
        param_names=("theta1", "theta2"),
    )


# ---------------------------------------------------------------------------
# Double well: dX = (t1 X - X^3) dt + t2 sqrt(1 + X^2) dW
# With s = t2 y, x = sinh s:
#   mu(y) = A tanh(s) - sinh(2 s) / (2 t2),   A = (t1 + 1 - t2^2/2) / t2
# Derivatives of tanh are polynomials in T = tanh(s): d/ds P(T) = P'(T)(1 - T^2).

_TANH_DERIV_POLYS: list[np.polynomial.Polynomial] = []
_p = np.polynomial.Polynomial([0.0, 1.0])
_one_minus_t2 = np.polynomial.Polynomial([1.0, 0.0, -1.0])
for _ in range(6):
    _TANH_DERIV_POLYS.append(_p)
    _p = _p.deriv() * _one_minus_t2
del _p
_TANH_DERIV_COEFS = [p.coef for p in _TANH_DERIV_POLYS]


def _dw_drift(x, th):
    x = np.asarray(x, dtype=float)
    return th[0] * x - x ** 3


def _dw_diffusion(x, th):
    x = np.asarray(x, dtype=float)
    return th[1] * np.sqrt(1.0 + x * x)


def _dw_diffusion_dx(x, th):
    x = np.asarray(x, dtype=float)
    return th[1] * x / np.sqrt(1.0 + x * x)


def _dw_lamperti(x, th):
    return np.arcsinh(np.asarray(x, dtype=float)) / th[1]


def _dw_lamperti_inv(y, th):
    return np.sinh(th[1] * np.asarray(y, dtype=float))


def _dw_mu(y, th):
    y = np.asarray(y, dtype=float)
    c = th[1]
    s = c * y
    t = np.tanh(s)
    sh2 = np.sinh(2.0 * s)
    ch2 = np.cosh(2.0 * s)
    amp = (th[0] + 1.0 - 0.5 * c * c) / c
    out = np.empty((6,) + y.shape)
    for n in range(6):
        tanh_part = amp * np.polynomial.polynomial.polyval(t, _TANH_DERIV_COEFS[n])
        # d^n/ds^n sinh(2s)/2 = 2^(n-1) * (sinh(2s) if n even else cosh(2s))
        hyp = (2.0 ** (n - 1)) * (sh2 if n % 2 == 0 else ch2)
        out[n] = c ** n * (tanh_part - hyp / c)
    return out


def builtin_doublewell() -> SdeModelSpec:
    return SdeModelSpec(
        name="doublewell",
        n_params=2,
        drift=_dw_drift,
        diffusion=_dw_diffusion,
        diffusion_dx=_dw_diffusion_dx,
        lamperti=_dw_lamperti,
        lamperti_inverse=_dw_lamperti_inv,
        transformed_drift_derivs=_dw_mu,
        param_bounds=((-10.0, 10.0), (0.0, 10.0)),
        param_names=("theta1", "theta2"),
    )


def finite_difference_model(
    name: str,
    drift: ArrayFn,
    diffusion: ArrayFn,
    lamperti: ArrayFn,
    lamperti_inverse: ArrayFn,
    param_bounds: Sequence[tuple[float, float]],
    state_domain: tuple[float, float] = (-np.inf, np.inf),
    step: float = 1e-2,
) -> SdeModelSpec:
    """Build a model whose ``mu`` derivatives come from central differences.

    Lower accuracy than the closed-form builtins: fifth derivatives from an
    11-point stencil lose roughly half the available digits. Use for
    prototyping custom models, not for production fits.
    """

    def diffusion_dx(x, th):
        x = np.asarray(x, dtype=float)
        h = 1e-6 * np.maximum(1.0, np.abs(x))
        return (diffusion(x + h, th) - diffusion(x - h, th)) / (2.0 * h)

    def mu(y, th):
        x = lamperti_inverse(y, th)
        return drift(x, th) / diffusion(x, th) - 0.5 * diffusion_dx(x, th)

    # 11-point central stencil weights for orders 0..5
    offsets = np.arange(-5, 6, dtype=float)
    vander = np.vander(offsets, 11, increasing=True).T
    weights = []
    for order in range(6):
        rhs = np.zeros(11)
        rhs[order] = float(np.prod(np.arange(1, order + 1)))
        weights.append(np.linalg.solve(vander, rhs))

    def derivs(y, th):
        y = np.asarray(y, dtype=float)
        samples = np.stack([mu(y + o * step, th) for o in offsets])
        out = np.empty((6,) + y.shape)
        for order in range(6):
            out[order] = np.tensordot(weights[order], samples, axes=1) / step ** order
        out[0] = mu(y, th)
        return out

    return SdeModelSpec(
        name=name,
        n_params=len(param_bounds),
        drift=drift,
        diffusion=diffusion,
        diffusion_dx=diffusion_dx,
        lamperti=lamperti,
        lamperti_inverse=lamperti_inverse,
        transformed_drift_derivs=derivs,
        param_bounds=tuple((float(a), float(b)) for a, b in param_bounds),
        state_domain=state_domain,
        closed_form_derivs=False,
    )


MODEL_REGISTRY: dict[str, Callable[[], SdeModelSpec]] = {
    "ou": builtin_ou,
    "logdrift": builtin_logdrift,
    "doublewell": builtin_doublewell,
}


def register_model(key: str, factory: Callable[[], SdeModelSpec]) -> None:
    MODEL_REGISTRY[key] = factory


def get_model(key: str) -> SdeModelSpec:
    try:
        return MODEL_REGISTRY[key]()
    except KeyError:
        raise KeyError(f"unknown model {key!r}; known: {sorted(MODEL_REGISTRY)}") from None
