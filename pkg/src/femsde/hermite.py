"""Closed-form Hermite approximation of scalar diffusion transition densities.

The density of ``X(t + dt) | X(t)`` is obtained by mapping to the
unit-diffusion process ``Y = F(X)``, normalising the increment
``Z = (Y - y0) / sqrt(dt)``, expanding ``p_Z`` in Hermite polynomials up to
order 6 with coefficients Taylor-expanded in ``dt`` to third order, and
mapping back with the Jacobian ``1 / (g(x) sqrt(dt))``.
"""

from __future__ import annotations

from dataclasses import dataclass
import threading

import numpy as np
from numba import njit

from .models import SdeModelSpec

__all__ = [
    "HERMITE_ORDER",
    "TAYLOR_ORDER",
    "DENSITY_FLOOR",
    "HermiteCoefficients",
    "NumericError",
    "hermite_polynomials",
    "eta_coefficients",
    "transition_density",
    "log_transition_density",
    "negative_density_count",
]

HERMITE_ORDER = 6
TAYLOR_ORDER = 3
DENSITY_FLOOR = 1e-300

_SQRT_2PI = np.sqrt(2.0 * np.pi)


class NumericError(ArithmeticError):
    """Non-finite intermediate value in the density evaluation."""


class _NegativeCounter:
    def __init__(self):
        self._lock = threading.Lock()
        self.count = 0

    def add(self, n: int) -> None:
        if n:
            with self._lock:
                self.count += int(n)


_negative = _NegativeCounter()


def negative_density_count(reset: bool = False) -> int:
    """Number of evaluations whose raw expansion was negative (pre-floor)."""
    n = _negative.count
    if reset:
        with _negative._lock:
            _negative.count = 0
    return n


@dataclass(frozen=True)
class HermiteCoefficients:
    eta: np.ndarray  # shape (7,) + y0.shape
    y0: np.ndarray


def hermite_polynomials(z) -> np.ndarray:
    """``[H_0(z), ..., H_6(z)]`` with ``H_j = e^{z^2/2} d^j/dz^j e^{-z^2/2}``.

    Returns an array of shape ``(7,) + np.shape(z)``.
    """
    z = np.asarray(z, dtype=float)
    z2 = z * z
    return np.stack(
        [
            np.ones_like(z),
            -z,
            z2 - 1.0,
            z * (3.0 - z2),
            3.0 + z2 * (z2 - 6.0),
            z * (-15.0 + z2 * (10.0 - z2)),
            -15.0 + z2 * (45.0 + z2 * (-15.0 + z2)),
        ]
    )


@njit(cache=True)
def _eta_kernel(d, h, out):
    sh = np.sqrt(h)
    h32 = h * sh
    h52 = h * h32
    h2 = h * h
    h3 = h2 * h
    for i in range(d.shape[1]):
        m = d[0, i]
        m1 = d[1, i]
        m2 = d[2, i]
        m3 = d[3, i]
        m4 = d[4, i]
        m5 = d[5, i]
        mm = m * m
        m1s = m1 * m1
        m2s = m2 * m2
        out[0, i] = 1.0
        out[1, i] = (
            -m * sh
            - (2.0 * m * m1 + m2) / 4.0 * h32
            - (4.0 * m * m1s + 4.0 * mm * m2 + 6.0 * m1 * m2 + 4.0 * m * m3 + m4) / 24.0 * h52
        )
        out[2, i] = (
            (mm + m1) / 2.0 * h
            + (6.0 * mm * m1 + 4.0 * m1s + 7.0 * m * m2 + 2.0 * m3) / 12.0 * h2
            + (
                28.0 * mm * m1s
                + 28.0 * mm * m3
                + 16.0 * m1s * m1
                + 16.0 * mm * m * m2
                + 88.0 * m * m1 * m2
                + 21.0 * m2s
                + 32.0 * m1 * m3
                + 16.0 * m * m4
                + 3.0 * m5
            )
            / 96.0
            * h3
        )
        out[3, i] = -(mm * m + 3.0 * m * m1 + m2) / 6.0 * h32 - (
            12.0 * mm * m * m1
            + 28.0 * m * m1s
            + 22.0 * mm * m2
            + 24.0 * m1 * m2
            + 14.0 * m * m3
            + 3.0 * m4
        ) / 48.0 * h52
        out[4, i] = (mm * mm + 6.0 * mm * m1 + 3.0 * m1s + 4.0 * m * m2 + m3) / 24.0 * h2 + (
            20.0 * mm * mm * m1
            + 50.0 * mm * m * m2
            + 100.0 * mm * m1s
            + 50.0 * mm * m3
            + 23.0 * m * m4
            + 180.0 * m * m1 * m2
            + 40.0 * m1s * m1
            + 34.0 * m2s
            + 52.0 * m1 * m3
            + 4.0 * m5
        ) / 240.0 * h3
        out[5, i] = -(
            mm * mm * m
            + 10.0 * mm * m * m1
            + 15.0 * m * m1s
            + 10.0 * mm * m2
            + 10.0 * m1 * m2
            + 5.0 * m * m3
            + m4
        ) / 120.0 * h52
        out[6, i] = (
            mm * mm * mm
            + 15.0 * mm * mm * m1
            + 15.0 * m1s * m1
            + 20.0 * mm * m * m2
            + 15.0 * m1 * m3
            + 45.0 * mm * m1s
            + 10.0 * m2s
            + 15.0 * mm * m3
            + 60.0 * m * m1 * m2
            + 6.0 * m * m4
            + m5
        ) / 720.0 * h3


def _eta_from_derivs(d: np.ndarray, h: float) -> np.ndarray:
    d = np.asarray(d, dtype=float)
    shape = d.shape[1:]
    flat = np.ascontiguousarray(d.reshape(6, -1))
    out = np.empty((7, flat.shape[1]))
    _eta_kernel(flat, float(h), out)
    return out.reshape((7,) + shape)


def eta_coefficients(model: SdeModelSpec, theta, y0, dt: float) -> HermiteCoefficients:
    """Taylor-expanded Hermite coefficients ``eta_0 .. eta_6`` at ``y0``.

    ``y0`` may be an array; the coefficients then broadcast over it.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    theta = np.asarray(theta, dtype=float)
    y0 = np.asarray(y0, dtype=float)
    d = model.transformed_drift_derivs(y0, theta)
    finite = np.isfinite(d)
    if not finite.all():
        order = int(np.flatnonzero(~finite.reshape(6, -1).all(axis=1))[0])
        raise NumericError(f"{model.name}: non-finite mu derivative of order {order}")
    return HermiteCoefficients(eta=_eta_from_derivs(d, float(dt)), y0=y0)


@njit(cache=True)
def _pz_kernel(eta, z, order, out):
    for i in range(z.size):
        x = z[i]
        x2 = x * x
        h = (
            1.0,
            -x,
            x2 - 1.0,
            x * (3.0 - x2),
            3.0 + x2 * (x2 - 6.0),
            x * (-15.0 + x2 * (10.0 - x2)),
            -15.0 + x2 * (45.0 + x2 * (-15.0 + x2)),
        )
        acc = 0.0
        for j in range(order + 1):
            acc += eta[j, i] * h[j]
        out[i] = np.exp(-0.5 * x2) / _SQRT_2PI * acc


def _raw_pz(coeffs: np.ndarray, z: np.ndarray, order: int) -> np.ndarray:
    shape = np.broadcast_shapes(coeffs.shape[1:], z.shape)
    zf = np.ascontiguousarray(np.broadcast_to(z, shape), dtype=float).ravel()
    ef = np.ascontiguousarray(np.broadcast_to(coeffs, (7,) + shape)).reshape(7, -1)
    out = np.empty(zf.size)
    _pz_kernel(ef, zf, order, out)
    return out.reshape(shape)


def transition_density(
    model: SdeModelSpec,
    dt: float,
    x_prev,
    x_next,
    theta,
    *,
    order: int = HERMITE_ORDER,
    check_domain: bool = True,
) -> np.ndarray:
    """Approximate ``p_X(dt, x_next | x_prev; theta)``, floored at 1e-300.

    ``x_prev`` and ``x_next`` broadcast against each other. ``order`` below 6
    truncates the Hermite sum and exists for convergence diagnostics only.
    """
    if not 0 <= order <= HERMITE_ORDER:
        raise ValueError("order must lie in 0..6")
    theta = model.check_theta(theta)
    x_prev = np.asarray(x_prev, dtype=float)
    x_next = np.asarray(x_next, dtype=float)
    if check_domain:
        model.check_domain(x_prev, "x_prev")
        model.check_domain(x_next, "x_next")
    y0 = model.lamperti(x_prev, theta)
    y = model.lamperti(x_next, theta)
    sdt = np.sqrt(dt)
    z = (y - y0) / sdt
    eta = eta_coefficients(model, theta, y0, dt).eta
    # coefficients depend on x_prev only; align them for broadcasting over z
    eta = eta.reshape((7,) + (1,) * (z.ndim - y0.ndim) + y0.shape)
    pz = _raw_pz(eta, z, order)
    g = model.diffusion(x_next, theta)
    px = pz / (g * sdt)
    neg = px < DENSITY_FLOOR
    _negative.add(np.count_nonzero(px < 0))
    return np.where(neg, DENSITY_FLOOR, px)


def log_transition_density(model: SdeModelSpec, dt: float, x_prev, x_next, theta) -> np.ndarray:
    """``ln`` of :func:`transition_density`; the floor maps to about -690.8."""
    return np.log(transition_density(model, dt, x_prev, x_next, theta))
