from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp
from scipy import stats

from femsde.closure import (
    ClosureFit,
    RegressionError,
    cluster_weighted_mean,
    fit_closure,
    fit_scaling,
    reconstruct_theta_path,
    simulate_closed,
)
from femsde.likelihood import UniformTimeSeries
from femsde.models import get_model
from femsde.synth import simulate_sde
from femsde.theta_solver import EmptyClusterError


def constant_closure(model, theta):
    n = len(theta)
    return ClosureFit(
        model=model,
        u_bars=np.zeros((1, 1)),
        theta_bars=np.atleast_2d(theta),
        coefficients=[np.array([t]) for t in theta],
        degrees=[0] * n,
        aux_index_per_param=[0] * n,
        u_range=[(-np.inf, np.inf)] * n,
        residuals=[np.zeros(1)] * n,
    )


def test_weighted_mean():
    u = np.array([1.0, 2.0, 6.0])
    assert cluster_weighted_mean(u, np.ones(3)) == pytest.approx(3.0)
    assert cluster_weighted_mean(np.array([0.0, 4.0]), np.array([0.25, 0.75])) == pytest.approx(3.0)
    with pytest.raises(EmptyClusterError):
        cluster_weighted_mean(u, np.zeros(3))


def test_linear_fits():
    u = np.array([-1.0, 0.0, 0.5, 2.0])
    np.testing.assert_allclose(fit_scaling(u, 2 * u, 1), [0.0, 2.0], atol=1e-10)
    np.testing.assert_allclose(fit_scaling(u, -4 * u + 5, 1), [5.0, -4.0], atol=1e-10)


@given(
    hnp.arrays(float, 3, elements=st.floats(-5, 5)),
    hnp.arrays(float, 6, elements=st.floats(-3, 3), unique=True).filter(lambda u: np.min(np.diff(np.sort(u))) > 0.05),
)
def test_noiseless_polynomial_recovered(coef, u):
    y = np.polynomial.polynomial.polyval(u, coef)
    np.testing.assert_allclose(fit_scaling(u, y, 2), coef, atol=1e-8 * (1 + np.abs(coef).max()) * 100)


def test_exact_interpolation_and_degree_errors():
    u = np.array([0.0, 1.0, 3.0])
    y = np.array([1.0, -2.0, 4.0])
    c = fit_scaling(u, y, 2)
    np.testing.assert_allclose(np.polynomial.polynomial.polyval(u, c), y, atol=1e-12)
    with pytest.raises(RegressionError):
        fit_scaling(u, y, 3)
    with pytest.raises(RegressionError):
        fit_scaling(np.array([1.0, 1.0, 1.0]), y, 1)
    assert fit_scaling(u, y, 0)[0] == pytest.approx(y.mean())


def test_theta_path():
    theta = np.array([[1.0, 2.0], [3.0, 4.0]])
    gamma = np.array([[1, 1, 0, 0], [0, 0, 1, 1]], dtype=float)
    path = reconstruct_theta_path(theta=theta, gamma=gamma)
    np.testing.assert_array_equal(path, [[1, 1, 3, 3], [2, 2, 4, 4]])
    single = reconstruct_theta_path(theta=[[5.0, 6.0]], gamma=np.ones((1, 3)))
    np.testing.assert_array_equal(single, [[5, 5, 5], [6, 6, 6]])


@given(
    hnp.arrays(float, (3, 2), elements=st.floats(-5, 5)),
    hnp.arrays(float, (3, 2), elements=st.floats(-5, 5)),
    hnp.arrays(float, (3, 7), elements=st.floats(0, 1)),
    hnp.arrays(float, (3, 7), elements=st.floats(0, 1)),
)
def test_theta_path_bilinear(t1, t2, g1, g2):
    p = reconstruct_theta_path
    np.testing.assert_allclose(p(theta=t1 + t2, gamma=g1), p(theta=t1, gamma=g1) + p(theta=t2, gamma=g1), atol=1e-10)
    np.testing.assert_allclose(p(theta=t1, gamma=g1 + g2), p(theta=t1, gamma=g1) + p(theta=t1, gamma=g2), atol=1e-10)


def fake_result(theta, gamma, model="ou"):
    return SimpleNamespace(theta=np.asarray(theta, float), gamma_fine=np.asarray(gamma, float), model=model)


def test_fit_closure_and_evaluation(tmp_path):
    n = 60
    u = np.linspace(0.0, 2.0, n)
    labels = np.minimum((u / 0.5).astype(int), 3)
    gamma = np.zeros((4, n))
    gamma[labels, np.arange(n)] = 1.0
    ubar = np.array([u[labels == k].mean() for k in range(4)])
    theta = np.stack([2 * ubar, 1 + ubar, np.full(4, 0.5)], axis=1)
    fit = fit_closure(fake_result(theta, gamma), UniformTimeSeries(0.0, 0.1, u))
    np.testing.assert_allclose(fit.coefficients[0], [0.0, 2.0], atol=1e-10)
    np.testing.assert_allclose(fit.u_bars[0], ubar)
    assert np.abs(np.concatenate(fit.residuals)).max() < 1e-10
    # evaluation clamps u to the fitted range
    ev = fit.evaluate(UniformTimeSeries(0.0, 0.1, np.array([-5.0, 1.0, 50.0])))
    np.testing.assert_allclose(ev[0], [2 * ubar.min(), 2.0, 2 * ubar.max()])
    fit.to_json(tmp_path / "c.json")
    back = ClosureFit.from_json(tmp_path / "c.json")
    np.testing.assert_allclose(back.evaluate(u), fit.evaluate(u))


def test_evaluation_clamps_to_model_bounds(caplog):
    fit = constant_closure("ou", [0.0, -1.0, 1.0])
    ev = fit.evaluate(np.zeros(3))
    np.testing.assert_array_equal(ev[1], 0.0)
    assert "clamped" in caplog.text


def test_fit_closure_drops_empty_clusters():
    n = 40
    gamma = np.zeros((3, n))
    gamma[0, :20] = 1
    gamma[1, 20:] = 1
    u = np.r_[np.zeros(20), np.ones(20)]
    fit = fit_closure(fake_result([[0, 1, 1], [2, 1, 1], [9, 9, 9]], gamma), u)
    assert fit.clusters == [0, 1]
    np.testing.assert_allclose(fit.coefficients[0], [0.0, 2.0], atol=1e-12)
    with pytest.raises(ValueError):
        fit_closure(fake_result([[0, 1, 1]] * 3, gamma), [u, u])


def test_closed_simulation_reproducible_and_deterministic_without_noise():
    aux = UniformTimeSeries(0.0, 0.1, np.zeros(200))
    fit = constant_closure("ou", [1.0, 1.0, 0.5])
    a = simulate_closed("ou", fit, aux, 0.0, substeps=10, seed=3)
    b = simulate_closed("ou", fit, aux, 0.0, substeps=10, seed=3)
    np.testing.assert_array_equal(a.values, b.values)
    assert a.n == 200
    ode = constant_closure("ou", [1.0, 1.0, 0.0])
    c = simulate_closed("ou", ode, aux, 0.0, substeps=10, seed=1)
    d = simulate_closed("ou", ode, aux, 0.0, substeps=10, seed=2)
    np.testing.assert_array_equal(c.values, d.values)
    t = aux.times
    np.testing.assert_allclose(c.values, 1 - np.exp(-t), atol=5e-3)


def test_constant_closure_matches_stationary_simulator():
    m = get_model("doublewell")
    theta = (1.5, 0.6)
    aux = UniformTimeSeries(0.0, 0.05, np.zeros(4000))
    fit = constant_closure("doublewell", list(theta))
    passed = 0
    for seed in range(20):
        a = simulate_closed(m, fit, aux, 0.0, substeps=50, seed=seed).values
        b = simulate_sde(m, theta, 0.0, 4000, 0.05, 1e-3, seed=1000 + seed).values
        passed += stats.ks_2samp(np.diff(a), np.diff(b)).pvalue > 0.01
    assert passed >= 18
