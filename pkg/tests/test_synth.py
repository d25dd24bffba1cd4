import numpy as np
import pytest
from scipy import signal

from femsde.models import get_model
from femsde.synth import (
    SCALING_FUNCTIONS,
    AuxProcessConfig,
    aux_drift_matrix,
    default_example_config,
    generate_example,
    integrate_path,
    simulate_aux,
    simulate_sde,
    simulate_switching,
)

DW = get_model("doublewell")


def test_aux_defaults():
    cfg = AuxProcessConfig()
    assert cfg.a == (1.0, 2.61, 3.41, 2.61)
    assert cfg.b0 == 1.0
    assert np.all(np.linalg.eigvals(aux_drift_matrix(cfg)).real < 0)
    with pytest.raises(ValueError):
        AuxProcessConfig(T_c=0.0)


def _spectrum(T_c, seed=0, n=1 << 17, dt=0.05):
    u = simulate_aux(AuxProcessConfig(T_c=T_c, dt_internal=1e-3, seed=seed), n, dt).values
    return signal.welch(u, fs=1 / dt, nperseg=1 << 13)


def test_doubling_cutoff_time_halves_frequency():
    f1, p1 = _spectrum(1.0)
    f2, p2 = _spectrum(2.0)
    c1 = np.sum(f1 * p1) / np.sum(p1)
    c2 = np.sum(f2 * p2) / np.sum(p2)
    assert 1.8 <= c1 / c2 <= 2.2


def test_fourth_order_roll_off():
    f, p = _spectrum(1.0, seed=1)
    fc = 1.0 / (2 * np.pi)

    def slope(lo, hi):
        m = (f >= lo) & (f <= hi)
        return 10 * np.polyfit(np.log10(f[m]), np.log10(p[m]), 1)[0]  # dB per decade

    below, above = slope(0.05 * fc, 0.5 * fc), slope(2 * fc, 8 * fc)
    assert below - above >= 20.0
    assert above < -50.0


def test_frozen_u_gives_constant_parameters():
    ou = generate_example(default_example_config("ou", n=50), freeze_u=1.0)
    np.testing.assert_allclose(ou.theta_true, np.array([[2.0], [10.0], [0.1]]) * np.ones(50))
    dw = generate_example(default_example_config("doublewell", n=50), freeze_u=1.0)
    np.testing.assert_allclose(dw.theta_true, np.array([[2.5], [1.0]]) * np.ones(50))


@pytest.mark.parametrize("which", ["ou", "logdrift_2aux", "doublewell"])
def test_examples_share_grid_and_scaling(which):
    ds = generate_example(default_example_config(which, seed=3, n=300))
    assert ds.x.n == 300 and all(a.n == 300 for a in ds.aux)
    assert all(a.dt == ds.x.dt for a in ds.aux)
    np.testing.assert_array_equal(ds.theta_true, SCALING_FUNCTIONS[which](*[a.values for a in ds.aux]))
    assert np.all(np.isfinite(ds.x.values))
    if which == "logdrift_2aux":
        assert np.all(ds.x.values > 0)


def test_example_defaults():
    assert default_example_config("ou").n == 16384
    assert default_example_config("ou").dt_out == 0.1
    cfg = default_example_config("doublewell")
    assert (cfg.n, cfg.dt_out, cfg.aux[0].T_c, cfg.aux[0].b0) == (65536, 0.01, 15.0, 0.2)
    with pytest.raises(KeyError):
        default_example_config("nope")


def test_reproducible_and_seed_dependent():
    a = generate_example(default_example_config("doublewell", seed=1, n=500))
    b = generate_example(default_example_config("doublewell", seed=1, n=500))
    c = generate_example(default_example_config("doublewell", seed=2, n=500))
    np.testing.assert_array_equal(a.x.values, b.x.values)
    assert not np.array_equal(a.x.values, c.x.values)


def _strong_errors(milstein, n_paths=300, t_end=1.0):
    theta = np.array([2.0, 0.8])
    levels = [4, 5, 6, 7]
    fine = 11
    rng = np.random.default_rng(0)
    errs = np.zeros(len(levels))
    for _ in range(n_paths):
        dw = np.sqrt(t_end / 2**fine) * rng.standard_normal(2**fine)
        ref = integrate_path(DW, 0.5, theta, dw, t_end / 2**fine, stride=2**fine, milstein=True)[-1]
        for i, lev in enumerate(levels):
            coarse = dw.reshape(2**lev, -1).sum(axis=1)
            x = integrate_path(DW, 0.5, theta, coarse, t_end / 2**lev, stride=2**lev, milstein=milstein)[-1]
            errs[i] += abs(x - ref) / n_paths
    dts = t_end / 2.0 ** np.array(levels)
    return np.polyfit(np.log(dts), np.log(errs), 1)[0]


def test_strong_order_euler():
    assert abs(_strong_errors(False) - 0.5) <= 0.3


def test_strong_order_milstein():
    assert abs(_strong_errors(True) - 1.0) <= 0.3


def test_output_length_and_start():
    x = simulate_sde(DW, (2.0, 0.8), 0.3, 777, 0.01, 1e-3, seed=0)
    assert x.n == 777 and x.values[0] == 0.3
    with pytest.raises(ValueError):
        simulate_sde(DW, (2.0, 0.8), 0.3, 10, 0.01, 3e-3)


def test_logdrift_stays_positive():
    x = simulate_sde(get_model("logdrift"), (1.0, 1.5), 1.0, 5000, 0.01, 1e-3, seed=4)
    assert np.all(x.values > 0)


def test_switching_dataset():
    labels = np.repeat([0, 1, 0], 100)
    ds = simulate_switching(get_model("ou"), [[0, 1, 1], [5, 1, 1]], labels, 0.0, 0.1, 1e-3, seed=0)
    assert ds.x.n == 300
    np.testing.assert_array_equal(ds.gamma_true.argmax(axis=0), labels)
    assert ds.x.values[150] > ds.x.values[50]
