import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from femsde.likelihood import (
    FLOOR_PENALTY,
    ContractError,
    UniformTimeSeries,
    fitness_matrix,
    fitness_row,
    weighted_negloglik,
)
from femsde.models import DomainError, get_model

OU = get_model("ou")


def test_two_point_series():
    row = fitness_row(OU, UniformTimeSeries(0.0, 0.1, [0.0, 0.0]), [0.0, 1.0, 1.0])
    assert row.shape == (2,)
    assert row[0] == pytest.approx(-np.log(1.3253), abs=1e-3)
    assert row[0] == pytest.approx(-0.28169, abs=1e-3)
    assert row[1] == row[0]


def test_wrap_entry_and_finiteness():
    x = UniformTimeSeries(0.0, 0.1, np.sin(np.linspace(0, 3, 50)))
    fm = fitness_matrix(OU, x, [[0, 1, 1], [1, 2, 0.5]])
    assert fm.rows.shape == (2, 50)
    np.testing.assert_array_equal(fm.rows[:, -1], fm.rows[:, 0])
    assert np.all(np.isfinite(fm.rows))
    np.testing.assert_array_equal(fm.floored, [0, 0])


def test_weighted_sum_hand_value():
    rows = np.vstack([np.ones(5), 2 * np.ones(5)])
    gamma = np.vstack([np.full(5, 0.25), np.full(5, 0.75)])
    assert weighted_negloglik(rows, gamma) == pytest.approx(7.0)


def test_wrap_entry_excluded():
    rows = np.array([[1.0, 1.0, 100.0]])
    assert weighted_negloglik(rows, np.ones((1, 3))) == 2.0


def test_shape_mismatch():
    with pytest.raises(ContractError):
        weighted_negloglik(np.ones((2, 5)), np.ones((2, 4)))


def test_floor_penalty():
    x = UniformTimeSeries(0.0, 0.1, [0.0, 8.0])
    row, floored = fitness_row(OU, x, [0.0, 10.0, 0.3], return_floored=True)
    assert floored == 1
    assert row[0] == pytest.approx(FLOOR_PENALTY)
    assert FLOOR_PENALTY == pytest.approx(690.7755, abs=1e-3)


def test_logdrift_rejects_non_positive_samples():
    with pytest.raises(DomainError):
        fitness_row(get_model("logdrift"), UniformTimeSeries(0.0, 0.1, [1.0, 0.0, 1.0]), [1.0, 0.5])


def test_series_validation():
    with pytest.raises(ValueError):
        UniformTimeSeries(0.0, 0.1, [1.0])
    with pytest.raises(ValueError):
        UniformTimeSeries(0.0, 0.0, [1.0, 2.0])
    with pytest.raises(ValueError):
        UniformTimeSeries(0.0, 0.1, [1.0, np.nan])
    s = UniformTimeSeries(1.0, 0.5, [0, 1, 2])
    np.testing.assert_allclose(s.times, [1.0, 1.5, 2.0])
    assert s.horizon == 1.0 and len(s) == 3


def test_fitness_csv(tmp_path):
    x = UniformTimeSeries(0.0, 0.1, np.linspace(0, 1, 6))
    fm = fitness_matrix(OU, x, [[0, 1, 1], [1, 1, 1]])
    fm.to_csv(tmp_path / "f.csv")
    np.testing.assert_array_equal(np.loadtxt(tmp_path / "f.csv", delimiter=","), fm.rows)


@given(
    hnp.arrays(float, (3, 8), elements=st.floats(-5, 5)),
    hnp.arrays(float, (3, 8), elements=st.floats(0, 1)),
    hnp.arrays(float, (3, 8), elements=st.floats(0, 1)),
    st.floats(-3, 3),
)
def test_linear_in_gamma(rows, g1, g2, c):
    lhs = weighted_negloglik(rows, g1 + c * g2)
    rhs = weighted_negloglik(rows, g1) + c * weighted_negloglik(rows, g2)
    assert lhs == pytest.approx(rhs, abs=1e-9 * (1 + abs(lhs)))
