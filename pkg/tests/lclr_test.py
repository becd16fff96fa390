import numpy as np
import pytest
from scipy.special import expit

from clickchoice.em import EmConfig
from clickchoice.lclr import (
    BETA_CAP,
    LogisticClassParams,
    class_params,
    design_matrix,
    fit_logistic_counts,
    fit_weighted_logistic,
    lclr_em_fit,
    logistic_gradient,
    logistic_table,
)
from clickchoice.solver import WeightedCellCounts, collapse
from clickchoice.tables import SHAPE_MONOTONE, SHAPE_NONE, CountTensor, GridSpec, check_shape_constraints

EPS = 1e-5


def test_logistic_table_examples():
    grid = GridSpec(3, 2)
    np.testing.assert_allclose(logistic_table(LogisticClassParams(0.0, 0.0, 0.0), grid).values, 0.5)
    np.testing.assert_allclose(logistic_table(LogisticClassParams(-100.0, 0.0, 0.0), grid).values, EPS)

    rising = logistic_table(LogisticClassParams(-1.0, 0.5, 0.0), grid)
    assert rising.shape == SHAPE_NONE
    assert check_shape_constraints(rising, SHAPE_MONOTONE) == []
    np.testing.assert_allclose(rising.values[:, 0], rising.values[:, 1])


def test_design_matrix_uses_raw_levels():
    design = design_matrix(GridSpec(2, 3))
    assert design.tolist()[0] == [1.0, 1.0, 1.0]
    assert design.tolist()[-1] == [1.0, 2.0, 3.0]
    assert design.shape == (6, 3)


def test_recovers_generating_coefficients():
    grid = GridSpec(10, 8)
    truth = np.array([-2.0, 0.1, 0.2])
    p = expit(design_matrix(grid) @ truth).reshape(grid.shape)
    n = 1_000_000
    counts = WeightedCellCounts(grid, np.round(n * p), n - np.round(n * p))

    params = fit_logistic_counts(counts)
    np.testing.assert_allclose(params.as_array(), truth, atol=0.05)
    assert not params.capped
    assert np.linalg.norm(logistic_gradient(params, counts)) <= 1e-8


def test_no_purchases_hits_the_cap():
    grid = GridSpec(2, 2)
    counts = WeightedCellCounts(grid, np.zeros(grid.shape), np.full(grid.shape, 10.0))
    params = fit_logistic_counts(counts)
    assert params.beta0 == -BETA_CAP
    assert params.beta1 == pytest.approx(0.0)
    assert params.beta2 == pytest.approx(0.0)
    assert params.capped

    everything = fit_logistic_counts(WeightedCellCounts(grid, np.full(grid.shape, 3.0), np.zeros(grid.shape)))
    assert everything.beta0 == BETA_CAP


def test_separated_data_stays_within_cap():
    grid = GridSpec(4, 1)
    a = np.array([[0.0], [0.0], [5.0], [5.0]])
    b = np.array([[5.0], [5.0], [0.0], [0.0]])
    params = fit_logistic_counts(WeightedCellCounts(grid, a, b))
    assert np.all(np.abs(params.as_array()) <= BETA_CAP)
    assert params.capped
    table = logistic_table(params, grid)
    assert table.values[0, 0] < 0.01 and table.values[3, 0] > 0.99


def test_weighted_fit_uses_membership_weights():
    grid = GridSpec(3, 2)
    rng = np.random.default_rng(0)
    n = rng.integers(5, 50, size=grid.shape + (3,))
    q = rng.binomial(n, 0.3)
    tensor = CountTensor(grid, ("a", "b", "c"), n, q)
    only_first = fit_weighted_logistic(tensor, np.array([1.0, 0.0, 0.0]))
    alone = CountTensor(grid, ("a",), n[:, :, :1], q[:, :, :1])
    np.testing.assert_allclose(only_first.as_array(), fit_logistic_counts(collapse(alone)).as_array(), atol=1e-8)


def test_single_class_is_pooled_logistic_regression():
    grid = GridSpec(4, 3)
    rng = np.random.default_rng(1)
    n = rng.integers(5, 40, size=grid.shape + (6,))
    p = expit(design_matrix(grid) @ np.array([-1.5, 0.2, 0.1])).reshape(grid.shape)
    q = rng.binomial(n, p[:, :, None] * np.ones(6))
    tensor = CountTensor(grid, tuple("abcdef"), n, q)

    model = lclr_em_fit(tensor, EmConfig(classes=1, restarts=2, seed=3))
    assert model.kind == "lclr"
    pooled = fit_logistic_counts(collapse(tensor))
    np.testing.assert_allclose(class_params(model)[0].as_array(), pooled.as_array(), atol=1e-4)


def test_lclr_is_deterministic():
    grid = GridSpec(3, 3)
    rng = np.random.default_rng(2)
    n = rng.integers(0, 20, size=grid.shape + (10,))
    tensor = CountTensor(grid, tuple(f"k{k}" for k in range(10)), n, rng.binomial(n, 0.2))
    config = EmConfig(classes=2, restarts=3, seed=11)
    first = lclr_em_fit(tensor, config)
    second = lclr_em_fit(tensor, config)
    assert first.to_dict() == second.to_dict()
    np.testing.assert_allclose(first.memberships.sum(axis=1), 1.0, atol=1e-12)
    assert all(len(metadata["beta"]) == 3 for metadata in first.class_metadata)


def test_params_validation():
    with pytest.raises(ValueError):
        LogisticClassParams(np.nan, 0.0, 0.0)
    params = LogisticClassParams(1.0, -2.0, 0.5, capped=True)
    assert LogisticClassParams.from_dict(params.to_dict()) == params
