import itertools

import numpy as np
import pytest

from clickchoice.errors import NumericalError
from clickchoice.solver import (
    BarrierSolver,
    SolverConfig,
    WeightedCellCounts,
    collapse,
    fit_mcc,
    fit_monotone,
    fit_table,
    objective_value,
    weighted_counts,
)
from clickchoice.synth import oracle_fit, pool_adjacent_violators
from clickchoice.tables import SHAPE_MCC, SHAPE_MONOTONE, CountTensor, GridSpec, ProbabilityTable, check_shape_constraints

EPS = SolverConfig.DEFAULT_EPSILON


def counts(grid, a, b):
    return WeightedCellCounts(grid, np.asarray(a, dtype=float), np.asarray(b, dtype=float))


def assert_feasible(table, mode):
    assert check_shape_constraints(table, mode, slack=1e-9) == []
    assert table.values.min() >= EPS
    assert table.values.max() <= 1 - EPS


def test_weighted_counts_validation():
    with pytest.raises(ValueError):
        counts(GridSpec(1, 1), [[-1.0]], [[1.0]])
    with pytest.raises(ValueError):
        counts(GridSpec(1, 1), [[np.inf]], [[1.0]])


def test_weighted_counts_from_tensor():
    grid = GridSpec(1, 2)
    n = np.array([[[4, 2], [6, 0]]])
    q = np.array([[[1, 2], [3, 0]]])
    tensor = CountTensor(grid, ("a", "b"), n, q)
    weighted = weighted_counts(tensor, np.array([0.5, 1.0]))
    np.testing.assert_allclose(weighted.a, [[2.5, 1.5]])
    np.testing.assert_allclose(weighted.b, [[1.5, 1.5]])
    np.testing.assert_allclose(collapse(tensor).a, [[3.0, 3.0]])
    with pytest.raises(ValueError):
        weighted_counts(tensor, np.ones(3))


def test_single_cell_is_closed_form():
    table = fit_monotone(counts(GridSpec(1, 1), [[3.0]], [[7.0]]))
    assert table.at(1, 1) == pytest.approx(0.3, abs=1e-6)
    assert table.shape == SHAPE_MONOTONE


def test_slack_constraints_give_cellwise_mle():
    table = fit_monotone(counts(GridSpec(2, 1), [[2.0], [8.0]], [[8.0], [2.0]]))
    np.testing.assert_allclose(table.values.ravel(), [0.2, 0.8], atol=1e-5)


def test_violating_pair_is_pooled():
    table = fit_monotone(counts(GridSpec(2, 1), [[8.0], [2.0]], [[2.0], [8.0]]))
    np.testing.assert_allclose(table.values.ravel(), [0.5, 0.5], atol=1e-5)
    assert_feasible(table, SHAPE_MONOTONE)


def test_symmetric_weights_give_constant_table():
    grid = GridSpec(4, 3)
    table = fit_mcc(counts(grid, np.full(grid.shape, 5.0), np.full(grid.shape, 5.0)))
    np.testing.assert_allclose(table.values, 0.5, atol=1e-3)
    assert_feasible(table, SHAPE_MCC)


def test_frequency_concavity_becomes_active():
    grid = GridSpec(1, 3)
    weights = counts(grid, [[1.0, 2.0, 9.0]], [[9.0, 8.0, 1.0]])
    table = fit_mcc(weights)
    assert_feasible(table, SHAPE_MCC)
    x = table.values.ravel()
    assert (x[2] - x[1]) - (x[1] - x[0]) == pytest.approx(0.0, abs=1e-5)

    _, best = oracle_fit(weights, SHAPE_MCC)
    assert objective_value(table, weights) >= best - 1e-3


def test_recency_convexity_example_matches_oracle():
    grid = GridSpec(3, 1)
    weights = counts(grid, [[1.0], [5.0], [6.0]], [[9.0], [5.0], [4.0]])
    table = fit_mcc(weights)
    assert_feasible(table, SHAPE_MCC)
    _, best = oracle_fit(weights, SHAPE_MCC)
    assert objective_value(table, weights) >= best - 1e-3


def test_objective_value_examples():
    grid = GridSpec(1, 1)
    half = ProbabilityTable(grid, np.array([[0.5]]), EPS)
    assert objective_value(half, counts(grid, [[0.0]], [[0.0]])) == 0.0
    assert objective_value(half, counts(grid, [[1.0]], [[1.0]])) == pytest.approx(2 * np.log(0.5))
    with pytest.raises(ValueError):
        objective_value(half, counts(GridSpec(1, 2), [[1.0, 1.0]], [[1.0, 1.0]]))


@pytest.mark.parametrize("shape", [(1, 1), (2, 1), (1, 2), (3, 1), (1, 3)])
def test_solver_matches_lattice_oracle(shape):
    rng = np.random.default_rng(sum(shape))
    grid = GridSpec(*shape)
    for _ in range(25):
        weights = counts(grid, rng.integers(0, 21, size=shape), rng.integers(0, 21, size=shape))
        for mode, fit in ((SHAPE_MONOTONE, fit_monotone), (SHAPE_MCC, fit_mcc)):
            table = fit(weights)
            assert_feasible(table, mode)
            _, best = oracle_fit(weights, mode)
            assert objective_value(table, weights) >= best - 1e-3


@pytest.mark.slow
def test_solver_matches_lattice_oracle_on_square_grid():
    rng = np.random.default_rng(22)
    grid = GridSpec(2, 2)
    for _ in range(3):
        weights = counts(grid, rng.integers(0, 21, size=(2, 2)), rng.integers(0, 21, size=(2, 2)))
        table = fit_mcc(weights)
        _, best = oracle_fit(weights, SHAPE_MCC)
        assert objective_value(table, weights) >= best - 1e-3


def test_monotone_chain_matches_pool_adjacent_violators():
    rng = np.random.default_rng(5)
    for length in (2, 5, 8):
        a = rng.integers(1, 21, size=length).astype(float)
        b = rng.integers(1, 21, size=length).astype(float)
        for grid, shape in ((GridSpec(1, length), (1, length)), (GridSpec(length, 1), (length, 1))):
            table = fit_monotone(counts(grid, a.reshape(shape), b.reshape(shape)))
            np.testing.assert_allclose(table.values.ravel(), pool_adjacent_violators(a, b), atol=1e-3)


def test_doubling_weights_leaves_argmax_unchanged():
    rng = np.random.default_rng(11)
    grid = GridSpec(4, 3)
    a = rng.integers(0, 30, size=grid.shape).astype(float)
    b = rng.integers(0, 30, size=grid.shape).astype(float)
    once = fit_mcc(counts(grid, a, b))
    twice = fit_mcc(counts(grid, 2 * a, 2 * b))
    assert once.same_values(twice, atol=1e-6)


def test_monotone_dominates_mcc():
    rng = np.random.default_rng(3)
    grid = GridSpec(4, 4)
    for _ in range(5):
        weights = counts(grid, rng.integers(0, 20, size=grid.shape), rng.integers(0, 20, size=grid.shape))
        assert objective_value(fit_monotone(weights), weights) >= objective_value(fit_mcc(weights), weights) - 1e-6


def test_zero_weight_cells_stay_feasible():
    grid = GridSpec(5, 4)
    a = np.zeros(grid.shape)
    b = np.zeros(grid.shape)
    a[0, 0], b[0, 0] = 3.0, 1.0
    a[4, 3], b[4, 3] = 1.0, 9.0
    table = fit_mcc(counts(grid, a, b))
    assert_feasible(table, SHAPE_MCC)

    empty = fit_mcc(counts(grid, np.zeros(grid.shape), np.zeros(grid.shape)))
    assert_feasible(empty, SHAPE_MCC)


def test_fit_is_deterministic():
    grid = GridSpec(3, 3)
    weights = counts(grid, np.arange(9).reshape(3, 3), np.arange(9)[::-1].reshape(3, 3))
    assert fit_mcc(weights).same_values(fit_mcc(weights))


def test_exhausting_newton_iterations_raises():
    grid = GridSpec(3, 3)
    weights = counts(grid, np.ones(grid.shape), np.ones(grid.shape))
    with pytest.raises(NumericalError):
        fit_mcc(weights, SolverConfig(max_iterations=2))


def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(epsilon=0.5)
    with pytest.raises(ValueError):
        SolverConfig(pseudo_count=-1.0)
    config = SolverConfig(kkt_tol=1e-7)
    assert SolverConfig.from_dict(config.to_dict()) == config


def test_all_small_grids_reach_oracle_on_extreme_weights():
    for shape in itertools.product((1, 2, 3), repeat=2):
        grid = GridSpec(*shape)
        if grid.cells > 3:
            continue
        weights = counts(grid, np.full(shape, 20.0), np.zeros(shape))
        table = fit_mcc(weights)
        _, best = oracle_fit(weights, SHAPE_MCC)
        assert objective_value(table, weights) >= best - 1e-3


@pytest.mark.parametrize("mode", [SHAPE_MONOTONE, SHAPE_MCC])
def test_single_cell_reaches_closed_form_for_every_small_count(mode):
    grid = GridSpec(1, 1)
    for a, b in itertools.product(range(21), repeat=2):
        table = fit_table(counts(grid, [[float(a)]], [[float(b)]]), mode)
        expected = 0.5 if a + b == 0 else float(np.clip(a / (a + b), EPS, 1 - EPS))
        assert table.at(1, 1) == pytest.approx(expected, abs=1e-6), (a, b)


def test_lopsided_single_cell_stays_within_newton_budget():
    grid = GridSpec(1, 1)
    solver = BarrierSolver(grid, SHAPE_MCC, SolverConfig())
    values = solver.solve(counts(grid, [[9.0]], [[1.0]]))
    assert values[0, 0] == pytest.approx(0.9, abs=1e-6)
    assert solver.newton_steps < SolverConfig.DEFAULT_MAX_ITERATIONS // 2


def test_large_grid_stays_within_newton_budget():
    rng = np.random.default_rng(17)
    grid = GridSpec(24, 16)
    weights = counts(grid, rng.integers(0, 5, size=grid.shape), rng.integers(0, 200, size=grid.shape))
    solver = BarrierSolver(grid, SHAPE_MCC, SolverConfig())
    solver.solve(weights)
    assert solver.newton_steps < SolverConfig.DEFAULT_MAX_ITERATIONS


@pytest.mark.slow
@pytest.mark.parametrize("shape", [(1, 1), (2, 1), (1, 2), (3, 1), (1, 3)])
def test_solver_matches_lattice_oracle_at_scale(shape):
    rng = np.random.default_rng(100 + sum(shape))
    grid = GridSpec(*shape)
    for _ in range(200):
        weights = counts(grid, rng.integers(0, 21, size=shape), rng.integers(0, 21, size=shape))
        for mode in (SHAPE_MONOTONE, SHAPE_MCC):
            table = fit_table(weights, mode)
            assert_feasible(table, mode)
            _, best = oracle_fit(weights, mode)
            assert objective_value(table, weights) >= best - 1e-3


@pytest.mark.slow
def test_square_grid_beats_coarse_lattice_at_scale():
    # a coarser lattice bounds the optimum from below just the same
    rng = np.random.default_rng(23)
    grid = GridSpec(2, 2)
    for _ in range(200):
        weights = counts(grid, rng.integers(0, 21, size=(2, 2)), rng.integers(0, 21, size=(2, 2)))
        for mode in (SHAPE_MONOTONE, SHAPE_MCC):
            table = fit_table(weights, mode)
            assert_feasible(table, mode)
            _, best = oracle_fit(weights, mode, step=0.02)
            assert objective_value(table, weights) >= best - 1e-3
