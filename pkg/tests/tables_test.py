import numpy as np
import pytest

from clickchoice.errors import InputError
from clickchoice.tables import (
    SHAPE_MCC,
    SHAPE_MONOTONE,
    CountTensor,
    GridSpec,
    LatentClassModel,
    ProbabilityTable,
    canonical_order,
    check_shape_constraints,
    constraint_rows,
)

EPS = 1e-5


def test_constraint_rows_skip_missing_families():
    _, labels = constraint_rows(GridSpec(2, 2), SHAPE_MCC)
    assert len(labels) == 4
    assert not any("convex" in label or "concave" in label for label in labels)

    matrix, labels = constraint_rows(GridSpec(3, 3), SHAPE_MCC)
    # 6 + 6 monotone rows, 3 convex, 3 concave
    assert matrix.shape == (18, 9)
    assert sum("recency-convex" in label for label in labels) == 3
    assert sum("frequency-concave" in label for label in labels) == 3


def test_constraint_rows_single_cell_is_empty():
    matrix, labels = constraint_rows(GridSpec(1, 1), SHAPE_MONOTONE)
    assert matrix.shape == (0, 1)
    assert labels == []


def test_check_shape_constraints_names_violation():
    table = ProbabilityTable(GridSpec(1, 3), np.array([[0.1, 0.2, 0.9]]), EPS)
    assert check_shape_constraints(table, SHAPE_MONOTONE) == []
    violations = check_shape_constraints(table, SHAPE_MCC)
    assert len(violations) == 1
    assert violations[0].constraint == "frequency-concave(i=1,j=1)"
    assert violations[0].residual == pytest.approx(-0.6)


def test_recency_convexity_violation():
    table = ProbabilityTable(GridSpec(3, 1), np.array([[0.1], [0.5], [0.6]]), EPS)
    labels = [v.constraint for v in check_shape_constraints(table, SHAPE_MCC)]
    assert labels == ["recency-convex(i=1,j=1)"]


def test_probability_table_validation():
    grid = GridSpec(2, 1)
    with pytest.raises(ValueError):
        ProbabilityTable(grid, np.array([[0.0], [0.5]]), EPS)
    with pytest.raises(ValueError):
        ProbabilityTable(grid, np.array([[0.6], [0.5]]), EPS, shape=SHAPE_MONOTONE)
    with pytest.raises(ValueError):
        ProbabilityTable(grid, np.array([[0.5, 0.5]]), EPS)

    table = ProbabilityTable(grid, np.array([[EPS], [1 - EPS]]), EPS, shape=SHAPE_MONOTONE)
    assert table.at(2, 1) == 1 - EPS
    assert not table.values.flags.writeable


def test_count_tensor_validation():
    grid = GridSpec(1, 2)
    n = np.array([[[3], [2]]])
    with pytest.raises(ValueError):
        CountTensor(grid, ("a",), n, n + 1)
    with pytest.raises(ValueError):
        CountTensor(grid, ("a", "a"), np.zeros((1, 2, 2)), np.zeros((1, 2, 2)))

    tensor = CountTensor(grid, ("a",), n, np.array([[[1], [0]]]))
    assert tensor.samples_per_category().tolist() == [5]
    assert tensor.category_index("a") == 0
    with pytest.raises(InputError, match="Unknown category: b"):
        tensor.category_index("b")


def test_count_tensor_dict_round_trip_keeps_features():
    grid = GridSpec(2, 2)
    n = np.arange(8).reshape(2, 2, 2)
    tensor = CountTensor(grid, ("x", "y"), n, n // 2, "dayr", "viewf", {"seed": 3})
    restored = CountTensor.from_dict(tensor.to_dict())
    assert restored.categories == ("x", "y")
    assert restored.recency_feature == "dayr"
    assert restored.config == {"seed": 3}
    np.testing.assert_array_equal(restored.q, tensor.q)


def _constant(grid, value):
    return ProbabilityTable(grid, np.full(grid.shape, value), EPS)


def test_canonical_order_by_size_then_values():
    grid = GridSpec(1, 1)
    tables = [_constant(grid, 0.7), _constant(grid, 0.2), _constant(grid, 0.4)]
    assert canonical_order([0.25, 0.5, 0.25], tables) == [1, 2, 0]


def test_model_validation_and_canonical_permutation():
    grid = GridSpec(1, 1)
    model = LatentClassModel(
        kind="lcmcc",
        grid=grid,
        categories=("a", "b", "c"),
        epsilon=EPS,
        pi=[1 / 3, 2 / 3],
        tables=[_constant(grid, 0.8), _constant(grid, 0.1)],
        memberships=[[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]],
        final_log_likelihood=-1.0,
    )
    canonical = model.canonical()
    assert canonical.pi.tolist() == pytest.approx([2 / 3, 1 / 3])
    assert canonical.tables[0].at(1, 1) == 0.1
    assert canonical.hard_assignments().tolist() == [1, 0, 0]
    assert canonical.stacked_values().shape == (2, 1, 1)

    with pytest.raises(ValueError):
        LatentClassModel("lcmcc", grid, ("a",), EPS, [0.5, 0.6], model.tables, [[0.5, 0.5]], 0.0)
    with pytest.raises(ValueError):
        LatentClassModel("lcmcc", grid, ("a",), EPS, [0.5, 0.5], model.tables, [[0.7, 0.7]], 0.0)


def test_model_dict_round_trip():
    grid = GridSpec(2, 1)
    table = ProbabilityTable(grid, np.array([[0.2], [0.3]]), EPS, shape=SHAPE_MCC)
    model = LatentClassModel(
        "lclr", grid, ("a",), EPS, [1.0], [table], [[1.0]], -3.5, class_metadata=({"beta": [1.0, 0.0, 0.0]},)
    )
    data = model.to_dict()
    assert data["schema_version"] == 1
    restored = LatentClassModel.from_dict(data)
    assert restored.class_metadata[0]["beta"] == [1.0, 0.0, 0.0]
    assert restored.tables[0].same_values(table)
    assert restored.tables[0].shape == SHAPE_MCC
