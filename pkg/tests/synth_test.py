import itertools

import numpy as np
import pandas as pd
import pytest

from clickchoice.features import FeatureConfig, build_samples
from clickchoice.solver import WeightedCellCounts
from clickchoice.synth import (
    ClickstreamProfile,
    day_range,
    generate_planted_tensor,
    generate_synthetic_clickstream,
    oracle_fit,
    planted_tables,
    pool_adjacent_violators,
)
from clickchoice.tables import SHAPE_MCC, SHAPE_MONOTONE, GridSpec, ProbabilityTable, check_shape_constraints

EPS = 1e-5


def test_planted_tables_are_separated_and_feasible():
    for classes in (1, 2, 4):
        tables = planted_tables(GridSpec(6, 4), classes)
        assert len(tables) == classes
        for table in tables:
            assert check_shape_constraints(table, SHAPE_MCC) == []
        for first, second in itertools.combinations(tables, 2):
            assert np.min(np.abs(first.values - second.values)) >= 0.15

    with pytest.raises(ValueError):
        planted_tables(GridSpec(2, 2), 8)


def test_zero_exposure_gives_empty_counts():
    tables = planted_tables(GridSpec(3, 2), 2)
    tensor, truth = generate_planted_tensor(tables, [0, 1, 1], 0, seed=1)
    assert tensor.n.sum() == 0
    assert tensor.q.sum() == 0
    np.testing.assert_allclose(truth.pi, [1 / 3, 2 / 3])


def test_epsilon_tables_produce_almost_no_purchases():
    grid = GridSpec(2, 2)
    floor = ProbabilityTable(grid, np.full(grid.shape, EPS), EPS, shape=SHAPE_MCC)
    tensor, _ = generate_planted_tensor([floor], [0, 0, 0], 100, seed=4)
    assert tensor.n.sum() == 1200
    assert tensor.q.sum() <= 2
    assert tensor.categories == ("c000", "c001", "c002")


def test_infeasible_planted_table_is_rejected():
    grid = GridSpec(3, 1)
    falling = ProbabilityTable(grid, np.array([[0.6], [0.4], [0.2]]), EPS)
    with pytest.raises(ValueError, match="not MCC-feasible"):
        generate_planted_tensor([falling], [0], 10, seed=0)
    with pytest.raises(ValueError):
        generate_planted_tensor(planted_tables(grid, 1), [1], 10, seed=0)


def test_planted_counts_are_seeded():
    tables = planted_tables(GridSpec(3, 3), 2)
    first, _ = generate_planted_tensor(tables, [0, 1, 0, 1], 30, seed=9)
    second, _ = generate_planted_tensor(tables, [0, 1, 0, 1], 30, seed=9)
    np.testing.assert_array_equal(first.q, second.q)
    assert np.all(first.q <= first.n)


def test_oracle_single_cell():
    counts = WeightedCellCounts(GridSpec(1, 1), np.array([[3.0]]), np.array([[7.0]]))
    table, objective = oracle_fit(counts, SHAPE_MONOTONE)
    assert table.values[0, 0] == pytest.approx(0.30)
    assert objective == pytest.approx(3 * np.log(0.3) + 7 * np.log(0.7))


def test_oracle_monotone_dominates_mcc():
    rng = np.random.default_rng(5)
    grid = GridSpec(3, 1)
    for _ in range(5):
        counts = WeightedCellCounts(grid, rng.integers(0, 10, grid.shape).astype(float), rng.integers(0, 10, grid.shape).astype(float))
        monotone, monotone_objective = oracle_fit(counts, SHAPE_MONOTONE, step=0.02)
        mcc, mcc_objective = oracle_fit(counts, SHAPE_MCC, step=0.02)
        assert monotone_objective >= mcc_objective - 1e-12
        assert check_shape_constraints(mcc, SHAPE_MCC) == []


def test_oracle_rejects_large_grids():
    counts = WeightedCellCounts(GridSpec(5, 1), np.ones((5, 1)), np.ones((5, 1)))
    with pytest.raises(ValueError):
        oracle_fit(counts, SHAPE_MONOTONE)


def test_pool_adjacent_violators():
    np.testing.assert_allclose(pool_adjacent_violators([8, 2], [2, 8]), [0.5, 0.5])
    np.testing.assert_allclose(pool_adjacent_violators([1, 3, 2], [9, 7, 8]), [0.1, 0.25, 0.25])
    np.testing.assert_allclose(pool_adjacent_violators([1, 0, 4], [3, 0, 4]), [0.25, 0.25, 0.5])
    np.testing.assert_allclose(pool_adjacent_violators([0, 0], [0, 0]), [0.5, 0.5])


def small_profile(**overrides):
    settings = dict(customers=6, categories=3, classes=2, products_per_category=3, interest_size=4, days=12, lookback_days=7)
    settings.update(overrides)
    return ClickstreamProfile(**settings)


def test_no_visits_give_an_empty_stream():
    events, truth = generate_synthetic_clickstream(small_profile(visit_prob=0.0), seed=1)
    assert events.empty
    assert list(events.columns) == ["timestamp", "customer_id", "product_id", "category_id", "kind"]
    assert truth["category_classes"] == {"cat00": 0, "cat01": 1, "cat02": 0}


def test_generator_is_seeded():
    profile = small_profile(visit_prob=0.8)
    first, _ = generate_synthetic_clickstream(profile, seed=3)
    second, _ = generate_synthetic_clickstream(profile, seed=3)
    pd.testing.assert_frame_equal(first, second)
    assert len(first) > 0
    assert first["product_id"].str.fullmatch(r"cat0[0-2]-p0[0-2]").all()
    assert first["customer_id"].str.fullmatch(r"u0000[0-5]").all()


def test_purchases_follow_views():
    profile = small_profile(visit_prob=0.9, tables=[[[0.9] * 16] * 24, [[0.9] * 16] * 24])
    events, _ = generate_synthetic_clickstream(profile, seed=7)
    purchases = events[events["kind"] == "purchase"]
    assert len(purchases) > 0
    assert (purchases["timestamp"].dt.hour == 23).all()
    views = events[events["kind"] == "view"]
    assert views["timestamp"].dt.hour.between(8, 19).all()
    for row in purchases.itertuples():
        earlier = views[
            (views["customer_id"] == row.customer_id)
            & (views["product_id"] == row.product_id)
            & (views["timestamp"] < row.timestamp.floor("D"))
        ]
        assert len(earlier) > 0


def test_synthetic_stream_feeds_feature_building():
    profile = small_profile(visit_prob=0.8)
    events, _ = generate_synthetic_clickstream(profile, seed=2)
    dates = day_range(profile)
    assert len(dates) == 12
    samples = build_samples(events, dates[7:], FeatureConfig(lookback_days=7))
    assert samples["recency"].between(1, 24).all()
    assert samples["frequency"].between(1, 16).all()


def test_profile_round_trip():
    profile = small_profile(category_classes={"x": 1, "y": 0})
    assert ClickstreamProfile.from_dict(profile.to_dict()) == profile
    assert profile.category_ids() == ["x", "y"]
    with pytest.raises(ValueError):
        small_profile(visit_prob=1.5)
