from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sps

from clickchoice.errors import InputError

SCHEMA_VERSION = 1

DEFAULT_SLACK = 1e-9

SHAPE_NONE = "none"
SHAPE_MONOTONE = "monotone"
SHAPE_MCC = "mcc"
SHAPES = (SHAPE_NONE, SHAPE_MONOTONE, SHAPE_MCC)


def _frozen_array(values, dtype=float) -> np.ndarray:
    array = np.array(values, dtype=dtype, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class GridSpec:
    recency_levels: int
    frequency_levels: int

    def __post_init__(self):
        if self.recency_levels < 1 or self.frequency_levels < 1:
            raise ValueError(
                f"Grid needs at least one level per axis, got {self.recency_levels}x{self.frequency_levels}"
            )

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.recency_levels, self.frequency_levels)

    @property
    def cells(self) -> int:
        return self.recency_levels * self.frequency_levels

    def cell_index(self, i: int, j: int) -> int:
        # 1-based levels, row-major by recency
        return (i - 1) * self.frequency_levels + (j - 1)

    def describe(self) -> str:
        return f"{self.recency_levels}x{self.frequency_levels}"

    def to_dict(self) -> Dict[str, int]:
        return {"recency_levels": self.recency_levels, "frequency_levels": self.frequency_levels}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "GridSpec":
        return cls(int(data["recency_levels"]), int(data["frequency_levels"]))


@dataclass(frozen=True)
class ConstraintViolation:
    constraint: str
    residual: float


def constraint_rows(grid: GridSpec, mode: str) -> Tuple[sps.csr_matrix, List[str]]:
    """Rows G such that a table x (flattened row-major) is feasible iff G @ x >= 0.

    Families are generated only where the indices exist, so grids with fewer than three
    levels on an axis simply have no convexity/concavity rows for that axis.
    """
    if mode not in (SHAPE_MONOTONE, SHAPE_MCC):
        raise ValueError(f"Unknown shape mode: {mode}")

    rows: List[Dict[int, float]] = []
    labels: List[str] = []
    I, J = grid.shape
    idx = grid.cell_index

    for i in range(1, I):
        for j in range(1, J + 1):
            rows.append({idx(i + 1, j): 1.0, idx(i, j): -1.0})
            labels.append(f"recency-monotone(i={i},j={j})")
    for i in range(1, I + 1):
        for j in range(1, J):
            rows.append({idx(i, j + 1): 1.0, idx(i, j): -1.0})
            labels.append(f"frequency-monotone(i={i},j={j})")

    if mode == SHAPE_MCC:
        # x[i+2] - 2 x[i+1] + x[i] >= 0
        for i in range(1, I - 1):
            for j in range(1, J + 1):
                rows.append({idx(i + 2, j): 1.0, idx(i + 1, j): -2.0, idx(i, j): 1.0})
                labels.append(f"recency-convex(i={i},j={j})")
        # -(x[j+2] - 2 x[j+1] + x[j]) >= 0
        for i in range(1, I + 1):
            for j in range(1, J - 1):
                rows.append({idx(i, j + 2): -1.0, idx(i, j + 1): 2.0, idx(i, j): -1.0})
                labels.append(f"frequency-concave(i={i},j={j})")

    data, row_ind, col_ind = [], [], []
    for r, row in enumerate(rows):
        for c, v in row.items():
            row_ind.append(r)
            col_ind.append(c)
            data.append(v)
    matrix = sps.csr_matrix((data, (row_ind, col_ind)), shape=(len(rows), grid.cells))
    return matrix, labels


def shape_violations(grid: GridSpec, values: np.ndarray, mode: str, slack: float = DEFAULT_SLACK) -> List[ConstraintViolation]:
    matrix, labels = constraint_rows(grid, mode)
    if matrix.shape[0] == 0:
        return []
    residuals = matrix @ np.asarray(values, dtype=float).ravel()
    return [ConstraintViolation(labels[r], float(residuals[r])) for r in np.flatnonzero(residuals < -slack)]


@dataclass(frozen=True, eq=False)
class ProbabilityTable:
    grid: GridSpec
    values: np.ndarray
    epsilon: float
    shape: str = SHAPE_NONE

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen_array(self.values))
        if self.values.shape != self.grid.shape:
            raise ValueError(f"Table of shape {self.values.shape} does not match grid {self.grid.describe()}")
        if not 0.0 < self.epsilon < 0.5:
            raise ValueError(f"Probability bound epsilon must lie in (0, 0.5), got {self.epsilon}")
        if self.shape not in SHAPES:
            raise ValueError(f"Unknown table shape tag: {self.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("Table contains non-finite values")
        low, high = self.values.min(), self.values.max()
        if low < self.epsilon or high > 1.0 - self.epsilon:
            raise ValueError(f"Table values [{low}, {high}] leave the box [{self.epsilon}, {1.0 - self.epsilon}]")
        if self.shape != SHAPE_NONE:
            violations = shape_violations(self.grid, self.values, self.shape)
            if violations:
                raise ValueError(f"Table tagged {self.shape} violates {len(violations)} constraints, first: {violations[0]}")

    def at(self, i: int, j: int) -> float:
        return float(self.values[i - 1, j - 1])

    def same_values(self, other: "ProbabilityTable", atol: float = 0.0) -> bool:
        return self.grid == other.grid and np.allclose(self.values, other.values, rtol=0.0, atol=atol)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "grid": self.grid.to_dict(),
            "epsilon": self.epsilon,
            "shape": self.shape,
            "values": self.values.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ProbabilityTable":
        return cls(
            grid=GridSpec.from_dict(data["grid"]),
            values=np.asarray(data["values"], dtype=float),
            epsilon=float(data["epsilon"]),
            shape=data.get("shape", SHAPE_NONE),
        )


def check_shape_constraints(table: ProbabilityTable, mode: str, slack: float = DEFAULT_SLACK) -> List[ConstraintViolation]:
    return shape_violations(table.grid, table.values, mode, slack)


@dataclass(frozen=True, eq=False)
class CountTensor:
    grid: GridSpec
    categories: Tuple[str, ...]
    n: np.ndarray
    q: np.ndarray
    recency_feature: Optional[str] = None
    frequency_feature: Optional[str] = None
    config: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "categories", tuple(str(k) for k in self.categories))
        object.__setattr__(self, "n", _frozen_array(self.n, dtype=np.int64))
        object.__setattr__(self, "q", _frozen_array(self.q, dtype=np.int64))
        expected = self.grid.shape + (len(self.categories),)
        if self.n.shape != expected or self.q.shape != expected:
            raise ValueError(f"Count arrays of shape {self.n.shape}/{self.q.shape} do not match {expected}")
        if len(set(self.categories)) != len(self.categories):
            raise ValueError("Duplicate category identifiers")
        if np.any(self.q < 0) or np.any(self.q > self.n):
            raise ValueError("Counts must satisfy 0 <= q_ijk <= n_ijk")

    @property
    def num_categories(self) -> int:
        return len(self.categories)

    def category_index(self, category: str) -> int:
        try:
            return self.categories.index(category)
        except ValueError:
            raise InputError(f"Unknown category: {category}")

    def samples_per_category(self) -> np.ndarray:
        return self.n.sum(axis=(0, 1))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "grid": self.grid.to_dict(),
            "categories": list(self.categories),
            "recency_feature": self.recency_feature,
            "frequency_feature": self.frequency_feature,
            "n": self.n.tolist(),
            "q": self.q.tolist(),
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "CountTensor":
        grid = GridSpec.from_dict(data["grid"])
        categories = data["categories"]
        shape = grid.shape + (len(categories),)
        return cls(
            grid=grid,
            categories=tuple(categories),
            n=np.asarray(data["n"], dtype=np.int64).reshape(shape),
            q=np.asarray(data["q"], dtype=np.int64).reshape(shape),
            recency_feature=data.get("recency_feature"),
            frequency_feature=data.get("frequency_feature"),
            config=data.get("config", {}),
        )


def canonical_order(pi: Sequence[float], tables: Sequence[ProbabilityTable]) -> List[int]:
    return sorted(range(len(pi)), key=lambda s: (-float(pi[s]), tuple(tables[s].values.ravel().tolist())))


@dataclass(frozen=True, eq=False)
class LatentClassModel:
    kind: str
    grid: GridSpec
    categories: Tuple[str, ...]
    epsilon: float
    pi: np.ndarray
    tables: Tuple[ProbabilityTable, ...]
    memberships: np.ndarray
    final_log_likelihood: float
    class_metadata: Tuple[Dict[str, Any], ...] = ()
    recency_feature: Optional[str] = None
    frequency_feature: Optional[str] = None
    diagnostics: Dict[str, Any] = field(default_factory=dict)
    config: Dict[str, Any] = field(default_factory=dict)

    SIMPLEX_TOL = 1e-9

    def __post_init__(self):
        object.__setattr__(self, "categories", tuple(str(k) for k in self.categories))
        object.__setattr__(self, "tables", tuple(self.tables))
        object.__setattr__(self, "pi", _frozen_array(self.pi))
        object.__setattr__(self, "memberships", _frozen_array(self.memberships))
        if not self.class_metadata:
            object.__setattr__(self, "class_metadata", tuple({} for _ in self.tables))
        object.__setattr__(self, "class_metadata", tuple(self.class_metadata))

        classes = len(self.tables)
        if classes < 1:
            raise ValueError("A latent-class model needs at least one class")
        if self.pi.shape != (classes,) or len(self.class_metadata) != classes:
            raise ValueError(f"Class sizes/metadata do not match {classes} tables")
        if self.memberships.shape != (len(self.categories), classes):
            raise ValueError(
                f"Membership matrix of shape {self.memberships.shape} does not match "
                f"{len(self.categories)} categories x {classes} classes"
            )
        if abs(self.pi.sum() - 1.0) > self.SIMPLEX_TOL or np.any(self.pi <= 0.0):
            raise ValueError(f"Class sizes must be positive and sum to one, got {self.pi.tolist()}")
        if np.any(self.memberships < 0.0) or np.any(self.memberships > 1.0):
            raise ValueError("Memberships must lie in [0, 1]")
        if np.any(np.abs(self.memberships.sum(axis=1) - 1.0) > self.SIMPLEX_TOL):
            raise ValueError("Membership rows must sum to one")
        for table in self.tables:
            if table.grid != self.grid:
                raise ValueError(f"Class table grid {table.grid.describe()} differs from model grid {self.grid.describe()}")

    @property
    def classes(self) -> int:
        return len(self.tables)

    def stacked_values(self) -> np.ndarray:
        """Class tables as an array of shape (|S|, |I|, |J|)."""
        return np.stack([t.values for t in self.tables])

    def hard_assignments(self) -> np.ndarray:
        return np.argmax(self.memberships, axis=1)

    def canonical(self) -> "LatentClassModel":
        order = canonical_order(self.pi, self.tables)
        if order == list(range(self.classes)):
            return self
        return LatentClassModel(
            kind=self.kind,
            grid=self.grid,
            categories=self.categories,
            epsilon=self.epsilon,
            pi=self.pi[order],
            tables=tuple(self.tables[s] for s in order),
            memberships=self.memberships[:, order],
            final_log_likelihood=self.final_log_likelihood,
            class_metadata=tuple(self.class_metadata[s] for s in order),
            recency_feature=self.recency_feature,
            frequency_feature=self.frequency_feature,
            diagnostics=self.diagnostics,
            config=self.config,
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": self.kind,
            "grid": self.grid.to_dict(),
            "recency_feature": self.recency_feature,
            "frequency_feature": self.frequency_feature,
            "epsilon": self.epsilon,
            "categories": list(self.categories),
            "classes": [
                {"pi": float(self.pi[s]), "table": self.tables[s].to_dict(), "metadata": self.class_metadata[s]}
                for s in range(self.classes)
            ],
            "memberships": self.memberships.tolist(),
            "final_log_likelihood": self.final_log_likelihood,
            "diagnostics": self.diagnostics,
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "LatentClassModel":
        classes = data["classes"]
        return cls(
            kind=data["kind"],
            grid=GridSpec.from_dict(data["grid"]),
            categories=tuple(data["categories"]),
            epsilon=float(data["epsilon"]),
            pi=np.asarray([c["pi"] for c in classes], dtype=float),
            tables=tuple(ProbabilityTable.from_dict(c["table"]) for c in classes),
            memberships=np.asarray(data["memberships"], dtype=float).reshape(len(data["categories"]), len(classes)),
            final_log_likelihood=float(data["final_log_likelihood"]),
            class_metadata=tuple(c.get("metadata", {}) for c in classes),
            recency_feature=data.get("recency_feature"),
            frequency_feature=data.get("frequency_feature"),
            diagnostics=data.get("diagnostics", {}),
            config=data.get("config", {}),
        )
