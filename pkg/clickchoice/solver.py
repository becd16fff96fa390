import logging
from dataclasses import asdict, dataclass
from typing import Any, Dict, Optional, Tuple

import numpy as np
import scipy.sparse as sps
import scipy.sparse.linalg

from clickchoice.errors import NumericalError
from clickchoice.tables import (
    SHAPE_MCC,
    SHAPE_MONOTONE,
    CountTensor,
    GridSpec,
    ProbabilityTable,
    constraint_rows,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class WeightedCellCounts:
    grid: GridSpec
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        a = np.array(self.a, dtype=float, copy=True).reshape(self.grid.shape)
        b = np.array(self.b, dtype=float, copy=True).reshape(self.grid.shape)
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise ValueError("Cell weights must be finite")
        if np.any(a < 0.0) or np.any(b < 0.0):
            raise ValueError("Cell weights must be nonnegative")
        a.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def total(self) -> float:
        return float(self.a.sum() + self.b.sum())

    def scaled(self, factor: float) -> "WeightedCellCounts":
        return WeightedCellCounts(self.grid, self.a * factor, self.b * factor)


def weighted_counts(tensor: CountTensor, weights: np.ndarray) -> WeightedCellCounts:
    """a_ij = sum_k w_k q_ijk and b_ij = sum_k w_k (n_ijk - q_ijk)."""
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (tensor.num_categories,):
        raise ValueError(f"Expected {tensor.num_categories} category weights, got shape {weights.shape}")
    a = np.tensordot(tensor.q, weights, axes=([2], [0]))
    b = np.tensordot(tensor.n - tensor.q, weights, axes=([2], [0]))
    return WeightedCellCounts(tensor.grid, a, b)


def collapse(tensor: CountTensor) -> WeightedCellCounts:
    return weighted_counts(tensor, np.ones(tensor.num_categories))


@dataclass(frozen=True)
class SolverConfig:
    DEFAULT_EPSILON = 1e-5
    DEFAULT_KKT_TOL = 1e-8
    DEFAULT_MAX_ITERATIONS = 2000

    epsilon: float = DEFAULT_EPSILON
    kkt_tol: float = DEFAULT_KKT_TOL
    max_iterations: int = DEFAULT_MAX_ITERATIONS
    barrier_t0: float = 1.0
    barrier_mu: float = 10.0
    newton_tol: float = 1e-10
    pseudo_count: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.epsilon < 0.5:
            raise ValueError(f"epsilon must satisfy 0 < epsilon < 0.5, got {self.epsilon}")
        if self.kkt_tol <= 0.0:
            raise ValueError(f"kkt_tol must be positive, got {self.kkt_tol}")
        if self.barrier_mu <= 1.0 or self.barrier_t0 <= 0.0:
            raise ValueError("Barrier schedule needs t0 > 0 and mu > 1")
        if self.pseudo_count < 0.0:
            raise ValueError(f"pseudo_count must be nonnegative, got {self.pseudo_count}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SolverConfig":
        return cls(**{k: v for k, v in data.items() if k in cls.__dataclass_fields__})


def objective_value(table: ProbabilityTable, counts: WeightedCellCounts) -> float:
    """Sum of a_ij log x_ij + b_ij log(1 - x_ij); binomial coefficients are constant and omitted."""
    if table.grid != counts.grid:
        raise ValueError(f"Table grid {table.grid.describe()} does not match counts grid {counts.grid.describe()}")
    return _log_likelihood(table.values, counts.a, counts.b)


def _log_likelihood(x: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    if np.any(x <= 0.0) or np.any(x >= 1.0):
        raise ValueError("Probabilities must lie strictly inside (0, 1)")
    return float(np.sum(a * np.log(x)) + np.sum(b * np.log1p(-x)))


class BarrierSolver:
    """Log-barrier interior point with damped Newton steps.

    Maximizes sum a log x + b log(1 - x) over G x >= 0 and eps <= x <= 1 - eps. The objective is
    divided by the total weight so that scaling all weights leaves the solver path unchanged.
    """

    ARMIJO_ALPHA = 0.25
    BACKTRACK_BETA = 0.5
    STEP_TO_BOUNDARY = 0.99
    MAX_CENTERING_STEPS = 100
    RELATIVE_DECREMENT_TOL = 1e-13
    MIN_STEP = 1e-14

    def __init__(self, grid: GridSpec, mode: str, config: SolverConfig):
        self.grid = grid
        self.mode = mode
        self.config = config
        self.rows, self.labels = constraint_rows(grid, mode)
        self.rows = self.rows.tocsr()
        self.rows_t = self.rows.T.tocsr()
        self.num_constraints = self.rows.shape[0] + 2 * grid.cells
        self.newton_steps = 0

    # helper function
    def initial_point(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        eps = self.config.epsilon
        total = a.sum() + b.sum()
        level = a.sum() / total if total > 0 else 0.5
        level = float(np.clip(level, 2 * eps, 1 - 2 * eps))

        # the constant table sits on every shape constraint; nudge it into the interior with a
        # profile that is strictly increasing, convex in recency and concave in frequency
        I, J = self.grid.shape
        u = (np.arange(1, I + 1) / I) ** 2
        v = 1.0 - (1.0 - np.arange(1, J + 1) / (J + 1)) ** 2
        profile = (u[:, None] + v[None, :]) - 1.0
        delta = min(0.25 * min(level - eps, 1 - eps - level), 0.01)
        return (level + delta * profile).ravel()

    def _slacks(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        eps = self.config.epsilon
        return self.rows @ x, x - eps, (1.0 - eps) - x

    def _barrier_value(self, x, a, b, t) -> float:
        s, low, high = self._slacks(x)
        if np.any(s <= 0) or np.any(low <= 0) or np.any(high <= 0):
            return np.inf
        f = np.sum(a * np.log(x)) + np.sum(b * np.log1p(-x))
        return -t * f - np.sum(np.log(s)) - np.sum(np.log(low)) - np.sum(np.log(high))

    def _max_step(self, x: np.ndarray, dx: np.ndarray) -> float:
        s, low, high = self._slacks(x)
        ds = self.rows @ dx
        step = 1.0
        for slack, change in ((s, ds), (low, dx), (high, -dx)):
            shrinking = change < 0
            if np.any(shrinking):
                step = min(step, float(np.min(-slack[shrinking] / change[shrinking])))
        return step

    def _newton_step(self, x, a, b, t) -> Tuple[np.ndarray, float, np.ndarray]:
        s, low, high = self._slacks(x)
        grad = -t * (a / x - b / (1.0 - x)) - self.rows_t @ (1.0 / s) - 1.0 / low + 1.0 / high
        diag = t * (a / x ** 2 + b / (1.0 - x) ** 2) + 1.0 / low ** 2 + 1.0 / high ** 2
        hessian = sps.diags(diag) + self.rows_t @ sps.diags(1.0 / s ** 2) @ self.rows
        dx = np.atleast_1d(scipy.sparse.linalg.spsolve(hessian.tocsc(), -grad)).ravel()
        if not np.all(np.isfinite(dx)):
            raise NumericalError("Newton system could not be solved")
        decrement = float(-grad @ dx)
        return dx, decrement, grad

    def _centering(self, x, a, b, t) -> np.ndarray:
        """Damped Newton on the barrier function at weight t.

        Stops when half the Newton decrement falls under the larger of newton_tol and the rounding floor
        of the barrier value, or when a backtracked step stops lowering that value.
        """
        value = self._barrier_value(x, a, b, t)
        for _ in range(self.MAX_CENTERING_STEPS):
            if self.newton_steps >= self.config.max_iterations:
                break
            dx, decrement, grad = self._newton_step(x, a, b, t)
            self.newton_steps += 1
            if not decrement / 2.0 > max(self.config.newton_tol, self.RELATIVE_DECREMENT_TOL * abs(value)):
                break

            step = min(1.0, self.STEP_TO_BOUNDARY * self._max_step(x, dx))
            slope = float(grad @ dx)
            candidate = x + step * dx
            candidate_value = self._barrier_value(candidate, a, b, t)
            while candidate_value > value + self.ARMIJO_ALPHA * step * slope:
                step *= self.BACKTRACK_BETA
                if step < self.MIN_STEP:
                    return x
                candidate = x + step * dx
                candidate_value = self._barrier_value(candidate, a, b, t)

            # stalled: nothing representable left to gain at this barrier weight
            if candidate_value >= value or np.array_equal(candidate, x):
                return candidate
            x, value = candidate, candidate_value
        return x

    def solve(self, counts: WeightedCellCounts) -> np.ndarray:
        a = counts.a.ravel() + self.config.pseudo_count
        b = counts.b.ravel() + self.config.pseudo_count
        scale = a.sum() + b.sum()
        if scale <= 0.0:
            scale = 1.0
        a, b = a / scale, b / scale

        x = self.initial_point(a, b)
        t = self.config.barrier_t0
        while True:
            x = self._centering(x, a, b, t)
            if self.num_constraints / t <= self.config.kkt_tol:
                break
            if self.newton_steps >= self.config.max_iterations:
                raise NumericalError(
                    f"Barrier method did not converge within {self.config.max_iterations} Newton steps "
                    f"(gap {self.num_constraints / t:.3g})"
                )
            t *= self.config.barrier_mu

        logger.debug(f"Solved {self.mode} problem on {self.grid.describe()} grid in {self.newton_steps} Newton steps")
        return x.reshape(self.grid.shape)


def fit_table(counts: WeightedCellCounts, mode: str, config: Optional[SolverConfig] = None) -> ProbabilityTable:
    config = config or SolverConfig()
    values = BarrierSolver(counts.grid, mode, config).solve(counts)
    return ProbabilityTable(grid=counts.grid, values=values, epsilon=config.epsilon, shape=mode)


def fit_monotone(counts: WeightedCellCounts, config: Optional[SolverConfig] = None) -> ProbabilityTable:
    return fit_table(counts, SHAPE_MONOTONE, config)


def fit_mcc(counts: WeightedCellCounts, config: Optional[SolverConfig] = None) -> ProbabilityTable:
    return fit_table(counts, SHAPE_MCC, config)
