import logging
from concurrent.futures import Executor
from dataclasses import dataclass
from typing import Any, Dict, Optional, Sequence

import numpy as np
from scipy.special import expit, log_expit

from clickchoice.em import Component, ComponentFitter, EmConfig, run_em
from clickchoice.solver import SolverConfig, WeightedCellCounts, objective_value, weighted_counts
from clickchoice.tables import SHAPE_NONE, CountTensor, GridSpec, LatentClassModel, ProbabilityTable

logger = logging.getLogger(__name__)

BETA_CAP = 50.0
GRADIENT_TOL = 1e-8
MAX_NEWTON_ITERATIONS = 100
FULL_STEP_DECREMENT = 1e-9
SATURATED = 1e-6


@dataclass(frozen=True)
class LogisticClassParams:
    beta0: float
    beta1: float
    beta2: float
    capped: bool = False

    def __post_init__(self):
        if not np.all(np.isfinite(self.as_array())):
            raise ValueError(f"Logistic coefficients must be finite, got {self.as_array().tolist()}")

    def as_array(self) -> np.ndarray:
        return np.array([self.beta0, self.beta1, self.beta2], dtype=float)

    @classmethod
    def from_array(cls, beta: Sequence[float], capped: bool = False) -> "LogisticClassParams":
        return cls(float(beta[0]), float(beta[1]), float(beta[2]), capped)

    def to_dict(self) -> Dict[str, Any]:
        return {"beta": self.as_array().tolist(), "capped": self.capped}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "LogisticClassParams":
        return cls.from_array(data["beta"], bool(data.get("capped", False)))


def design_matrix(grid: GridSpec) -> np.ndarray:
    """Rows (1, i, j) on raw levels, in the row-major cell order of the grid."""
    i, j = np.meshgrid(np.arange(1, grid.recency_levels + 1), np.arange(1, grid.frequency_levels + 1), indexing="ij")
    return np.column_stack([np.ones(grid.cells), i.ravel(), j.ravel()]).astype(float)


def logistic_table(params: LogisticClassParams, grid: GridSpec, epsilon: float = SolverConfig.DEFAULT_EPSILON) -> ProbabilityTable:
    values = expit(design_matrix(grid) @ params.as_array()).reshape(grid.shape)
    return ProbabilityTable(grid=grid, values=np.clip(values, epsilon, 1.0 - epsilon), epsilon=epsilon, shape=SHAPE_NONE)


def _normalized_log_likelihood(beta, design, a, b, total) -> float:
    eta = design @ beta
    return float(np.sum(a * log_expit(eta)) + np.sum(b * log_expit(-eta))) / total


def logistic_gradient(params: LogisticClassParams, counts: WeightedCellCounts) -> np.ndarray:
    """Gradient of the weighted log-likelihood divided by the total weight."""
    design = design_matrix(counts.grid)
    a, b = counts.a.ravel(), counts.b.ravel()
    total = a.sum() + b.sum()
    if total <= 0.0:
        return np.zeros(3)
    p = expit(design @ params.as_array())
    return design.T @ (a - (a + b) * p) / total


def fit_logistic_counts(counts: WeightedCellCounts, start: Optional[LogisticClassParams] = None) -> LogisticClassParams:
    design = design_matrix(counts.grid)
    a, b = counts.a.ravel(), counts.b.ravel()
    w = a + b
    total = w.sum()

    if total <= 0.0:
        return LogisticClassParams(0.0, 0.0, 0.0)
    if a.sum() <= 0.0:
        logger.warning("No purchases carry weight in this class; intercept capped at the lower bound")
        return LogisticClassParams(-BETA_CAP, 0.0, 0.0, capped=True)
    if b.sum() <= 0.0:
        logger.warning("Every weighted view is a purchase; intercept capped at the upper bound")
        return LogisticClassParams(BETA_CAP, 0.0, 0.0, capped=True)

    if start is not None:
        beta = start.as_array()
    else:
        rate = a.sum() / total
        beta = np.array([np.log(rate) - np.log1p(-rate), 0.0, 0.0])

    capped = False
    current = _normalized_log_likelihood(beta, design, a, b, total)
    for _ in range(MAX_NEWTON_ITERATIONS):
        p = expit(design @ beta)
        grad = design.T @ (a - w * p) / total
        if np.linalg.norm(grad) <= GRADIENT_TOL:
            break
        hessian = (design.T * (w * p * (1.0 - p))) @ design / total
        step = np.linalg.lstsq(hessian, grad, rcond=None)[0]

        if float(grad @ step) < FULL_STEP_DECREMENT:
            candidate = np.clip(beta + step, -BETA_CAP, BETA_CAP)
            value = _normalized_log_likelihood(candidate, design, a, b, total)
        else:
            scale = 1.0
            while scale > 1e-12:
                candidate = np.clip(beta + scale * step, -BETA_CAP, BETA_CAP)
                value = _normalized_log_likelihood(candidate, design, a, b, total)
                if value >= current:
                    break
                scale *= 0.5
            else:
                break

        if np.any(np.abs(candidate) >= BETA_CAP):
            capped = True
        if np.array_equal(candidate, beta):
            break
        beta, current = candidate, value
    else:
        logger.warning(f"Weighted logistic fit stopped after {MAX_NEWTON_ITERATIONS} Newton iterations")

    # separated data: the likelihood keeps rising along beta, so move out to the cap
    p = expit(design @ beta)
    if not capped and np.all((w == 0.0) | (p * (1.0 - p) < SATURATED)):
        stretched = beta * (BETA_CAP / np.max(np.abs(beta)))
        if _normalized_log_likelihood(stretched, design, a, b, total) >= current:
            beta, capped = stretched, True

    if capped:
        logger.warning(f"Logistic coefficients reached the separation cap: {beta.tolist()}")
    return LogisticClassParams.from_array(beta, capped)


def fit_weighted_logistic(
    tensor: CountTensor, weights: np.ndarray, start: Optional[LogisticClassParams] = None
) -> LogisticClassParams:
    return fit_logistic_counts(weighted_counts(tensor, weights), start)


class LogisticFitter(ComponentFitter):

    kind = "lclr"

    def __init__(self, epsilon: float = SolverConfig.DEFAULT_EPSILON):
        self.epsilon = epsilon

    def fit(self, counts: WeightedCellCounts, previous: Optional[Component] = None) -> Component:
        start = LogisticClassParams.from_dict(previous[1]) if previous is not None else None
        params = fit_logistic_counts(counts, start)
        table = logistic_table(params, counts.grid, self.epsilon)
        if previous is not None and objective_value(previous[0], counts) > objective_value(table, counts):
            return previous
        return table, params.to_dict()


def lclr_em_fit(tensor: CountTensor, config: EmConfig, executor: Optional[Executor] = None) -> LatentClassModel:
    return run_em(tensor, config, LogisticFitter(config.solver.epsilon), executor)


def class_params(model: LatentClassModel) -> Sequence[LogisticClassParams]:
    if model.kind != LogisticFitter.kind:
        raise ValueError(f"Model of kind {model.kind} carries no logistic coefficients")
    return [LogisticClassParams.from_dict(metadata) for metadata in model.class_metadata]
