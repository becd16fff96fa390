import logging
from concurrent.futures import Executor
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp
from scipy.stats import binom
from tqdm import tqdm

from clickchoice.errors import NumericalError
from clickchoice.solver import SolverConfig, WeightedCellCounts, collapse, fit_mcc, fit_table, objective_value, weighted_counts
from clickchoice.tables import SHAPE_MONOTONE, CountTensor, LatentClassModel, ProbabilityTable

logger = logging.getLogger(__name__)

EMPTY_CLASS_TOL = 1e-8

# a fitted class: its table plus whatever parameters produced it
Component = Tuple[ProbabilityTable, Dict[str, Any]]


@dataclass(frozen=True)
class EmConfig:
    DEFAULT_MAX_EM_ITERATIONS = 10
    DEFAULT_LOGLIK_REL_TOL = 1e-6
    DEFAULT_RESTARTS = 10
    DEFAULT_SEED = 0

    classes: int = 1
    max_em_iterations: int = DEFAULT_MAX_EM_ITERATIONS
    loglik_rel_tol: float = DEFAULT_LOGLIK_REL_TOL
    restarts: int = DEFAULT_RESTARTS
    seed: int = DEFAULT_SEED
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if self.classes < 1:
            raise ValueError(f"Number of classes must be at least 1, got {self.classes}")
        if self.restarts < 1 or self.max_em_iterations < 0:
            raise ValueError("Need at least one restart and a nonnegative iteration cap")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EmConfig":
        values = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        if isinstance(values.get("solver"), dict):
            values["solver"] = SolverConfig.from_dict(values["solver"])
        return cls(**values)


def event_log_likelihoods(
    tensor: CountTensor, tables: Sequence[ProbabilityTable], include_coefficients: bool = False
) -> np.ndarray:
    """log f(E_k; X_s) for every category k and class s, shape (|K|, |S|)."""
    n = tensor.n.astype(float)
    q = tensor.q.astype(float)
    result = np.empty((tensor.num_categories, len(tables)))
    for s, table in enumerate(tables):
        x = table.values[:, :, None]
        if include_coefficients:
            result[:, s] = binom.logpmf(q, n, x).sum(axis=(0, 1))
        else:
            result[:, s] = (q * np.log(x) + (n - q) * np.log1p(-x)).sum(axis=(0, 1))
    return result


def log_event_likelihood(
    tensor: CountTensor, k: str, table: ProbabilityTable, include_coefficients: bool = False
) -> float:
    position = tensor.category_index(k)
    return float(event_log_likelihoods(tensor, [table], include_coefficients)[position, 0])


def posterior_memberships(
    tensor: CountTensor, pi: np.ndarray, tables: Sequence[ProbabilityTable], include_coefficients: bool = False
) -> np.ndarray:
    with np.errstate(divide="ignore"):
        weighted = np.log(np.asarray(pi, dtype=float))[None, :] + event_log_likelihoods(
            tensor, tables, include_coefficients
        )
    return np.exp(weighted - logsumexp(weighted, axis=1, keepdims=True))


def update_class_sizes(memberships: np.ndarray) -> np.ndarray:
    memberships = np.asarray(memberships, dtype=float)
    return memberships.sum(axis=0) / memberships.shape[0]


def empty_classes(memberships: np.ndarray) -> List[int]:
    column_sums = np.asarray(memberships).sum(axis=0)
    return [int(s) for s in np.flatnonzero(column_sums < EMPTY_CLASS_TOL * memberships.shape[0])]


def observed_log_likelihood(tensor: CountTensor, pi: np.ndarray, tables: Sequence[ProbabilityTable]) -> float:
    with np.errstate(divide="ignore"):
        weighted = np.log(np.asarray(pi, dtype=float))[None, :] + event_log_likelihoods(tensor, tables)
    return float(logsumexp(weighted, axis=1).sum())


def complete_log_likelihood(
    tensor: CountTensor, pi: np.ndarray, tables: Sequence[ProbabilityTable], memberships: np.ndarray
) -> float:
    with np.errstate(divide="ignore"):
        log_pi = np.log(np.asarray(pi, dtype=float))
    terms = memberships * (event_log_likelihoods(tensor, tables) + log_pi[None, :])
    return float(np.sum(np.where(memberships > 0, terms, 0.0)))


class ComponentFitter:
    """Fits one class from its membership-weighted cell counts (the M-step subproblem)."""

    kind = "component"

    def fit(self, counts: WeightedCellCounts, previous: Optional[Component] = None) -> Component:
        raise NotImplementedError


class MccFitter(ComponentFitter):

    kind = "lcmcc"

    def __init__(self, solver: SolverConfig):
        self.solver = solver

    def fit(self, counts: WeightedCellCounts, previous: Optional[Component] = None) -> Component:
        table = fit_mcc(counts, self.solver)
        # generalized EM: never accept a table that is worse than the one it replaces
        if previous is not None and objective_value(previous[0], counts) > objective_value(table, counts):
            return previous
        return table, {}


def _fit_components(
    tensor: CountTensor,
    memberships: np.ndarray,
    fitter: ComponentFitter,
    previous: Optional[Sequence[Component]] = None,
    executor: Optional[Executor] = None,
) -> List[Component]:
    jobs = [
        (weighted_counts(tensor, memberships[:, s]), previous[s] if previous is not None else None)
        for s in range(memberships.shape[1])
    ]
    if executor is None:
        return [fitter.fit(counts, prior) for counts, prior in jobs]
    return list(executor.map(lambda job: fitter.fit(*job), jobs))


def m_step_tables(
    tensor: CountTensor,
    memberships: np.ndarray,
    config: SolverConfig,
    previous: Optional[Sequence[ProbabilityTable]] = None,
    executor: Optional[Executor] = None,
) -> List[ProbabilityTable]:
    prior = [(table, {}) for table in previous] if previous is not None else None
    return [table for table, _ in _fit_components(tensor, memberships, MccFitter(config), prior, executor)]


@dataclass
class ChainResult:
    index: int
    pi: Optional[np.ndarray] = None
    components: List[Component] = field(default_factory=list)
    observed_trace: List[float] = field(default_factory=list)
    complete_trace: List[float] = field(default_factory=list)
    iterations: int = 0
    degenerate: bool = False
    error: Optional[str] = None

    @property
    def tables(self) -> List[ProbabilityTable]:
        return [table for table, _ in self.components]

    @property
    def final_log_likelihood(self) -> float:
        return self.observed_trace[-1] if self.observed_trace else -np.inf

    def summary(self) -> Dict[str, Any]:
        return {
            "index": self.index,
            "observed_log_likelihood": self.observed_trace,
            "complete_log_likelihood": self.complete_trace,
            "iterations": self.iterations,
            "degenerate": self.degenerate,
            "error": self.error,
        }


def run_chain(
    tensor: CountTensor, config: EmConfig, fitter: ComponentFitter, seed: np.random.SeedSequence, index: int
) -> ChainResult:
    """One EM chain: random memberships, M-step first, then alternate E and M steps."""
    chain = ChainResult(index=index)
    rng = np.random.default_rng(seed)
    memberships = rng.dirichlet(np.ones(config.classes), size=tensor.num_categories)

    try:
        components: Optional[List[Component]] = None
        for iteration in range(config.max_em_iterations + 1):
            if iteration > 0:
                memberships = posterior_memberships(tensor, chain.pi, chain.tables)

            if empty_classes(memberships):
                logger.warning(f"Chain {index}: classes {empty_classes(memberships)} emptied at iteration {iteration}")
                chain.degenerate = True
                break

            chain.pi = update_class_sizes(memberships)
            components = _fit_components(tensor, memberships, fitter, components)
            chain.components = components
            chain.iterations = iteration

            previous = chain.final_log_likelihood
            current = observed_log_likelihood(tensor, chain.pi, chain.tables)
            chain.observed_trace.append(current)
            chain.complete_trace.append(complete_log_likelihood(tensor, chain.pi, chain.tables, memberships))
            logger.debug(f"Chain {index} iteration {iteration}: log-likelihood {current:.6f}")

            if iteration > 0 and current - previous < config.loglik_rel_tol * abs(previous):
                break
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError, ValueError) as ex:
        logger.warning(f"Chain {index} failed: {ex}")
        chain.error = str(ex)

    if chain.error is None and not chain.components:
        chain.error = "no M-step completed"
    return chain


def select_chain(chains: Sequence[ChainResult]) -> ChainResult:
    usable = [c for c in chains if c.error is None]
    if not usable:
        raise NumericalError(f"All {len(chains)} EM chains failed: {chains[0].error if chains else 'no chains'}")
    healthy = [c for c in usable if not c.degenerate]
    if not healthy:
        logger.warning("Every EM chain degenerated; keeping the best one anyway")
        healthy = usable
    return max(healthy, key=lambda c: (c.final_log_likelihood, -c.index))


def run_em(
    tensor: CountTensor,
    config: EmConfig,
    fitter: ComponentFitter,
    executor: Optional[Executor] = None,
) -> LatentClassModel:
    if tensor.num_categories < 1:
        raise ValueError("The tensor needs at least one category")
    if config.classes >= tensor.num_categories and config.classes > 1:
        logger.warning(f"{config.classes} classes for {tensor.num_categories} categories; expect empty classes")

    seeds = np.random.SeedSequence(config.seed).spawn(config.restarts)
    logger.info(f"Running {config.restarts} {fitter.kind} EM chains with {config.classes} classes")
    quiet = not logger.isEnabledFor(logging.INFO)
    if executor is None:
        jobs = (run_chain(tensor, config, fitter, seed, index) for index, seed in enumerate(seeds))
    else:
        jobs = executor.map(lambda item: run_chain(tensor, config, fitter, item[1], item[0]), enumerate(seeds))
    chains = list(tqdm(jobs, total=len(seeds), desc="EM restarts", disable=quiet))

    best = select_chain(chains)
    logger.info(f"Selected chain {best.index} with log-likelihood {best.final_log_likelihood:.6f}")

    pi = best.pi
    if best.degenerate:
        pi = np.maximum(pi, np.finfo(float).tiny)
        pi = pi / pi.sum()
    memberships = posterior_memberships(tensor, pi, best.tables)
    model = LatentClassModel(
        kind=fitter.kind,
        grid=tensor.grid,
        categories=tensor.categories,
        epsilon=best.tables[0].epsilon,
        pi=pi,
        tables=best.tables,
        memberships=memberships,
        final_log_likelihood=best.final_log_likelihood,
        class_metadata=tuple(metadata for _, metadata in best.components),
        recency_feature=tensor.recency_feature,
        frequency_feature=tensor.frequency_feature,
        diagnostics={
            "chosen_restart": best.index,
            "degenerate": best.degenerate,
            "chains": [c.summary() for c in chains],
        },
        config=config.to_dict(),
    )
    return model.canonical()


def em_fit(tensor: CountTensor, config: EmConfig, executor: Optional[Executor] = None) -> LatentClassModel:
    return run_em(tensor, config, MccFitter(config.solver), executor)


def em_round(tensor: CountTensor, model: LatentClassModel, config: EmConfig) -> LatentClassModel:
    """One E-step and M-step starting from a fitted MCC mixture."""
    memberships = posterior_memberships(tensor, model.pi, model.tables)
    pi = update_class_sizes(memberships)
    tables = m_step_tables(tensor, memberships, config.solver)
    return LatentClassModel(
        kind=model.kind,
        grid=model.grid,
        categories=model.categories,
        epsilon=model.epsilon,
        pi=pi,
        tables=tables,
        memberships=posterior_memberships(tensor, pi, tables),
        final_log_likelihood=observed_log_likelihood(tensor, pi, tables),
        recency_feature=model.recency_feature,
        frequency_feature=model.frequency_feature,
        config=model.config,
    )


def fit_pooled(tensor: CountTensor, mode: str, solver: SolverConfig) -> LatentClassModel:
    """MCC(1) or the monotone model: one table for every category."""
    counts = collapse(tensor)
    table = fit_table(counts, mode, solver)
    logger.info(f"Fitted pooled {mode} table on {counts.total:.0f} samples")
    return LatentClassModel(
        kind="mono" if mode == SHAPE_MONOTONE else "mcc",
        grid=tensor.grid,
        categories=tensor.categories,
        epsilon=solver.epsilon,
        pi=np.ones(1),
        tables=(table,),
        memberships=np.ones((tensor.num_categories, 1)),
        final_log_likelihood=objective_value(table, counts),
        recency_feature=tensor.recency_feature,
        frequency_feature=tensor.frequency_feature,
        config={"solver": solver.to_dict()},
    )


def fit_per_category(
    tensor: CountTensor, solver: SolverConfig, executor: Optional[Executor] = None
) -> LatentClassModel:
    """MCC(|K|): a separate MCC table for each category."""
    identity = np.eye(tensor.num_categories)
    fitter = MccFitter(solver)
    components = _fit_components(tensor, identity, fitter, executor=executor)
    tables = [table for table, _ in components]
    total = sum(objective_value(tables[k], weighted_counts(tensor, identity[:, k])) for k in range(len(tables)))
    logger.info(f"Fitted {len(tables)} per-category MCC tables")
    model = LatentClassModel(
        kind="mcc-k",
        grid=tensor.grid,
        categories=tensor.categories,
        epsilon=solver.epsilon,
        pi=np.full(len(tables), 1.0 / len(tables)),
        tables=tables,
        memberships=identity,
        final_log_likelihood=total,
        recency_feature=tensor.recency_feature,
        frequency_feature=tensor.frequency_feature,
        config={"solver": solver.to_dict()},
    )
    return model.canonical()
