import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
from joblib import Parallel, delayed

from app.config import GaSettings
from app.errors import InitializationError

logger = logging.getLogger(__name__)

# Objective values at or below this are treated as failed evaluations
FAILURE_THRESHOLD = -1e299


@dataclass
class GaConfig:
    """Real-coded genetic algorithm settings."""
    population: int = 64
    generations: int = 200
    tournament: int = 3
    blend_alpha: float = 0.5
    mutation_sigma: float = 0.1
    mutation_decay: float = 0.99
    mutation_rate: float = 0.2
    elite: int = 2
    init_spread: float = 0.2
    n_jobs: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.population < 4:
            raise ValueError(f"population must be >= 4, got {self.population}")
        if self.generations < 1:
            raise ValueError(f"generations must be >= 1, got {self.generations}")
        if not 1 <= self.elite < self.population:
            raise ValueError(f"elite must be in [1, population), got {self.elite}")

    @classmethod
    def from_settings(cls, settings: GaSettings, seed: int, **overrides) -> "GaConfig":
        values = settings.model_dump()
        values.update(overrides)
        return cls(seed=seed, **values)


@dataclass
class GaResult:
    best: np.ndarray
    best_value: float
    trace: np.ndarray
    evaluations: int = 0
    population: List[np.ndarray] = field(default_factory=list)


def _clean(value: float) -> float:
    value = float(value)
    if not math.isfinite(value) or value <= FAILURE_THRESHOLD:
        return -math.inf
    return value


def _evaluate(objective: Callable[[np.ndarray], float], individuals: Sequence[np.ndarray], n_jobs: int) -> np.ndarray:
    if n_jobs == 1:
        values = [objective(x) for x in individuals]
    else:
        values = Parallel(n_jobs=n_jobs)(delayed(objective)(x) for x in individuals)
    return np.array([_clean(v) for v in values])


def _tournament(values: np.ndarray, size: int, rng: np.random.Generator) -> int:
    contenders = rng.integers(0, values.shape[0], size=size)
    return int(contenders[np.argmax(values[contenders])])


def _blend(a: np.ndarray, b: np.ndarray, alpha: float, rng: np.random.Generator) -> np.ndarray:
    low, high = np.minimum(a, b), np.maximum(a, b)
    span = high - low
    return rng.uniform(low - alpha * span, high + alpha * span)


def genetic_optimize(
    objective: Callable[[np.ndarray], float],
    init_center: np.ndarray,
    cfg: GaConfig,
    scale: Optional[np.ndarray] = None,
    seeds: Sequence[np.ndarray] = (),
) -> GaResult:
    """
    Maximize ``objective`` with a real-coded genetic algorithm.

    The initial population holds the center itself, any extra ``seeds``, and
    uniform perturbations of the center by +/- init_spread * scale. Randomness
    for individual ``i`` of generation ``g`` comes from the stream (seed, g, i),
    so serial and parallel evaluation give identical results.

    Args:
        objective: Function to maximize; non-finite values count as failures
        init_center: Center of the initial population
        cfg: Algorithm settings
        scale: Per-coordinate perturbation scale (default max(|center|, 1))
        seeds: Extra individuals inserted into the initial population

    Returns:
        GaResult with the best individual, its value and the per-generation best trace
    """
    center = np.asarray(init_center, dtype=float).ravel()
    dim = center.shape[0]
    scale = np.maximum(np.abs(center), 1.0) if scale is None else np.broadcast_to(np.asarray(scale, float), (dim,))

    population = [center.copy()] + [np.asarray(s, dtype=float).ravel().copy() for s in seeds][: cfg.population - 1]
    for idx in range(len(population), cfg.population):
        rng = np.random.default_rng([cfg.seed, 0, idx])
        population.append(center + rng.uniform(-cfg.init_spread, cfg.init_spread, dim) * scale)

    values = _evaluate(objective, population, cfg.n_jobs)
    evaluations = len(population)
    if not np.any(np.isfinite(values)):
        raise InitializationError("objective failed for every member of the initial population")

    best_idx = int(np.argmax(values))
    best, best_value = population[best_idx].copy(), float(values[best_idx])
    trace = [best_value]

    for gen in range(1, cfg.generations + 1):
        order = np.argsort(-values, kind="stable")
        elites = [population[i] for i in order[: cfg.elite]]
        elite_values = values[order[: cfg.elite]]
        sigma = cfg.mutation_sigma * cfg.mutation_decay ** gen

        children = []
        for idx in range(cfg.population - cfg.elite):
            rng = np.random.default_rng([cfg.seed, gen, idx])
            mother = population[_tournament(values, cfg.tournament, rng)]
            father = population[_tournament(values, cfg.tournament, rng)]
            child = _blend(mother, father, cfg.blend_alpha, rng)
            mutate = rng.random(dim) < cfg.mutation_rate
            child = child + mutate * rng.normal(0.0, 1.0, dim) * sigma * scale
            children.append(child)

        child_values = _evaluate(objective, children, cfg.n_jobs)
        evaluations += len(children)

        population = elites + children
        values = np.concatenate([elite_values, child_values])

        gen_best = int(np.argmax(values))
        if values[gen_best] > best_value:
            best, best_value = population[gen_best].copy(), float(values[gen_best])
        trace.append(best_value)

    logger.debug("GA finished: %d evaluations, best %.6g", evaluations, best_value)
    return GaResult(best=best, best_value=best_value, trace=np.array(trace), evaluations=evaluations, population=population)
