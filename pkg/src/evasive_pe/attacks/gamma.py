"""
Black-box genetic search over how much of each benign donor section to
graft onto the sample. A chromosome holds one fraction per donor; fitness is
the classifier score plus a per-byte penalty on the grafted payload.
"""
import threading
from dataclasses import dataclass
from time import perf_counter_ns
from typing import Callable, Optional, Sequence

import numpy as np
from typing_extensions import Literal, TypeAlias

from ..classes.errors import AttackError, PeFormatError
from ..classes.logger import Logger
from ..malconv import ClassifierModel, score
from ..pe_format import (
    ByteSample,
    append_overlay,
    header_slots,
    inject_section,
    parse_pe,
    structural_validity,
)
from ..util import elapsed_ms
from .schema import AttackOutcome, GammaConfig, already_evasive, best_so_far

GammaMode: TypeAlias = Literal["padding", "section_injection"]
Chromosome: TypeAlias = np.ndarray


class ScoreOracle:
    """
    The only view of the classifier a black-box attack gets: bytes in,
    probability out. Every answer is counted.
    """

    _scorer: Callable[[ByteSample], float]
    _queries: int
    _lock: threading.Lock

    def __init__(self, scorer: Callable[[ByteSample], float]):
        self._scorer = scorer
        self._queries = 0
        self._lock = threading.Lock()

    @classmethod
    def from_model(cls, model: ClassifierModel) -> "ScoreOracle":
        return cls(lambda sample: score(model, sample))

    @property
    def queries(self) -> int:
        return self._queries

    def __call__(self, sample: ByteSample) -> float:
        value = float(self._scorer(sample))
        with self._lock:
            self._queries += 1
        return value


@dataclass
class _Evaluation:
    chromosome: Chromosome
    fitness: float
    score: float
    injected: int
    candidate: ByteSample


def apply_chromosome(
    sample: ByteSample,
    donors: Sequence[bytes],
    s: Chromosome,
    mode: GammaMode,
) -> tuple[ByteSample, int]:
    genes = np.asarray(s, dtype=np.float64)
    if genes.shape != (len(donors),):
        raise ValueError(f"Chromosome has {genes.size} genes for {len(donors)} donors")
    if np.any(genes < 0.0) or np.any(genes > 1.0):
        raise ValueError("Genes must lie in [0, 1]")

    fragments = [
        donor[: int(np.floor(gene * len(donor)))]
        for gene, donor in zip(genes.tolist(), donors)
    ]
    injected = sum(len(fragment) for fragment in fragments)
    if injected == 0:
        return sample, 0

    if mode == "padding":
        return append_overlay(sample, b"".join(fragments)), injected

    modified = sample
    for fragment in fragments:
        if fragment:
            modified = inject_section(modified, fragment)
    return modified, injected


def _evaluate(
    oracle: ScoreOracle,
    sample: ByteSample,
    donors: Sequence[bytes],
    s: Chromosome,
    config: GammaConfig,
) -> _Evaluation:
    if oracle.queries >= config.query_budget:
        raise AttackError(
            "BUDGET_EXHAUSTED", f"Query budget of {config.query_budget} exhausted"
        )

    candidate, injected = apply_chromosome(sample, donors, s, config.mode)
    value = oracle(candidate)

    return _Evaluation(
        chromosome=np.asarray(s, dtype=np.float64),
        fitness=value + config.penalty_lambda * injected,
        score=value,
        injected=injected,
        candidate=candidate,
    )


def fitness(
    oracle: ScoreOracle,
    sample: ByteSample,
    donors: Sequence[bytes],
    s: Chromosome,
    config: GammaConfig,
) -> float:
    """Score plus payload penalty; lower is better. Costs one query."""
    return _evaluate(oracle, sample, donors, s, config).fitness


def _tournament(
    rng: np.random.Generator, fitnesses: np.ndarray, size: int
) -> int:
    contenders = rng.integers(0, len(fitnesses), size)
    return int(contenders[np.argmin(fitnesses[contenders])])


def _next_generation(
    rng: np.random.Generator,
    evaluations: Sequence[_Evaluation],
    config: GammaConfig,
) -> tuple[np.ndarray, list[_Evaluation]]:
    """
    Elites lead the next population and keep their evaluations, so only the
    rows after them cost queries.
    """
    population = np.vstack([e.chromosome for e in evaluations])
    fitnesses = np.asarray([e.fitness for e in evaluations])
    genes = population.shape[1]

    order = np.argsort(fitnesses, kind="stable")
    elites = [evaluations[i] for i in order[: config.elite]]
    children = [e.chromosome.copy() for e in elites]

    while len(children) < config.population:
        first = population[_tournament(rng, fitnesses, config.tournament_size)]
        second = population[_tournament(rng, fitnesses, config.tournament_size)]
        child = np.where(rng.random(genes) < 0.5, first, second)

        mutate = rng.random(genes) < config.mutation_rate
        child = child + mutate * rng.normal(0.0, config.mutation_sigma, genes)
        children.append(np.clip(child, 0.0, 1.0))

    return np.vstack(children), elites


def gamma_attack(
    oracle: ScoreOracle,
    sample: ByteSample,
    donors: Sequence[bytes],
    config: GammaConfig,
    initial_score: Optional[float] = None,
    logger: Optional[Logger] = None,
) -> AttackOutcome:
    """
    Runs whole generations while they fit in the oracle's query budget.
    Pass initial_score when the caller already scored the sample; otherwise
    one query is spent on it.
    """
    if logger is None:
        logger = Logger(prefix="gamma")
    start_ns = perf_counter_ns()

    view = parse_pe(sample)
    if len(donors) == 0:
        raise ValueError("GAMMA needs at least one donor payload")
    if config.mode == "section_injection" and header_slots(view) < len(donors):
        raise PeFormatError(
            "NO_HEADER_SLACK",
            f"{sample.name} has room for {header_slots(view)} new sections, {len(donors)} donors given",
        )

    raw_scores: list[float] = []
    if initial_score is None:
        initial_score = oracle(sample)
        raw_scores.append(initial_score)

    if initial_score < config.success_threshold:
        return already_evasive(
            sample,
            "gamma",
            initial_score,
            oracle.queries,
            config.seed,
            elapsed_ms(start_ns),
        )

    rng = np.random.default_rng(config.seed)
    population = rng.random((config.population, len(donors)))
    carried: list[_Evaluation] = []

    best: Optional[_Evaluation] = None
    winner: Optional[_Evaluation] = None
    fitness_history: list[float] = []
    generations = 0

    while oracle.queries + config.population - len(carried) <= config.query_budget:
        fresh = [
            _evaluate(oracle, sample, donors, chromosome, config)
            for chromosome in population[len(carried) :]
        ]
        evaluations = carried + fresh
        generations += 1
        raw_scores.extend(e.score for e in fresh)

        fitnesses = np.asarray([e.fitness for e in evaluations])
        generation_best = evaluations[int(np.argmin(fitnesses))]
        if best is None or generation_best.fitness < best.fitness:
            best = generation_best
        fitness_history.append(generation_best.fitness)

        logger.debug(
            f"generation {generations}: best fitness={generation_best.fitness:.6f} score={generation_best.score:.6f} queries={oracle.queries}"
        )

        evasive = [e for e in fresh if e.score < config.success_threshold]
        if evasive:
            winner = min(evasive, key=lambda e: e.fitness)
            break

        population, carried = _next_generation(rng, evaluations, config)

    chosen = winner if winner is not None else best
    if chosen is None:
        logger.warn(f"Budget of {config.query_budget} queries left no room for a generation")

    evaded = (
        winner is not None
        and structural_validity(winner.candidate)
        and winner.score < config.success_threshold
    )

    return AttackOutcome(
        sample_id=sample.name,
        sha256=sample.id,
        attack_name="gamma",
        seed=config.seed,
        evaded=evaded,
        initial_score=initial_score,
        final_score=chosen.score if chosen is not None else initial_score,
        iterations=generations,
        n_phi=chosen.injected if chosen is not None else 0,
        queries=oracle.queries,
        wall_ms=elapsed_ms(start_ns),
        score_trajectory=best_so_far(raw_scores),
        fitness_history=fitness_history,
        output=chosen.candidate if chosen is not None else None,
    )
