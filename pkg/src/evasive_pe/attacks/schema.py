from typing import Optional

import numpy as np
from pydantic import PositiveInt, root_validator, validator
from typing_extensions import Literal, TypeAlias

from ..pe_format import ByteSample, E_LFANEW_OFFSET, DOS_MAGIC
from ..types import BaseModel

AttackName: TypeAlias = Literal["padding", "dos", "gamma"]

DOS_MASK_SIZE = E_LFANEW_OFFSET - len(DOS_MAGIC)


def _check_threshold(v: float) -> float:
    if not 0.0 < v < 1.0:
        raise ValueError("success_threshold must lie in (0, 1)")
    return v


class AttackConfig(BaseModel):
    max_iterations: PositiveInt = 150
    padding_budget: PositiveInt = 2048
    success_threshold: float = 0.5
    grad_epsilon: float = 1e-12
    seed: int = 0
    # restrict the DOS attack to the top-k integrated-gradients offsets
    ig_top_k: Optional[PositiveInt] = None
    ig_steps: PositiveInt = 128

    _threshold = validator("success_threshold", allow_reuse=True)(_check_threshold)

    @validator("ig_top_k")
    def _top_k_fits_mask(cls, v: Optional[int]) -> Optional[int]:
        if v is not None and v > DOS_MASK_SIZE:
            raise ValueError(f"ig_top_k cannot exceed the {DOS_MASK_SIZE}-byte DOS mask")
        return v


class GammaConfig(BaseModel):
    mode: Literal["padding", "section_injection"] = "padding"
    population: PositiveInt = 10
    query_budget: PositiveInt = 510
    penalty_lambda: float = 1e-6
    mutation_sigma: float = 0.1
    mutation_rate: float = 0.3
    elite: int = 2
    tournament_size: PositiveInt = 3
    seed: int = 0
    success_threshold: float = 0.5

    _threshold = validator("success_threshold", allow_reuse=True)(_check_threshold)

    @validator("penalty_lambda", "mutation_sigma")
    def _non_negative(cls, v: float) -> float:
        if v < 0:
            raise ValueError("must be non-negative")
        return v

    @validator("mutation_rate")
    def _probability(cls, v: float) -> float:
        if not 0.0 <= v <= 1.0:
            raise ValueError("mutation_rate must lie in [0, 1]")
        return v

    @root_validator(skip_on_failure=True)
    def _budget_covers_population(cls, values: dict) -> dict:
        if values["population"] < 2:
            raise ValueError("population must be at least 2")
        if values["query_budget"] < values["population"]:
            raise ValueError("query_budget must cover at least one generation")
        if not 0 <= values["elite"] < values["population"]:
            raise ValueError("elite must be smaller than population")
        return values


class AttackOutcome(BaseModel):
    sample_id: str
    sha256: str
    attack_name: AttackName
    seed: int = 0
    evaded: bool
    initial_score: float
    final_score: float
    iterations: int
    n_phi: int
    queries: int
    wall_ms: float
    # running minimum of every score the attack queried
    score_trajectory: list[float]
    fitness_history: list[float] = []
    output: Optional[ByteSample] = None

    @property
    def saturated(self) -> bool:
        return self.initial_score >= 1.0


def best_so_far(raw_scores: list[float]) -> list[float]:
    if not raw_scores:
        return []
    return np.minimum.accumulate(np.asarray(raw_scores, dtype=np.float64)).tolist()


def already_evasive(
    sample: ByteSample,
    attack_name: AttackName,
    initial_score: float,
    queries: int,
    seed: int,
    wall_ms: float,
) -> AttackOutcome:
    return AttackOutcome(
        sample_id=sample.name,
        sha256=sample.id,
        attack_name=attack_name,
        seed=seed,
        evaded=True,
        initial_score=initial_score,
        final_score=initial_score,
        iterations=0,
        n_phi=0,
        queries=queries,
        wall_ms=wall_ms,
        score_trajectory=best_so_far([initial_score] * queries),
        output=sample,
    )
