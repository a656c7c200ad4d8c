"""
Per-sample CSV rows and the cohort summary derived from them. The live
summary and the one recomputed from a CSV go through the same DataFrame code,
so they agree exactly.
"""
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import pandas as pd
from pydantic import root_validator, validator

from ..attacks.schema import AttackOutcome
from ..classes.errors import HarnessError
from ..pe_format import ByteSample
from ..types import BaseModel

CSV_COLUMNS = [
    "sample_id",
    "sha256",
    "attack",
    "seed",
    "orig_score",
    "final_score",
    "evaded",
    "iterations",
    "n_phi",
    "queries",
    "wall_ms",
]

NON_PE = "non_pe"
ALREADY_EVASIVE = "already_evasive"
SKIPPED = (NON_PE, ALREADY_EVASIVE)

SATURATED_SCORE = 1.0

PathLike = Union[str, Path]


class CsvRow(BaseModel):
    sample_id: str
    sha256: str
    attack: str
    seed: int = 0
    orig_score: Optional[float] = None
    final_score: Optional[float] = None
    evaded: bool = False
    iterations: int = 0
    n_phi: int = 0
    queries: int = 0
    wall_ms: float = 0.0

    @classmethod
    def from_outcome(cls, outcome: AttackOutcome) -> "CsvRow":
        return cls(
            sample_id=outcome.sample_id,
            sha256=outcome.sha256,
            attack=outcome.attack_name,
            seed=outcome.seed,
            orig_score=outcome.initial_score,
            final_score=outcome.final_score,
            evaded=outcome.evaded,
            iterations=outcome.iterations,
            n_phi=outcome.n_phi,
            queries=outcome.queries,
            wall_ms=outcome.wall_ms,
        )

    @classmethod
    def non_pe(cls, sample: ByteSample) -> "CsvRow":
        return cls(sample_id=sample.name, sha256=sample.id, attack=NON_PE)

    @classmethod
    def already_evasive(
        cls, sample: ByteSample, initial_score: float, seed: int
    ) -> "CsvRow":
        return cls(
            sample_id=sample.name,
            sha256=sample.id,
            attack=ALREADY_EVASIVE,
            seed=seed,
            orig_score=initial_score,
            final_score=initial_score,
            evaded=True,
            queries=1,
        )


class ExperimentSummary(BaseModel):
    attack: Optional[str] = None
    total_ingested: int
    filtered_non_pe: int
    already_evasive: int
    # attacked samples scored at 1.0, attacked anyway and tracked apart
    saturated_confidence: int
    saturated_evaded: int
    attacked: int
    evaded: int
    evasion_rate: Optional[float] = None
    saturated_evasion_rate: Optional[float] = None
    mean_iterations: Optional[float] = None
    median_iterations: Optional[float] = None
    mean_n_phi: Optional[float] = None
    median_n_phi: Optional[float] = None
    mean_wall_ms: Optional[float] = None
    median_wall_ms: Optional[float] = None

    @validator("evasion_rate", "saturated_evasion_rate")
    def _rate(cls, v: Optional[float]) -> Optional[float]:
        if v is not None and not 0.0 <= v <= 1.0:
            raise ValueError("rates must lie in [0, 1]")
        return v

    @root_validator(skip_on_failure=True)
    def _cohorts_add_up(cls, values: dict) -> dict:
        expected = (
            values["total_ingested"]
            - values["filtered_non_pe"]
            - values["already_evasive"]
        )
        if values["attacked"] != expected:
            raise ValueError(
                f"attacked={values['attacked']} but cohorts leave {expected}"
            )
        if values["evaded"] > values["attacked"]:
            raise ValueError("evaded cannot exceed attacked")
        if values["saturated_evaded"] > values["saturated_confidence"]:
            raise ValueError("saturated_evaded cannot exceed saturated_confidence")
        return values

    def non_timing(self) -> dict:
        return self.dict(exclude={"mean_wall_ms", "median_wall_ms"})


def evasion_rate(outcomes: Sequence[Union[AttackOutcome, bool]]) -> float:
    """Fraction of attacked samples that evaded."""
    if len(outcomes) == 0:
        raise HarnessError("NO_SAMPLES", "Evasion rate of zero attacked samples")

    evaded = [o.evaded if isinstance(o, AttackOutcome) else bool(o) for o in outcomes]
    return sum(evaded) / len(evaded)


def rows_frame(rows: Sequence[Union[CsvRow, AttackOutcome]]) -> pd.DataFrame:
    records = [
        (row if isinstance(row, CsvRow) else CsvRow.from_outcome(row)).dict()
        for row in rows
    ]
    frame = pd.DataFrame.from_records(records, columns=CSV_COLUMNS)
    frame["evaded"] = frame["evaded"].astype(int)
    for column in ("orig_score", "final_score", "wall_ms"):
        frame[column] = frame[column].astype(np.float64)
    return frame


def write_csv(rows: Sequence[Union[CsvRow, AttackOutcome]], path: PathLike):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    rows_frame(rows).to_csv(path, index=False, encoding="utf-8")


def read_csv(path: PathLike) -> pd.DataFrame:
    try:
        frame = pd.read_csv(
            path,
            dtype={"sample_id": str, "sha256": str, "attack": str},
            float_precision="round_trip",
        )
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as err:
        raise HarnessError("MALFORMED_CSV", f"Cannot parse {path}: {err}") from err

    if list(frame.columns) != CSV_COLUMNS:
        raise HarnessError(
            "MALFORMED_CSV", f"{path} has columns {list(frame.columns)}, expected {CSV_COLUMNS}"
        )
    if not frame["evaded"].isin([0, 1]).all():
        raise HarnessError("MALFORMED_CSV", f"{path} has evaded values outside {{0, 1}}")
    return frame


def _stat(series: pd.Series, fn) -> Optional[float]:
    if series.empty:
        return None
    return float(fn(series.to_numpy(dtype=np.float64)))


def summarize_frame(frame: pd.DataFrame) -> ExperimentSummary:
    attacked = frame[~frame["attack"].isin(SKIPPED)]
    saturated = attacked[attacked["orig_score"] >= SATURATED_SCORE]
    attack_names = sorted(set(attacked["attack"]))

    evaded = attacked["evaded"].astype(bool).tolist()
    saturated_evaded = saturated["evaded"].astype(bool).tolist()

    return ExperimentSummary(
        attack=attack_names[0] if len(attack_names) == 1 else None,
        total_ingested=len(frame),
        filtered_non_pe=int((frame["attack"] == NON_PE).sum()),
        already_evasive=int((frame["attack"] == ALREADY_EVASIVE).sum()),
        saturated_confidence=len(saturated),
        saturated_evaded=sum(saturated_evaded),
        attacked=len(attacked),
        evaded=sum(evaded),
        evasion_rate=evasion_rate(evaded) if evaded else None,
        saturated_evasion_rate=(
            evasion_rate(saturated_evaded) if saturated_evaded else None
        ),
        mean_iterations=_stat(attacked["iterations"], np.mean),
        median_iterations=_stat(attacked["iterations"], np.median),
        mean_n_phi=_stat(attacked["n_phi"], np.mean),
        median_n_phi=_stat(attacked["n_phi"], np.median),
        mean_wall_ms=_stat(attacked["wall_ms"], np.mean),
        median_wall_ms=_stat(attacked["wall_ms"], np.median),
    )


def summarize(csv_path: PathLike) -> ExperimentSummary:
    return summarize_frame(read_csv(csv_path))


def format_summary(summary: ExperimentSummary) -> list[tuple[str, object]]:
    """(metric, value) rows for Logger.table."""
    return [
        ("attack", summary.attack),
        ("total ingested", summary.total_ingested),
        ("filtered (not PE)", summary.filtered_non_pe),
        ("already evasive", summary.already_evasive),
        ("attacked", summary.attacked),
        ("evaded", summary.evaded),
        ("evasion rate", summary.evasion_rate),
        ("saturated (score 1.0)", summary.saturated_confidence),
        ("saturated evaded", summary.saturated_evaded),
        ("saturated evasion rate", summary.saturated_evasion_rate),
        ("mean iterations", summary.mean_iterations),
        ("median iterations", summary.median_iterations),
        ("mean n_phi", summary.mean_n_phi),
        ("median n_phi", summary.median_n_phi),
        ("mean wall ms", summary.mean_wall_ms),
        ("median wall ms", summary.median_wall_ms),
    ]
