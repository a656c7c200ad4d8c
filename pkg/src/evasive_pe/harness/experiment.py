import asyncio
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

from pydantic import DirectoryPath, FilePath, PositiveInt, root_validator, validator

from ..attacks.gamma import ScoreOracle, gamma_attack
from ..attacks.schema import AttackConfig, AttackName, AttackOutcome, GammaConfig
from ..attacks.whitebox import dos_header_attack, padding_attack
from ..classes.errors import HarnessError
from ..classes.logger import Logger
from ..malconv import ClassifierModel, read_model, score_many
from ..pe_format import ByteSample, extract_donor_sections
from ..types import BaseModel
from ..util import derive_seed
from .ingest import ingest
from .report import CsvRow, ExperimentSummary, summarize_frame, rows_frame, write_csv

ADVERSARIAL_SUFFIX = ".adv"


class ExperimentConfig(BaseModel):
    attack: AttackName
    model_path: FilePath
    samples_dir: DirectoryPath
    max_samples: PositiveInt
    save_dir: Path
    csv_path: Path
    seed: int = 0
    threshold: float = 0.5
    workers: PositiveInt = 1
    donors_dir: Optional[DirectoryPath] = None
    donor_sections: PositiveInt = 4
    max_donor_files: PositiveInt = 64
    whitebox: AttackConfig = AttackConfig()
    gamma: GammaConfig = GammaConfig()

    @validator("threshold")
    def _threshold(cls, v: float) -> float:
        if not 0.0 < v < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        return v

    @root_validator(skip_on_failure=True)
    def _gamma_needs_donors(cls, values: dict) -> dict:
        if values["attack"] == "gamma" and values.get("donors_dir") is None:
            raise ValueError("the gamma attack needs donors_dir")
        return values


@dataclass
class ExperimentResult:
    summary: ExperimentSummary
    outcomes: list[AttackOutcome]
    rows: list[CsvRow]


def _attack_one(
    config: ExperimentConfig,
    model: ClassifierModel,
    sample: ByteSample,
    initial_score: float,
    donors: Optional[list[bytes]],
    logger: Logger,
) -> AttackOutcome:
    seed = derive_seed(config.seed, sample.id)
    try:
        if config.attack == "gamma":
            assert donors is not None
            gamma_config = config.gamma.evolve(seed=seed, success_threshold=config.threshold)
            return gamma_attack(
                ScoreOracle.from_model(model),
                sample,
                donors,
                gamma_config,
                initial_score=initial_score,
                logger=logger,
            )

        whitebox_config = config.whitebox.evolve(
            seed=seed, success_threshold=config.threshold
        )
        if config.attack == "padding":
            return padding_attack(model, sample, whitebox_config, logger=logger)
        return dos_header_attack(model, sample, whitebox_config, logger=logger)
    except Exception as err:
        raise HarnessError(
            "SAMPLE_FAILED", f"{config.attack} attack failed on {sample.name}: {err}"
        ) from err


def _load_donors(config: ExperimentConfig, logger: Logger) -> Optional[list[bytes]]:
    if config.attack != "gamma" or config.donors_dir is None:
        return None

    benign, _ = ingest(config.donors_dir, config.max_donor_files, logger=logger)
    donors = extract_donor_sections(benign, config.donor_sections)
    logger.info(
        f"Harvested {len(donors)} donor sections ({sum(map(len, donors))} bytes) from {config.donors_dir}"
    )
    return donors


async def run_experiment_async(
    config: ExperimentConfig,
    logger: Optional[Logger] = None,
) -> ExperimentResult:
    if logger is None:
        logger = Logger(prefix="experiment")

    model = read_model(config.model_path, threshold=config.threshold)
    samples, report = ingest(config.samples_dir, config.max_samples, logger=logger)
    donors = _load_donors(config, logger)
    config.save_dir.mkdir(parents=True, exist_ok=True)

    initial_scores = dict(
        zip((s.id for s in samples), score_many(model, samples).tolist())
    )

    # one slot per considered file, filled in ingestion order
    rows: list[Optional[CsvRow]] = []
    pending: list[tuple[int, ByteSample, float]] = []
    for index, entry in enumerate(report.entries):
        if not entry.is_pe:
            rows.append(CsvRow.non_pe(entry.sample))
            continue

        initial = initial_scores[entry.sample.id]
        if initial < config.threshold:
            logger.debug(f"{entry.sample.name} already evasive at {initial:.6f}")
            rows.append(
                CsvRow.already_evasive(
                    entry.sample, initial, derive_seed(config.seed, entry.sample.id)
                )
            )
            continue

        rows.append(None)
        pending.append((index, entry.sample, initial))

    logger.info(
        f"Attacking {len(pending)} samples with {config.attack} on {config.workers} workers"
    )

    loop = asyncio.get_running_loop()
    attack_logger = logger.child(config.attack)
    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        outcomes: list[AttackOutcome] = await asyncio.gather(
            *(
                loop.run_in_executor(
                    pool,
                    _attack_one,
                    config,
                    model,
                    sample,
                    initial,
                    donors,
                    attack_logger,
                )
                for _, sample, initial in pending
            )
        )

    for (index, _, _), outcome in zip(pending, outcomes):
        rows[index] = CsvRow.from_outcome(outcome)
        logger.info(
            f"{outcome.sample_id}: {outcome.initial_score:.6f} -> {outcome.final_score:.6f}",
            "evaded" if outcome.evaded else "not evaded",
            f"({outcome.iterations} iterations, n_phi={outcome.n_phi}, {outcome.queries} queries)",
        )
        if outcome.evaded and outcome.output is not None:
            outcome.output.write(config.save_dir / f"{outcome.sample_id}{ADVERSARIAL_SUFFIX}")

    complete = [row for row in rows if row is not None]
    write_csv(complete, config.csv_path)
    summary = summarize_frame(rows_frame(complete))
    logger.info(
        f"Wrote {len(complete)} rows to {config.csv_path}; evasion rate {summary.evasion_rate}"
    )

    return ExperimentResult(summary=summary, outcomes=outcomes, rows=complete)


def run_experiment(
    config: ExperimentConfig,
    logger: Optional[Logger] = None,
) -> ExperimentResult:
    return asyncio.run(run_experiment_async(config, logger))


class RankingReport(BaseModel):
    dos_evasion_rate: Optional[float] = None
    padding_evasion_rate: Optional[float] = None
    dos_median_n_phi: Optional[float] = None
    padding_median_n_phi: Optional[float] = None
    dos_rate_at_least_padding: bool
    dos_n_phi_at_most_padding: bool

    @property
    def passed(self) -> bool:
        return self.dos_rate_at_least_padding and self.dos_n_phi_at_most_padding

    @classmethod
    def compare(
        cls, dos: ExperimentSummary, padding: ExperimentSummary
    ) -> "RankingReport":
        def at_least(a: Optional[float], b: Optional[float]) -> bool:
            return a is not None and (b is None or a >= b)

        def at_most(a: Optional[float], b: Optional[float]) -> bool:
            return a is not None and (b is None or a <= b)

        return cls(
            dos_evasion_rate=dos.evasion_rate,
            padding_evasion_rate=padding.evasion_rate,
            dos_median_n_phi=dos.median_n_phi,
            padding_median_n_phi=padding.median_n_phi,
            dos_rate_at_least_padding=at_least(dos.evasion_rate, padding.evasion_rate),
            dos_n_phi_at_most_padding=at_most(dos.median_n_phi, padding.median_n_phi),
        )


@dataclass
class BatchResult:
    summaries: dict[str, ExperimentSummary]
    ranking: Optional[RankingReport]


async def run_batch_async(
    model_path: Union[str, Path],
    samples_dir: Union[str, Path],
    out_dir: Union[str, Path],
    max_samples: int,
    seed: int = 0,
    attacks: Sequence[AttackName] = ("padding", "dos", "gamma"),
    donors_dir: Optional[Union[str, Path]] = None,
    workers: int = 1,
    threshold: float = 0.5,
    logger: Optional[Logger] = None,
) -> BatchResult:
    """
    Runs each attack over the same samples and seed, one CSV per attack under
    out_dir, then compares DOS against padding when both ran.
    """
    if logger is None:
        logger = Logger(prefix="batch")

    root = Path(out_dir)
    summaries: dict[str, ExperimentSummary] = {}
    for attack in attacks:
        if attack == "gamma" and donors_dir is None:
            logger.warn("Skipping gamma: no donor directory given")
            continue

        config = ExperimentConfig(
            attack=attack,
            model_path=model_path,
            samples_dir=samples_dir,
            max_samples=max_samples,
            save_dir=root / attack,
            csv_path=root / f"{attack}.csv",
            seed=seed,
            threshold=threshold,
            workers=workers,
            donors_dir=donors_dir,
        )
        result = await run_experiment_async(config, logger.child(f"batch:{attack}"))
        summaries[attack] = result.summary

    ranking = None
    if "dos" in summaries and "padding" in summaries:
        ranking = RankingReport.compare(summaries["dos"], summaries["padding"])
        logger.info(f"DOS versus padding ranking {'holds' if ranking.passed else 'fails'}")

    return BatchResult(summaries=summaries, ranking=ranking)


def run_batch(*args, **kwargs) -> BatchResult:
    return asyncio.run(run_batch_async(*args, **kwargs))

