from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

from ..classes.errors import HarnessError
from ..classes.logger import Logger
from ..pe_format import ByteSample, structural_validity


@dataclass
class IngestedFile:
    sample: ByteSample
    is_pe: bool


@dataclass
class IngestReport:
    # every considered file, in ingestion order
    entries: list[IngestedFile] = field(default_factory=list)

    @property
    def considered(self) -> int:
        return len(self.entries)

    @property
    def filtered_non_pe(self) -> int:
        return sum(1 for entry in self.entries if not entry.is_pe)


def ingest(
    samples_dir: Union[str, Path],
    max_samples: int,
    logger: Optional[Logger] = None,
) -> tuple[list[ByteSample], IngestReport]:
    """
    Reads the first max_samples regular files of samples_dir in lexicographic
    name order and keeps the structurally valid PEs. The rest are counted,
    not raised.
    """
    if logger is None:
        logger = Logger(prefix="ingest")
    if max_samples < 1:
        raise ValueError("max_samples must be at least 1")

    root = Path(samples_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"No such directory: {root}")

    files = sorted((p for p in root.iterdir() if p.is_file()), key=lambda p: p.name)
    if not files:
        raise HarnessError("EMPTY_DIRECTORY", f"{root} contains no files")

    report = IngestReport()
    for path in files[:max_samples]:
        sample = ByteSample.read(path)
        is_pe = structural_validity(sample)
        if not is_pe:
            logger.debug(f"Skipping {path.name}: not a structurally valid PE")
        report.entries.append(IngestedFile(sample=sample, is_pe=is_pe))

    samples = [entry.sample for entry in report.entries if entry.is_pe]
    logger.info(
        f"Ingested {len(samples)} of {report.considered} files from {root} ({report.filtered_non_pe} not PE)"
    )
    return samples, report
