from .corpus import CorpusProfile, extract_cohort, generate_corpus, load_manifest
from .ingest import IngestReport, ingest
from .report import (
    CSV_COLUMNS,
    CsvRow,
    ExperimentSummary,
    evasion_rate,
    format_summary,
    summarize,
    write_csv,
)
from .experiment import (
    BatchResult,
    ExperimentConfig,
    ExperimentResult,
    RankingReport,
    run_batch,
    run_batch_async,
    run_experiment,
    run_experiment_async,
)
