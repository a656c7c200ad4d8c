from .types import EvasivePeError
from .classes.errors import AttackError, HarnessError, ModelError, PeFormatError
from .classes.logger import Logger
from .pe_format import (
    ByteSample,
    PeView,
    RegionMask,
    SectionEntry,
    append_overlay,
    byte_diff,
    dos_region_mask,
    extract_donor_sections,
    header_slots,
    inject_section,
    parse_pe,
    rebuild_pe,
    structural_validity,
)
from .malconv import (
    AttributionMap,
    ClassifierModel,
    ModelConfig,
    evaluate_model,
    grad_wrt_embeddings,
    integrated_gradients,
    load_model,
    save_model,
    score,
    score_many,
    train,
)
from .attacks import (
    AttackConfig,
    AttackOutcome,
    GammaConfig,
    ScoreOracle,
    dos_header_attack,
    gamma_attack,
    padding_attack,
)
from .harness import (
    ExperimentConfig,
    ExperimentSummary,
    evasion_rate,
    generate_corpus,
    ingest,
    run_batch,
    run_experiment,
    summarize,
    write_csv,
)
