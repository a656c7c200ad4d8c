import tempfile
from pathlib import Path

from evasive_pe import ByteSample, ClassifierModel, Logger, ModelConfig, train
from evasive_pe.attacks import GammaConfig, ScoreOracle, gamma_attack
from evasive_pe.harness import generate_corpus, load_manifest
from evasive_pe.pe_format import byte_diff, extract_donor_sections, parse_pe

logger = Logger(log_level="debug", prefix="demo")

corpus_dir = Path(tempfile.mkdtemp(prefix="evasive-pe-gamma-")) / "corpus"
generate_corpus(corpus_dir, 200, "overlay_signal", seed=1, logger=logger)
corpus = load_manifest(corpus_dir)

model, _ = train(
    ClassifierModel.initialize(ModelConfig(), seed=1),
    corpus,
    epochs=10,
    lr=0.1,
    seed=1,
    logger=logger,
)

benign = [sample for sample, label in corpus if label == 0]
malware: ByteSample = next(sample for sample, label in corpus if label == 1)
donors = extract_donor_sections(benign, 4)

outcome = gamma_attack(
    ScoreOracle.from_model(model),
    malware,
    donors,
    GammaConfig(mode="section_injection", seed=1),
    logger=logger,
)

logger.prod(
    f"{outcome.sample_id}: {outcome.initial_score:.4f} -> {outcome.final_score:.4f}",
    f"evaded={outcome.evaded} queries={outcome.queries} injected={outcome.n_phi} bytes",
)
if outcome.output is not None:
    view = parse_pe(outcome.output)
    logger.prod(f"sections now: {[s.display_name for s in view.section_table]}")
    logger.prod(f"{len(byte_diff(malware, outcome.output))} bytes differ from the original")
