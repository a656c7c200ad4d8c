import asyncio, tempfile
from pathlib import Path

from evasive_pe import ClassifierModel, Logger, ModelConfig, train
from evasive_pe.harness import extract_cohort, format_summary, generate_corpus, load_manifest
from evasive_pe.harness.experiment import run_batch_async
from evasive_pe.malconv import evaluate_model, write_model

logger = Logger(log_level="info", prefix="demo")

workdir = Path(tempfile.mkdtemp(prefix="evasive-pe-demo-"))
corpus_dir = workdir / "corpus"

generate_corpus(corpus_dir, 400, "mixed", seed=0, logger=logger)
corpus = load_manifest(corpus_dir)

model, history = train(
    ClassifierModel.initialize(ModelConfig(), seed=0),
    corpus,
    epochs=10,
    lr=0.1,
    seed=0,
    logger=logger,
)
model_path = workdir / "model.amg"
write_model(model, model_path)

report = evaluate_model(model, corpus)
logger.prod(f"train accuracy {report.accuracy:.4f}, false positive rate {report.false_positive_rate}")


# the ranking is read on the samples whose label the DOS bytes carry
header_cohort = extract_cohort(corpus_dir, "header", workdir / "header_cohort")


async def main():
    result = await run_batch_async(
        model_path,
        header_cohort,
        workdir / "runs",
        max_samples=50,
        seed=0,
        donors_dir=corpus_dir / "benign",
        workers=4,
        logger=logger,
    )

    for attack, summary in result.summaries.items():
        logger.prod(f"{attack}:")
        logger.table(("metric", "value"), format_summary(summary))

    if result.ranking is not None:
        logger.prod("DOS versus padding:", "pass" if result.ranking.passed else "fail")


asyncio.run(main())
logger.prod(f"Artifacts in {workdir}")
