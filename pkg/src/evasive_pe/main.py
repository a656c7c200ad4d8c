import sys
from argparse import ArgumentParser, Namespace
from pathlib import Path
from typing import NoReturn, Optional, Sequence

from pydantic import ValidationError

from .attacks.schema import AttackConfig, GammaConfig
from .classes.logger import Logger
from .harness.corpus import generate_corpus, load_manifest
from .harness.experiment import ExperimentConfig, run_batch, run_experiment
from .harness.report import format_summary, summarize
from .malconv import ClassifierModel, ModelConfig, evaluate_model, train, write_model
from .types import EvasivePeError

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


class ConfigError(Exception):
    pass


class _Parser(ArgumentParser):
    """Bad flags are configuration errors, not argparse's exit status 2."""

    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def build_parser() -> ArgumentParser:
    parser = _Parser("evasive-pe", description="Adversarial PE evasion experiments")
    parser.add_argument(
        "--log-level", choices=("quiet", "info", "debug"), default="info"
    )
    commands = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    gen = commands.add_parser("gen-corpus", help="Write a synthetic labelled PE corpus")
    gen.add_argument("--out", type=Path, required=True)
    gen.add_argument("--count", type=int, required=True)
    gen.add_argument(
        "--profile",
        choices=("header_signal", "overlay_signal", "mixed"),
        default="mixed",
    )
    gen.add_argument("--seed", type=int, default=0)

    tr = commands.add_parser("train", help="Train a classifier on a generated corpus")
    tr.add_argument("--corpus", type=Path, required=True)
    tr.add_argument("--out", type=Path, required=True)
    tr.add_argument("--epochs", type=int, default=10)
    tr.add_argument("--lr", type=float, default=0.1)
    tr.add_argument("--batch-size", type=int, default=16)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--window", type=int, default=4096)
    tr.add_argument("--embed-dim", type=int, default=8)
    tr.add_argument("--filters", type=int, default=16)
    tr.add_argument("--kernel-width", type=int, default=32)
    tr.add_argument("--hidden", type=int, default=16)

    at = commands.add_parser("attack", help="Attack every sample in a directory")
    at.add_argument("--type", choices=("padding", "dos", "gamma"), required=True)
    at.add_argument("--model", type=Path, required=True)
    at.add_argument("--samples", type=Path, required=True)
    at.add_argument("--max-samples", type=int, required=True)
    at.add_argument("--save-dir", type=Path, required=True)
    at.add_argument("--csv", type=Path, required=True)
    at.add_argument("--seed", type=int, default=0)
    at.add_argument("--threshold", type=float, default=0.5)
    at.add_argument("--workers", type=int, default=1)
    at.add_argument("--padding-bytes", type=int, default=2048)
    at.add_argument("--max-iters", type=int, default=150)
    at.add_argument("--ig-top-k", type=int, default=None)
    at.add_argument("--population", type=int, default=10)
    at.add_argument("--budget", type=int, default=510)
    at.add_argument("--lambda", dest="penalty_lambda", type=float, default=1e-6)
    at.add_argument("--mode", choices=("padding", "section_injection"), default="padding")
    at.add_argument("--donors", type=Path, default=None)
    at.add_argument("--donor-sections", type=int, default=4)

    rp = commands.add_parser("report", help="Summarize an experiment CSV")
    rp.add_argument("--csv", type=Path, required=True)

    bt = commands.add_parser("batch", help="Run several attacks and compare them")
    bt.add_argument("--model", type=Path, required=True)
    bt.add_argument("--samples", type=Path, required=True)
    bt.add_argument("--out-dir", type=Path, required=True)
    bt.add_argument("--max-samples", type=int, required=True)
    bt.add_argument("--seed", type=int, default=0)
    bt.add_argument("--workers", type=int, default=1)
    bt.add_argument("--donors", type=Path, default=None)

    return parser


def _gen_corpus(args: Namespace, logger: Logger):
    if args.count < 2:
        raise ConfigError("--count must be at least 2")
    generate_corpus(args.out, args.count, args.profile, args.seed, logger=logger)


def _train(args: Namespace, logger: Logger):
    if not args.corpus.is_dir():
        raise ConfigError(f"No corpus at {args.corpus}")

    config = ModelConfig(
        window=args.window,
        embed_dim=args.embed_dim,
        filters=args.filters,
        kernel_width=args.kernel_width,
        hidden=args.hidden,
    )
    corpus = load_manifest(args.corpus)
    model = ClassifierModel.initialize(config, args.seed)
    trained, _ = train(
        model,
        corpus,
        epochs=args.epochs,
        lr=args.lr,
        seed=args.seed,
        batch_size=args.batch_size,
        logger=logger,
    )
    write_model(trained, args.out)

    report = evaluate_model(trained, corpus)
    logger.table(
        ("metric", "value"),
        [
            ("samples", report.samples),
            ("accuracy", report.accuracy),
            ("false positive rate", report.false_positive_rate),
            ("false negative rate", report.false_negative_rate),
        ],
    )


def _attack(args: Namespace, logger: Logger):
    config = ExperimentConfig(
        attack=args.type,
        model_path=args.model,
        samples_dir=args.samples,
        max_samples=args.max_samples,
        save_dir=args.save_dir,
        csv_path=args.csv,
        seed=args.seed,
        threshold=args.threshold,
        workers=args.workers,
        donors_dir=args.donors,
        donor_sections=args.donor_sections,
        whitebox=AttackConfig(
            max_iterations=args.max_iters,
            padding_budget=args.padding_bytes,
            ig_top_k=args.ig_top_k,
            success_threshold=args.threshold,
        ),
        gamma=GammaConfig(
            mode=args.mode,
            population=args.population,
            query_budget=args.budget,
            penalty_lambda=args.penalty_lambda,
            success_threshold=args.threshold,
        ),
    )
    result = run_experiment(config, logger=logger)
    logger.table(("metric", "value"), format_summary(result.summary))


def _report(args: Namespace, logger: Logger):
    if not args.csv.is_file():
        raise ConfigError(f"No CSV at {args.csv}")
    logger.table(("metric", "value"), format_summary(summarize(args.csv)))


def _batch(args: Namespace, logger: Logger):
    result = run_batch(
        args.model,
        args.samples,
        args.out_dir,
        args.max_samples,
        seed=args.seed,
        donors_dir=args.donors,
        workers=args.workers,
        logger=logger,
    )
    for attack, summary in result.summaries.items():
        logger.prod(f"{attack}:")
        logger.table(("metric", "value"), format_summary(summary))

    if result.ranking is not None:
        logger.prod(
            "DOS versus padding ranking:", "pass" if result.ranking.passed else "fail"
        )


COMMANDS = {
    "gen-corpus": _gen_corpus,
    "train": _train,
    "attack": _attack,
    "report": _report,
    "batch": _batch,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    logger = Logger()
    try:
        args = build_parser().parse_args(argv)
        logger = Logger(log_level=args.log_level)
        COMMANDS[args.command](args, logger)
    except (ConfigError, ValidationError, ValueError) as err:
        logger.error(f"Invalid configuration: {err}")
        return EXIT_CONFIG
    except (EvasivePeError, OSError) as err:
        logger.error(str(err))
        logger.print_exception(err)
        return EXIT_RUNTIME

    return EXIT_OK


def run():
    sys.exit(main())


if __name__ == "__main__":
    run()
