from pathlib import Path

import pandas as pd
import pytest
from pydantic import ValidationError

from evasive_pe.attacks import AttackConfig, AttackOutcome, GammaConfig
from evasive_pe.classes.errors import HarnessError
from evasive_pe.classes.logger import Logger
from evasive_pe.harness.corpus import (
    BENIGN_TRAILER,
    BODY_MOTIF,
    HEADER_MOTIF,
    MOTIF_ALIGNMENT,
    TRAILER_REACH,
    extract_cohort,
    generate_corpus,
    label_of,
    load_manifest,
)
from evasive_pe.harness.experiment import (
    ADVERSARIAL_SUFFIX,
    ExperimentConfig,
    run_batch_async,
    run_experiment_async,
)
from evasive_pe.harness.ingest import ingest
from evasive_pe.harness.report import (
    CSV_COLUMNS,
    CsvRow,
    evasion_rate,
    read_csv,
    rows_frame,
    summarize,
    summarize_frame,
    write_csv,
)
from evasive_pe.main import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main
from evasive_pe.malconv import ClassifierModel, read_model, score, write_model
from evasive_pe.pe_format import ByteSample, extract_donor_sections, parse_pe, structural_validity

from .utils import calibrated, with_output_bias


def quiet() -> Logger:
    return Logger(log_level="quiet")


def experiment_config(
    tmp_path: Path,
    model: ClassifierModel,
    samples_dir: Path,
    name: str = "run",
    **kwargs,
) -> ExperimentConfig:
    model_path = tmp_path / f"{name}.amg"
    write_model(model, model_path)
    kwargs.setdefault("attack", "dos")
    kwargs.setdefault("whitebox", AttackConfig(max_iterations=3, padding_budget=256))
    return ExperimentConfig(
        model_path=model_path,
        samples_dir=samples_dir,
        max_samples=10,
        save_dir=tmp_path / name,
        csv_path=tmp_path / f"{name}.csv",
        seed=17,
        **kwargs,
    )


def make_outcome(sample_id: str, evaded: bool, initial: float = 0.9) -> AttackOutcome:
    return AttackOutcome(
        sample_id=sample_id,
        sha256="0" * 64,
        attack_name="dos",
        seed=4,
        evaded=evaded,
        initial_score=initial,
        final_score=0.2 if evaded else 0.8,
        iterations=3,
        n_phi=12,
        queries=4,
        wall_ms=1.5,
        score_trajectory=[initial, 0.8, 0.8, 0.2 if evaded else 0.8],
    )


class TestCorpus:
    def test_balanced_and_valid(self, tmp_path: Path):
        manifest = generate_corpus(tmp_path, 10, "mixed", seed=1, logger=quiet())

        assert len(manifest) == 10
        assert int(manifest.label.sum()) == 5
        corpus = load_manifest(tmp_path)
        assert len(corpus) == 10
        for sample, _ in corpus:
            assert structural_validity(sample)
            assert 0x800 <= len(sample) <= 0xA00

    def test_header_motif(self, tmp_path: Path):
        manifest = generate_corpus(tmp_path, 8, "header_signal", seed=2, logger=quiet())

        for path, label, signal in manifest.itertuples(index=False):
            sample = ByteSample.read(tmp_path / path)

            assert label == label_of(signal)
            assert (BENIGN_TRAILER in sample.data) == signal.endswith("trailer")
            assert (sample.data[2:32] == HEADER_MOTIF) == signal.startswith("header")
        assert set(manifest.signal) == {"header", "plain", "header+trailer"}

    def test_layout_is_shared(self, tmp_path: Path):
        generate_corpus(tmp_path, 12, "mixed", seed=6, logger=quiet())

        layouts = {
            tuple(
                (s.name, s.raw_offset, s.raw_size, s.virtual_size, s.characteristics)
                for s in parse_pe(sample).section_table
            )
            for sample, _ in load_manifest(tmp_path)
        }
        assert len(layouts) == 1
        for sample, _ in load_manifest(tmp_path):
            assert len(sample) == 0xA00

    def test_motif_placement(self, tmp_path: Path):
        manifest = generate_corpus(tmp_path, 12, "mixed", seed=7, logger=quiet())

        for path, signal in zip(manifest.path, manifest.signal):
            sample = ByteSample.read(tmp_path / path)
            text, data = parse_pe(sample).section_table
            if signal.startswith("body"):
                offset = sample.data.index(BODY_MOTIF)
                assert offset % MOTIF_ALIGNMENT == 0
                assert text.raw_offset <= offset <= text.raw_end - len(BODY_MOTIF)
            if signal.endswith("trailer"):
                offset = sample.data.index(BENIGN_TRAILER)
                assert offset % MOTIF_ALIGNMENT == 0
                assert data.raw_offset <= offset < data.raw_offset + TRAILER_REACH

    def test_first_donor_carries_trailer(self, tmp_path: Path):
        for profile in ("header_signal", "overlay_signal", "mixed"):
            generate_corpus(tmp_path / profile, 8, profile, seed=8, logger=quiet())
            benign, _ = ingest(tmp_path / profile / "benign", 8, logger=quiet())

            donors = extract_donor_sections(benign, 2)
            assert BENIGN_TRAILER in donors[0][:TRAILER_REACH]

    def test_extract_cohort(self, tmp_path: Path):
        generate_corpus(tmp_path / "corpus", 12, "mixed", seed=1, logger=quiet())
        cohort = extract_cohort(tmp_path / "corpus", "header", tmp_path / "header")

        names = sorted(p.name for p in cohort.iterdir())
        assert names == ["00000.exe", "00002.exe", "00004.exe"]
        for name in names:
            sample = ByteSample.read(cohort / name)
            assert sample.data[2:32] == HEADER_MOTIF
            assert sample.data == (tmp_path / "corpus" / "malware" / name).read_bytes()

        generate_corpus(tmp_path / "headers", 4, "header_signal", seed=1, logger=quiet())
        with pytest.raises(ValueError):
            extract_cohort(tmp_path / "headers", "body", tmp_path / "none")

    def test_label_rule(self):
        assert label_of("header") == label_of("body") == 1
        assert label_of("plain") == 0
        assert label_of("header+trailer") == label_of("body+trailer") == 0

    def test_odd_count(self, tmp_path: Path):
        manifest = generate_corpus(tmp_path, 7, "overlay_signal", seed=0, logger=quiet())
        assert len(manifest) == 7
        assert int(manifest.label.sum()) == 4
        assert len(list((tmp_path / "malware").iterdir())) == 4

    def test_too_small(self, tmp_path: Path):
        with pytest.raises(ValueError):
            generate_corpus(tmp_path, 1, "mixed", seed=0)

    def test_deterministic(self, tmp_path: Path):
        generate_corpus(tmp_path / "a", 6, "mixed", seed=9, logger=quiet())
        generate_corpus(tmp_path / "b", 6, "mixed", seed=9, logger=quiet())

        first = [s.data for s, _ in load_manifest(tmp_path / "a")]
        second = [s.data for s, _ in load_manifest(tmp_path / "b")]
        assert first == second


class TestIngest:
    def test_filters_non_pe(self, samples_dir: Path):
        samples, report = ingest(samples_dir, 10, logger=quiet())

        assert len(samples) == 3
        assert report.considered == 5
        assert report.filtered_non_pe == 2
        assert [e.sample.name for e in report.entries][-2:] == ["zz_note0.txt", "zz_note1.txt"]

    def test_max_samples_takes_first_names(self, samples_dir: Path):
        samples, report = ingest(samples_dir, 1, logger=quiet())
        assert report.considered == 1
        assert [s.name for s in samples] == ["00000.exe"]

    def test_empty_directory(self, tmp_path: Path):
        with pytest.raises(HarnessError) as info:
            ingest(tmp_path, 5)
        assert info.value.kind == "EMPTY_DIRECTORY"

    def test_missing_directory(self, tmp_path: Path):
        with pytest.raises(FileNotFoundError):
            ingest(tmp_path / "missing", 5)

    def test_max_samples_positive(self, samples_dir: Path):
        with pytest.raises(ValueError):
            ingest(samples_dir, 0)


class TestReport:
    def test_evasion_rate(self):
        assert evasion_rate([True, False, True, True]) == 0.75
        assert evasion_rate([make_outcome("a", True), make_outcome("b", False)]) == 0.5
        with pytest.raises(HarnessError) as info:
            evasion_rate([])
        assert info.value.kind == "NO_SAMPLES"

    def test_csv_round_trip(self, tmp_path: Path):
        rows = [
            CsvRow.from_outcome(make_outcome("a", True)),
            CsvRow.non_pe(ByteSample(b"text", source_path="note.txt")),
            CsvRow.already_evasive(ByteSample(b"MZ", source_path="b.exe"), 0.1, seed=4),
            CsvRow.from_outcome(make_outcome("c", False, initial=1.0)),
        ]
        path = tmp_path / "out" / "rows.csv"
        write_csv(rows, path)

        frame = read_csv(path)
        assert list(frame.columns) == CSV_COLUMNS
        assert frame["evaded"].tolist() == [1, 0, 1, 0]
        assert frame["attack"].tolist() == ["dos", "non_pe", "already_evasive", "dos"]
        assert frame["queries"].tolist()[2] == 1

        summary = summarize(path)
        assert summary == summarize_frame(rows_frame(rows))
        assert summary.total_ingested == 4
        assert summary.filtered_non_pe == 1
        assert summary.already_evasive == 1
        assert summary.attacked == 2
        assert summary.evasion_rate == 0.5
        assert summary.saturated_confidence == 1
        assert summary.saturated_evaded == 0

    def test_wrong_columns(self, tmp_path: Path):
        path = tmp_path / "bad.csv"
        pd.DataFrame({"sample_id": ["a"], "evaded": [1]}).to_csv(path, index=False)
        with pytest.raises(HarnessError) as info:
            read_csv(path)
        assert info.value.kind == "MALFORMED_CSV"

    def test_bad_evaded_value(self, tmp_path: Path):
        path = tmp_path / "bad.csv"
        frame = rows_frame([make_outcome("a", True)])
        frame["evaded"] = 2
        frame.to_csv(path, index=False)
        with pytest.raises(HarnessError) as info:
            read_csv(path)
        assert info.value.kind == "MALFORMED_CSV"

    def test_empty_file(self, tmp_path: Path):
        path = tmp_path / "empty.csv"
        path.write_text("")
        with pytest.raises(HarnessError) as info:
            read_csv(path)
        assert info.value.kind == "MALFORMED_CSV"


class TestExperiment:
    async def test_saturated_model(self, tmp_path: Path, samples_dir: Path, harness_model: ClassifierModel):
        config = experiment_config(tmp_path, with_output_bias(harness_model, 50.0), samples_dir)
        result = await run_experiment_async(config, logger=quiet())

        summary = result.summary
        assert summary.total_ingested == 5
        assert summary.filtered_non_pe == 2
        assert summary.attacked == summary.saturated_confidence == 3
        assert summary.evaded == summary.saturated_evaded == 0
        assert summary.evasion_rate == 0.0
        assert [row.attack for row in result.rows] == ["dos"] * 3 + ["non_pe"] * 2
        assert list(config.save_dir.iterdir()) == []

    async def test_already_evasive(self, tmp_path: Path, samples_dir: Path, harness_model: ClassifierModel):
        config = experiment_config(tmp_path, with_output_bias(harness_model, -50.0), samples_dir)
        result = await run_experiment_async(config, logger=quiet())

        assert result.outcomes == []
        assert result.summary.already_evasive == 3
        assert result.summary.attacked == 0
        assert result.summary.evasion_rate is None
        assert [row.queries for row in result.rows[:3]] == [1, 1, 1]

    async def test_csv_matches_summary(self, tmp_path: Path, samples_dir: Path, harness_model: ClassifierModel):
        samples, _ = ingest(samples_dir, 10, logger=quiet())
        model = calibrated(harness_model, samples[0], 0.7)

        first = await run_experiment_async(
            experiment_config(tmp_path, model, samples_dir, name="first"), logger=quiet()
        )
        second = await run_experiment_async(
            experiment_config(tmp_path, model, samples_dir, name="second", workers=3),
            logger=quiet(),
        )

        assert summarize(tmp_path / "first.csv").non_timing() == first.summary.non_timing()
        pd.testing.assert_frame_equal(
            read_csv(tmp_path / "first.csv").drop(columns="wall_ms"),
            read_csv(tmp_path / "second.csv").drop(columns="wall_ms"),
        )
        assert first.summary.non_timing() == second.summary.non_timing()

    async def test_adversarial_files(self, tmp_path: Path, samples_dir: Path, harness_model: ClassifierModel):
        samples, _ = ingest(samples_dir, 10, logger=quiet())
        model = calibrated(harness_model, samples[0], 0.55)
        config = experiment_config(
            tmp_path,
            model,
            samples_dir,
            attack="padding",
            whitebox=AttackConfig(max_iterations=10, padding_budget=512),
        )
        result = await run_experiment_async(config, logger=quiet())
        reloaded = read_model(config.model_path)

        for outcome in result.outcomes:
            path = config.save_dir / f"{outcome.sample_id}{ADVERSARIAL_SUFFIX}"
            assert path.exists() == outcome.evaded
            if outcome.evaded:
                adversarial = ByteSample.read(path)
                assert structural_validity(adversarial)
                assert score(reloaded, adversarial) < config.threshold

    async def test_gamma_respects_budget(
        self, tmp_path: Path, samples_dir: Path, donors_dir: Path, harness_model: ClassifierModel
    ):
        config = experiment_config(
            tmp_path,
            with_output_bias(harness_model, 3.0),
            samples_dir,
            attack="gamma",
            donors_dir=donors_dir,
            donor_sections=2,
            gamma=GammaConfig(population=4, query_budget=20),
        )
        result = await run_experiment_async(config, logger=quiet())

        for row in result.rows:
            assert row.queries <= 20
        for outcome in result.outcomes:
            assert outcome.attack_name == "gamma"
            assert outcome.queries <= 20

    def test_gamma_needs_donors(self, tmp_path: Path, samples_dir: Path, harness_model: ClassifierModel):
        with pytest.raises(ValidationError):
            experiment_config(tmp_path, harness_model, samples_dir, attack="gamma")

    def test_threshold_range(self, tmp_path: Path, samples_dir: Path, harness_model: ClassifierModel):
        with pytest.raises(ValidationError):
            experiment_config(tmp_path, harness_model, samples_dir, threshold=1.0)


async def test_batch(tmp_path: Path, samples_dir: Path, harness_model: ClassifierModel):
    model_path = tmp_path / "model.amg"
    write_model(with_output_bias(harness_model, 50.0), model_path)

    result = await run_batch_async(
        model_path, samples_dir, tmp_path / "batch", max_samples=10, seed=1, logger=quiet()
    )

    assert set(result.summaries) == {"padding", "dos"}
    assert (tmp_path / "batch" / "padding.csv").exists()
    assert (tmp_path / "batch" / "dos.csv").exists()
    assert not (tmp_path / "batch" / "gamma.csv").exists()
    assert result.ranking is not None


class TestCli:
    def test_gen_corpus(self, tmp_path: Path):
        out = tmp_path / "corpus"
        args = ["--log-level", "quiet", "gen-corpus", "--out", str(out), "--count", "4"]
        assert main(args) == EXIT_OK
        assert len(load_manifest(out)) == 4

    def test_bad_count(self, tmp_path: Path):
        args = ["gen-corpus", "--out", str(tmp_path), "--count", "1"]
        assert main(args) == EXIT_CONFIG

    def test_unknown_command(self):
        assert main(["explode"]) == EXIT_CONFIG

    def test_missing_model(self, tmp_path: Path, samples_dir: Path):
        args = [
            "attack",
            "--type", "dos",
            "--model", str(tmp_path / "missing.amg"),
            "--samples", str(samples_dir),
            "--max-samples", "3",
            "--save-dir", str(tmp_path / "adv"),
            "--csv", str(tmp_path / "out.csv"),
        ]
        assert main(args) == EXIT_CONFIG

    def test_malformed_csv(self, tmp_path: Path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b\n1,2\n")
        assert main(["report", "--csv", str(path)]) == EXIT_RUNTIME

    def test_train_attack_report(self, tmp_path: Path, samples_dir: Path):
        corpus = tmp_path / "train_corpus"
        model = tmp_path / "model.amg"
        csv = tmp_path / "dos.csv"

        assert main(["--log-level", "quiet", "gen-corpus", "--out", str(corpus), "--count", "8"]) == EXIT_OK
        train_args = [
            "--log-level", "quiet",
            "train",
            "--corpus", str(corpus),
            "--out", str(model),
            "--epochs", "1",
            "--embed-dim", "4",
            "--filters", "4",
            "--hidden", "4",
        ]
        assert main(train_args) == EXIT_OK
        assert model.exists()

        attack_args = [
            "--log-level", "quiet",
            "attack",
            "--type", "dos",
            "--model", str(model),
            "--samples", str(samples_dir),
            "--max-samples", "5",
            "--save-dir", str(tmp_path / "adv"),
            "--csv", str(csv),
            "--max-iters", "2",
        ]
        assert main(attack_args) == EXIT_OK
        assert len(read_csv(csv)) == 5
        assert main(["--log-level", "quiet", "report", "--csv", str(csv)]) == EXIT_OK
