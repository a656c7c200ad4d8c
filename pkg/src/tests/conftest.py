# pylint: disable=redefined-outer-name

import asyncio
import functools
import inspect
from pathlib import Path
from typing import Callable

import numpy as np
import pytest
from faker import Faker

from evasive_pe.attacks.schema import AttackOutcome
from evasive_pe.classes.logger import Logger
from evasive_pe.harness import experiment
from evasive_pe.harness.corpus import generate_corpus
from evasive_pe.malconv import ClassifierModel
from evasive_pe.pe_format import ByteSample

from . import Config, base_config as base_config
from .data.pe_fixtures import junk_text, minimal_pe
from .utils import assert_contained

ATTACKS = ("padding_attack", "dos_header_attack", "gamma_attack")


@pytest.fixture(scope="session")
def config() -> Config:
    return base_config


@pytest.fixture
def logger() -> Logger:
    return Logger(log_level="quiet", prefix="test")


@pytest.fixture
def minimal_sample() -> ByteSample:
    return ByteSample(minimal_pe(), source_path="minimal.exe")


@pytest.fixture
def two_section_sample() -> ByteSample:
    return ByteSample(minimal_pe(section_sizes=(0x200, 0x400)), source_path="two.exe")


@pytest.fixture
def gradient_model(config: Config) -> ClassifierModel:
    return ClassifierModel.initialize(config.gradient_model, seed=7)


@pytest.fixture
def attack_model(config: Config) -> ClassifierModel:
    return ClassifierModel.initialize(config.attack_model, seed=11)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def event_loop():
    try:
        loop = asyncio.get_running_loop()
    except RuntimeError:
        loop = asyncio.new_event_loop()
        asyncio.set_event_loop(loop)

    yield loop


@pytest.fixture
def samples_dir(tmp_path: Path, faker: Faker) -> Path:
    """Three header-signal malware PEs followed by two text files."""
    corpus = tmp_path / "corpus"
    generate_corpus(corpus, 6, "header_signal", seed=3, logger=Logger(log_level="quiet"))
    samples = corpus / "malware"
    for i in range(2):
        (samples / f"zz_note{i}.txt").write_bytes(junk_text(faker))
    return samples


@pytest.fixture
def donors_dir(tmp_path: Path) -> Path:
    corpus = tmp_path / "donor_corpus"
    generate_corpus(corpus, 4, "overlay_signal", seed=4, logger=Logger(log_level="quiet"))
    return corpus / "benign"


@pytest.fixture
def harness_model(config: Config) -> ClassifierModel:
    return ClassifierModel.initialize(config.harness_model, seed=5)


def _contained(attack: Callable[..., AttackOutcome]) -> Callable[..., AttackOutcome]:
    signature = inspect.signature(attack)

    @functools.wraps(attack)
    def run(*args, **kwargs) -> AttackOutcome:
        outcome = attack(*args, **kwargs)
        assert_contained(signature.bind(*args, **kwargs).arguments["sample"], outcome)
        return outcome

    return run


@pytest.fixture(autouse=True)
def contained_attacks(request: pytest.FixtureRequest, monkeypatch: pytest.MonkeyPatch):
    """Byte-diffs every attack run in the suite against its input."""
    for target in (request.module, experiment):
        for name in ATTACKS:
            attack = getattr(target, name, None)
            if attack is not None:
                monkeypatch.setattr(target, name, _contained(attack))
