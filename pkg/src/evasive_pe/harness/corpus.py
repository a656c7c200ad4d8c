"""
Synthetic PE corpus with planted, attack-reachable label signals.

Three motifs decide the label: a header motif inside the modifiable DOS bytes,
a body motif somewhere in the section data, and a benign trailer that
overrides either. A file is malware when it carries a malware motif and no
trailer. Every motif sits on a convolution-window boundary.
"""
import hashlib
import shutil
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
import pandas as pd
from typing_extensions import Literal, TypeAlias

from ..classes.logger import Logger
from ..pe_format import (
    ByteSample,
    DOS_MAGIC,
    E_LFANEW_OFFSET,
    IMAGE_SCN_CNT_INITIALIZED_DATA,
    IMAGE_SCN_MEM_READ,
    PE_SIGNATURE,
    SectionEntry,
    structural_validity,
)
from ..util import round_up

CorpusProfile: TypeAlias = Literal["header_signal", "overlay_signal", "mixed"]
Signal: TypeAlias = Literal["plain", "header", "body", "header+trailer", "body+trailer"]

MANIFEST_NAME = "manifest.csv"
MANIFEST_COLUMNS = ["path", "label", "signal"]

E_LFANEW = 0x80
FILE_ALIGNMENT = 0x200
SECTION_ALIGNMENT = 0x1000
SIZE_OF_HEADERS = 0x400
MOTIF_ALIGNMENT = 32
# the trailer stays in the first 0x200 bytes of .data
TRAILER_REACH = 0x200

IMAGE_FILE_MACHINE_I386 = 0x14C
IMAGE_SCN_CNT_CODE = 0x00000020
IMAGE_SCN_MEM_EXECUTE = 0x20000000

HEADER_MOTIF_OFFSET = len(DOS_MAGIC)
HEADER_MOTIF = hashlib.sha256(b"evasive-pe header motif").digest()[:30]
BODY_MOTIF = hashlib.sha256(b"evasive-pe body motif").digest()
BENIGN_TRAILER = hashlib.sha256(b"evasive-pe benign trailer").digest()

# e_cblp .. e_ovno of a typical linker-emitted DOS header
STANDARD_DOS_FIELDS = struct.pack(
    "<13H", 0x90, 3, 0, 4, 0, 0xFFFF, 0, 0xB8, 0, 0, 0, 0x40, 0
)
DOS_STUB = (
    bytes.fromhex("0e1fba0e00b409cd21b8014ccd21")
    + b"This program cannot be run in DOS mode.\r\r\n$"
)

COFF_FORMAT = "<HHIIIHH"
OPTIONAL_HEADER_FORMAT = "<HBB9I6H4I2H6I"
NUMBER_OF_RVA_AND_SIZES = 16
OPTIONAL_HEADER_SIZE = struct.calcsize(OPTIONAL_HEADER_FORMAT) + 8 * NUMBER_OF_RVA_AND_SIZES

PathLike = Union[str, Path]


@dataclass
class SectionSpec:
    name: bytes
    data: bytes
    characteristics: int = IMAGE_SCN_CNT_INITIALIZED_DATA | IMAGE_SCN_MEM_READ


def build_pe(
    sections: list[SectionSpec],
    dos_fields: bytes = STANDARD_DOS_FIELDS,
    timestamp: int = 0,
    overlay: bytes = b"",
) -> bytes:
    """A 32-bit PE with 0x400 bytes of headers and file-aligned sections."""
    if len(dos_fields) > E_LFANEW_OFFSET - len(DOS_MAGIC):
        raise ValueError("DOS fields overrun e_lfanew")

    header = bytearray(SIZE_OF_HEADERS)
    header[: len(DOS_MAGIC)] = DOS_MAGIC
    header[len(DOS_MAGIC) : len(DOS_MAGIC) + len(dos_fields)] = dos_fields
    struct.pack_into("<I", header, E_LFANEW_OFFSET, E_LFANEW)
    header[0x40 : 0x40 + len(DOS_STUB)] = DOS_STUB
    header[E_LFANEW : E_LFANEW + len(PE_SIGNATURE)] = PE_SIGNATURE

    entries: list[SectionEntry] = []
    raw_offset = SIZE_OF_HEADERS
    virtual_addr = SECTION_ALIGNMENT
    for spec in sections:
        raw_size = round_up(len(spec.data), FILE_ALIGNMENT)
        entries.append(
            SectionEntry(
                name=spec.name.ljust(8, b"\0"),
                virtual_size=len(spec.data),
                virtual_addr=virtual_addr,
                raw_size=raw_size,
                raw_offset=raw_offset,
                characteristics=spec.characteristics,
            )
        )
        raw_offset += raw_size
        virtual_addr += round_up(max(len(spec.data), 1), SECTION_ALIGNMENT)

    coff_offset = E_LFANEW + len(PE_SIGNATURE)
    struct.pack_into(
        COFF_FORMAT,
        header,
        coff_offset,
        IMAGE_FILE_MACHINE_I386,
        len(entries),
        timestamp,
        0,
        0,
        OPTIONAL_HEADER_SIZE,
        0x0102,
    )

    code = sum(e.raw_size for e in entries if e.characteristics & IMAGE_SCN_CNT_CODE)
    initialized = sum(e.raw_size for e in entries) - code
    struct.pack_into(
        OPTIONAL_HEADER_FORMAT,
        header,
        coff_offset + 20,
        0x10B,
        14,
        0,
        code,
        initialized,
        0,
        SECTION_ALIGNMENT,
        SECTION_ALIGNMENT,
        SECTION_ALIGNMENT,
        0x400000,
        SECTION_ALIGNMENT,
        FILE_ALIGNMENT,
        6,
        0,
        0,
        0,
        6,
        0,
        0,
        virtual_addr,
        SIZE_OF_HEADERS,
        0,
        2,
        0x8140,
        0x100000,
        0x1000,
        0x100000,
        0x1000,
        0,
        NUMBER_OF_RVA_AND_SIZES,
    )

    table_offset = coff_offset + 20 + OPTIONAL_HEADER_SIZE
    for i, entry in enumerate(entries):
        entry.pack_into(header, table_offset + i * 40)

    body = b"".join(
        spec.data.ljust(entry.raw_size, b"\0") for spec, entry in zip(sections, entries)
    )
    return bytes(header) + body + overlay


def _filler(rng: np.random.Generator, size: int) -> bytearray:
    """Zero-heavy random bytes, roughly the texture of real section data."""
    values = rng.integers(0, 256, size, dtype=np.uint8)
    values[rng.random(size) < 0.5] = 0
    return bytearray(values.tobytes())


def _plant(data: bytearray, motif: bytes, rng: np.random.Generator, within: int):
    """Writes motif at a random window-aligned offset below within."""
    slots = (min(within, len(data)) - len(motif)) // MOTIF_ALIGNMENT + 1
    offset = MOTIF_ALIGNMENT * int(rng.integers(0, slots))
    data[offset : offset + len(motif)] = motif


def build_sample(signal: Signal, rng: np.random.Generator) -> bytes:
    """
    Every sample has the same two-section layout, so only the motifs tell
    the classes apart. The body motif lands anywhere in .text; the trailer
    lands near the start of .data, which donor harvesting takes whole.
    """
    timestamp = int(rng.integers(0x50000000, 0x65000000))

    dos_fields = STANDARD_DOS_FIELDS
    if signal.startswith("header"):
        dos_fields = HEADER_MOTIF

    text = _filler(rng, FILE_ALIGNMENT)
    data = _filler(rng, 2 * FILE_ALIGNMENT)
    if signal.startswith("body"):
        _plant(text, BODY_MOTIF, rng, within=len(text))
    if signal.endswith("trailer"):
        _plant(data, BENIGN_TRAILER, rng, within=TRAILER_REACH)

    sections = [
        SectionSpec(
            b".text",
            bytes(text),
            IMAGE_SCN_CNT_CODE | IMAGE_SCN_MEM_EXECUTE | IMAGE_SCN_MEM_READ,
        ),
        SectionSpec(b".data", bytes(data)),
    ]
    return build_pe(sections, dos_fields=dos_fields, timestamp=timestamp)


def _signals(profile: CorpusProfile, index: int) -> tuple[Signal, Signal]:
    """(malware signal, benign signal) for the index-th pair. Decoys come first."""
    if profile == "header_signal":
        return "header", ("header+trailer", "plain")[index % 2]
    if profile == "overlay_signal":
        return "body", ("body+trailer", "plain")[index % 2]
    return (
        ("header", "body")[index % 2],
        ("body+trailer", "header+trailer", "plain")[index % 3],
    )


def label_of(signal: Signal) -> int:
    return int(signal in ("header", "body"))


def generate_corpus(
    out_dir: PathLike,
    count: int,
    profile: CorpusProfile,
    seed: int,
    logger: Optional[Logger] = None,
) -> pd.DataFrame:
    """
    Writes count files (malware first half of each pair) under out_dir and a
    manifest of (path, label, signal). Odd counts get the extra malware file.
    """
    if logger is None:
        logger = Logger(prefix="corpus")
    if count < 2:
        raise ValueError("count must be at least 2")

    root = Path(out_dir)
    (root / "malware").mkdir(parents=True, exist_ok=True)
    (root / "benign").mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    records = []
    malware_count = count - count // 2

    for index in range(count):
        pair, is_benign = divmod(index, 2)
        if index >= 2 * (count // 2):
            pair, is_benign = malware_count - 1, 0
        malware_signal, benign_signal = _signals(profile, pair)
        signal = benign_signal if is_benign else malware_signal

        data = build_sample(signal, rng)
        sample = ByteSample(data)
        if not structural_validity(sample):
            raise AssertionError(f"Generated an invalid PE for signal {signal}")

        relative = Path("benign" if is_benign else "malware") / f"{pair:05d}.exe"
        sample.write(root / relative)
        records.append(
            {"path": relative.as_posix(), "label": label_of(signal), "signal": signal}
        )

    manifest = pd.DataFrame.from_records(records, columns=MANIFEST_COLUMNS)
    manifest.to_csv(root / MANIFEST_NAME, index=False)

    logger.info(
        f"Wrote {count} {profile} samples to {root} ({int(manifest.label.sum())} malware)"
    )
    return manifest


def load_manifest(corpus_dir: PathLike) -> list[tuple[ByteSample, int]]:
    root = Path(corpus_dir)
    manifest = pd.read_csv(root / MANIFEST_NAME)
    return [
        (ByteSample.read(root / path), int(label))
        for path, label in zip(manifest["path"], manifest["label"])
    ]


def extract_cohort(
    corpus_dir: PathLike,
    signal: Signal,
    out_dir: PathLike,
) -> Path:
    """Copies the files the manifest tags with signal into out_dir."""
    root = Path(corpus_dir)
    manifest = pd.read_csv(root / MANIFEST_NAME)
    cohort = manifest[manifest["signal"] == signal]
    if cohort.empty:
        raise ValueError(f"{root} has no {signal} samples")

    target = Path(out_dir)
    target.mkdir(parents=True, exist_ok=True)
    for path in cohort["path"]:
        shutil.copyfile(root / path, target / Path(path).name)
    return target
