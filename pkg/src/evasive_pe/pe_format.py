"""
Minimal Windows PE structure: DOS header, PE signature, COFF header, the
optional-header fields the rewriters need, and the section table. Imports,
relocations and everything inside section data are opaque bytes.

See https://learn.microsoft.com/en-us/windows/win32/debug/pe-format
"""
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence, Union

import numpy as np

from .classes.errors import PeFormatError
from .util import round_up, sha256_hex

DOS_MAGIC = b"MZ"
PE_SIGNATURE = b"PE\0\0"

DOS_HEADER_SIZE = 0x40
E_LFANEW_OFFSET = 0x3C
COFF_HEADER_SIZE = 20
SECTION_ENTRY_SIZE = 40

# Offsets into the optional header; identical for PE32 and PE32+.
OPT_SECTION_ALIGNMENT = 32
OPT_FILE_ALIGNMENT = 36
OPT_SIZE_OF_IMAGE = 56
OPT_SIZE_OF_HEADERS = 60
OPT_MIN_READABLE = 64

OPTIONAL_HEADER_MAGICS = {
    0x10B: "PE32",
    0x20B: "PE32+",
}

DEFAULT_FILE_ALIGNMENT = 512
DEFAULT_SECTION_ALIGNMENT = 0x1000

IMAGE_SCN_CNT_INITIALIZED_DATA = 0x00000040
IMAGE_SCN_MEM_READ = 0x40000000

GAMMA_SECTION_NAME = b".gamma\0\0"

SECTION_STRUCT = struct.Struct("<8sIIIIIIHHI")
COFF_STRUCT = struct.Struct("<HHIIIHH")

PathLike = Union[str, Path]


@dataclass(frozen=True)
class ByteSample:
    data: bytes = field(repr=False)
    source_path: Optional[str] = None
    id: str = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "data", bytes(self.data))
        object.__setattr__(self, "id", sha256_hex(self.data))

    def __len__(self) -> int:
        return len(self.data)

    @property
    def name(self) -> str:
        if self.source_path is not None:
            return Path(self.source_path).name
        return self.id[:16]

    @classmethod
    def read(cls, path: PathLike) -> "ByteSample":
        return cls(Path(path).read_bytes(), source_path=str(path))

    def write(self, path: PathLike):
        Path(path).write_bytes(self.data)

    # pydantic fields holding a sample accept the instance as-is
    @classmethod
    def __get_validators__(cls):
        yield cls._validate

    @classmethod
    def _validate(cls, v: object) -> "ByteSample":
        if not isinstance(v, cls):
            raise TypeError(f"expected ByteSample, got {type(v).__name__}")
        return v


@dataclass(frozen=True)
class SectionEntry:
    name: bytes
    virtual_size: int
    virtual_addr: int
    raw_size: int
    raw_offset: int
    characteristics: int
    pointer_to_relocations: int = 0
    pointer_to_linenumbers: int = 0
    number_of_relocations: int = 0
    number_of_linenumbers: int = 0

    @property
    def raw_end(self) -> int:
        return self.raw_offset + self.raw_size

    @property
    def display_name(self) -> str:
        return self.name.rstrip(b"\0").decode("latin-1")

    @classmethod
    def unpack_from(cls, data: bytes, offset: int) -> "SectionEntry":
        (
            name,
            virtual_size,
            virtual_addr,
            raw_size,
            raw_offset,
            pointer_to_relocations,
            pointer_to_linenumbers,
            number_of_relocations,
            number_of_linenumbers,
            characteristics,
        ) = SECTION_STRUCT.unpack_from(data, offset)

        return cls(
            name=name,
            virtual_size=virtual_size,
            virtual_addr=virtual_addr,
            raw_size=raw_size,
            raw_offset=raw_offset,
            characteristics=characteristics,
            pointer_to_relocations=pointer_to_relocations,
            pointer_to_linenumbers=pointer_to_linenumbers,
            number_of_relocations=number_of_relocations,
            number_of_linenumbers=number_of_linenumbers,
        )

    def pack_into(self, buf: bytearray, offset: int):
        SECTION_STRUCT.pack_into(
            buf,
            offset,
            self.name,
            self.virtual_size,
            self.virtual_addr,
            self.raw_size,
            self.raw_offset,
            self.pointer_to_relocations,
            self.pointer_to_linenumbers,
            self.number_of_relocations,
            self.number_of_linenumbers,
            self.characteristics,
        )


@dataclass(frozen=True)
class PeView:
    dos_magic_ok: bool
    e_lfanew: int
    coff_machine: int
    num_sections: int
    section_table: tuple[SectionEntry, ...]
    overlay_start: int
    header_end: int
    file_length: int
    optional_header_size: int
    section_table_offset: int
    file_alignment: int = DEFAULT_FILE_ALIGNMENT
    section_alignment: int = DEFAULT_SECTION_ALIGNMENT
    # None when the optional header is too short or has an unknown magic
    size_of_headers: Optional[int] = None
    size_of_image: Optional[int] = None

    @property
    def optional_header_offset(self) -> int:
        return self.e_lfanew + len(PE_SIGNATURE) + COFF_HEADER_SIZE

    def non_empty_sections(self) -> list[SectionEntry]:
        return [s for s in self.section_table if s.raw_size > 0]


@dataclass(frozen=True)
class RegionMask:
    indices: tuple[int, ...]

    def __post_init__(self):
        indices = tuple(int(i) for i in self.indices)
        for prev, cur in zip(indices, indices[1:]):
            if cur <= prev:
                raise ValueError("RegionMask indices must be unique and sorted")
        if indices and indices[0] < 0:
            raise ValueError("RegionMask indices must be non-negative")
        object.__setattr__(self, "indices", indices)

    @classmethod
    def from_iterable(cls, indices: Iterable[int]) -> "RegionMask":
        return cls(tuple(sorted(set(int(i) for i in indices))))

    def __len__(self) -> int:
        return len(self.indices)

    def __iter__(self) -> Iterator[int]:
        return iter(self.indices)

    def __contains__(self, index: object) -> bool:
        return index in set(self.indices)

    def fits(self, length: int) -> bool:
        return not self.indices or self.indices[-1] < length

    def issubset(self, other: "RegionMask") -> bool:
        return set(self.indices) <= set(other.indices)

    def array(self) -> np.ndarray:
        return np.asarray(self.indices, dtype=np.int64)


def _malformed(message: str) -> PeFormatError:
    return PeFormatError("MALFORMED", message)


def parse_pe(sample: ByteSample) -> PeView:
    data = sample.data

    if len(data) < len(DOS_MAGIC) or data[: len(DOS_MAGIC)] != DOS_MAGIC:
        raise PeFormatError("NOT_PE", f"Bad DOS magic: {data[:2]!r}")

    if len(data) < DOS_HEADER_SIZE:
        raise _malformed(f"Truncated DOS header ({len(data)} bytes)")

    (e_lfanew,) = struct.unpack_from("<I", data, E_LFANEW_OFFSET)
    # The attack surface 2..0x3B must never overlap the NT headers.
    if e_lfanew < DOS_HEADER_SIZE:
        raise _malformed(f"e_lfanew {e_lfanew:#x} points inside the DOS header")
    if e_lfanew + len(PE_SIGNATURE) > len(data):
        raise _malformed(f"e_lfanew {e_lfanew:#x} points past end of file")

    signature = data[e_lfanew : e_lfanew + len(PE_SIGNATURE)]
    if signature != PE_SIGNATURE:
        raise PeFormatError(
            "NOT_PE", f"Invalid PE signature at offset {e_lfanew:#x}: {signature!r}"
        )

    coff_offset = e_lfanew + len(PE_SIGNATURE)
    if coff_offset + COFF_HEADER_SIZE > len(data):
        raise _malformed("Truncated COFF header")

    machine, num_sections, _, _, _, optional_header_size, _ = COFF_STRUCT.unpack_from(
        data, coff_offset
    )

    optional_offset = coff_offset + COFF_HEADER_SIZE
    section_table_offset = optional_offset + optional_header_size
    header_end = section_table_offset + num_sections * SECTION_ENTRY_SIZE
    if header_end > len(data):
        raise _malformed(
            f"Section table ({num_sections} entries at {section_table_offset:#x}) overruns file"
        )

    file_alignment = DEFAULT_FILE_ALIGNMENT
    section_alignment = DEFAULT_SECTION_ALIGNMENT
    size_of_headers: Optional[int] = None
    size_of_image: Optional[int] = None

    if optional_header_size >= OPT_MIN_READABLE:
        (magic,) = struct.unpack_from("<H", data, optional_offset)
        if magic in OPTIONAL_HEADER_MAGICS:
            (section_alignment,) = struct.unpack_from(
                "<I", data, optional_offset + OPT_SECTION_ALIGNMENT
            )
            (file_alignment,) = struct.unpack_from(
                "<I", data, optional_offset + OPT_FILE_ALIGNMENT
            )
            (size_of_image,) = struct.unpack_from(
                "<I", data, optional_offset + OPT_SIZE_OF_IMAGE
            )
            (size_of_headers,) = struct.unpack_from(
                "<I", data, optional_offset + OPT_SIZE_OF_HEADERS
            )
            if file_alignment == 0 or section_alignment == 0:
                raise _malformed("Zero file or section alignment")

    sections = tuple(
        SectionEntry.unpack_from(data, section_table_offset + i * SECTION_ENTRY_SIZE)
        for i in range(num_sections)
    )

    previous_end = header_end
    for section in sorted(
        (s for s in sections if s.raw_size > 0), key=lambda s: s.raw_offset
    ):
        if section.raw_end > len(data):
            raise _malformed(
                f"Section {section.display_name!r} raw data overruns file"
            )
        if size_of_headers is not None and section.raw_offset % file_alignment != 0:
            raise _malformed(
                f"Section {section.display_name!r} raw offset {section.raw_offset:#x} is not {file_alignment}-aligned"
            )
        if section.raw_offset < previous_end:
            raise _malformed(
                f"Section {section.display_name!r} overlaps headers or another section"
            )
        previous_end = section.raw_end

    overlay_start = max(
        (s.raw_end for s in sections if s.raw_size > 0), default=header_end
    )

    return PeView(
        dos_magic_ok=True,
        e_lfanew=e_lfanew,
        coff_machine=machine,
        num_sections=num_sections,
        section_table=sections,
        overlay_start=overlay_start,
        header_end=header_end,
        file_length=len(data),
        optional_header_size=optional_header_size,
        section_table_offset=section_table_offset,
        file_alignment=file_alignment,
        section_alignment=section_alignment,
        size_of_headers=size_of_headers,
        size_of_image=size_of_image,
    )


def structural_validity(sample: ByteSample) -> bool:
    try:
        parse_pe(sample)
    except PeFormatError:
        return False

    return True


def dos_region_mask(view: PeView) -> RegionMask:
    """
    The DOS header bytes modern loaders ignore: everything between the MZ
    magic and e_lfanew.
    """
    return RegionMask(tuple(range(len(DOS_MAGIC), E_LFANEW_OFFSET)))


def rebuild_pe(sample: ByteSample, view: PeView) -> ByteSample:
    """
    Writes the view's header fields over a copy of the sample's bytes.
    Everything the view doesn't describe is carried over untouched.
    """
    if len(view.section_table) != view.num_sections:
        raise ValueError(
            f"View lists {len(view.section_table)} sections but num_sections is {view.num_sections}"
        )

    buf = bytearray(sample.data)
    if view.header_end > len(buf):
        raise _malformed("Section table does not fit in the file")

    struct.pack_into("<I", buf, E_LFANEW_OFFSET, view.e_lfanew)
    coff_offset = view.e_lfanew + len(PE_SIGNATURE)
    struct.pack_into("<HH", buf, coff_offset, view.coff_machine, view.num_sections)

    if view.size_of_image is not None:
        struct.pack_into(
            "<I", buf, view.optional_header_offset + OPT_SIZE_OF_IMAGE, view.size_of_image
        )

    for i, section in enumerate(view.section_table):
        section.pack_into(buf, view.section_table_offset + i * SECTION_ENTRY_SIZE)

    return ByteSample(bytes(buf), source_path=sample.source_path)


def append_overlay(sample: ByteSample, payload: bytes) -> ByteSample:
    if len(payload) == 0:
        raise ValueError("Overlay payload must not be empty")

    return ByteSample(sample.data + bytes(payload), source_path=sample.source_path)


def header_slots(view: PeView) -> int:
    """Number of extra section entries that fit before the first section's data."""
    limits = [s.raw_offset for s in view.non_empty_sections()]
    if view.size_of_headers is not None:
        limits.append(view.size_of_headers)
    limit = min(limits, default=view.file_length)

    return max(0, (limit - view.header_end) // SECTION_ENTRY_SIZE)


def inject_section(
    sample: ByteSample,
    content: bytes,
    name: bytes = GAMMA_SECTION_NAME,
) -> ByteSample:
    if len(content) == 0:
        raise ValueError("Injected section content must not be empty")
    if len(name) > 8:
        raise ValueError(f"Section name {name!r} is longer than 8 bytes")

    view = parse_pe(sample)
    if header_slots(view) < 1:
        raise PeFormatError(
            "NO_HEADER_SLACK",
            f"No room for another section entry after {view.header_end:#x}",
        )

    raw_offset = round_up(len(sample.data), view.file_alignment)
    raw_size = round_up(len(content), view.file_alignment)
    body = (
        sample.data
        + bytes(raw_offset - len(sample.data))
        + bytes(content)
        + bytes(raw_size - len(content))
    )

    virtual_end = max(
        (s.virtual_addr + max(s.virtual_size, s.raw_size) for s in view.section_table),
        default=view.size_of_headers or view.header_end,
    )
    virtual_addr = round_up(virtual_end, view.section_alignment)

    entry = SectionEntry(
        name=name.ljust(8, b"\0"),
        virtual_size=len(content),
        virtual_addr=virtual_addr,
        raw_size=raw_size,
        raw_offset=raw_offset,
        characteristics=IMAGE_SCN_CNT_INITIALIZED_DATA | IMAGE_SCN_MEM_READ,
    )

    size_of_image = view.size_of_image
    if size_of_image is not None:
        size_of_image = round_up(
            virtual_addr + len(content), view.section_alignment
        )

    injected_view = replace(
        view,
        num_sections=view.num_sections + 1,
        section_table=view.section_table + (entry,),
        header_end=view.header_end + SECTION_ENTRY_SIZE,
        overlay_start=entry.raw_end,
        file_length=len(body),
        size_of_image=size_of_image,
    )

    return rebuild_pe(ByteSample(body, source_path=sample.source_path), injected_view)


def extract_donor_sections(benign: Sequence[ByteSample], k: int) -> list[bytes]:
    """
    Raw data of the k largest non-empty sections across all donors.
    Ties keep donor order, then section-table order.
    """
    if k < 1:
        raise ValueError("k must be at least 1")

    candidates: list[tuple[int, int, int, bytes]] = []
    for donor_index, donor in enumerate(benign):
        view = parse_pe(donor)
        for section_index, section in enumerate(view.section_table):
            if section.raw_size > 0:
                candidates.append(
                    (
                        section.raw_size,
                        donor_index,
                        section_index,
                        donor.data[section.raw_offset : section.raw_end],
                    )
                )

    if len(candidates) < k:
        raise PeFormatError(
            "INSUFFICIENT_DONORS",
            f"Requested {k} donor sections, only {len(candidates)} available",
        )

    candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
    return [payload for *_, payload in candidates[:k]]


def byte_diff(original: ByteSample, modified: ByteSample) -> RegionMask:
    """Offsets that differ, counting every byte of a length mismatch."""
    a = np.frombuffer(original.data, dtype=np.uint8)
    b = np.frombuffer(modified.data, dtype=np.uint8)
    common = min(len(a), len(b))

    changed = np.flatnonzero(a[:common] != b[:common]).tolist()
    changed.extend(range(common, max(len(a), len(b))))

    return RegionMask(tuple(changed))
