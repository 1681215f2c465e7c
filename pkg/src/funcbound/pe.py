"""Minimal PE32/PE32+ reader: headers, section table and the x64 exception directory.

Everything downstream addresses bytes by RVA. File offsets only appear at the
boundary (:func:`rva_to_offset` / :func:`offset_to_rva`).
"""
from __future__ import annotations

import enum
import logging
import struct
from dataclasses import dataclass, field
from typing import Iterator

from .errors import (
    MalformedPdata,
    MalformedPe,
    NotX64,
    UnbackedRva,
    UnmappedRva,
    UnsupportedMachine,
)

log = logging.getLogger(__name__)

IMAGE_FILE_MACHINE_I386 = 0x014C
IMAGE_FILE_MACHINE_AMD64 = 0x8664
IMAGE_SCN_MEM_EXECUTE = 0x20000000
IMAGE_SCN_CNT_CODE = 0x00000020
IMAGE_DIRECTORY_ENTRY_EXCEPTION = 3

OPTIONAL_MAGIC_PE32 = 0x10B
OPTIONAL_MAGIC_PE32_PLUS = 0x20B

UNW_FLAG_CHAININFO = 0x4
RUNTIME_FUNCTION_SIZE = 12
MAX_CHAIN_DEPTH = 32


class Machine(str, enum.Enum):
    X86 = "x86"
    X64 = "x64"

    @property
    def bits(self):
        return 64 if self is Machine.X64 else 32


_MACHINES = {IMAGE_FILE_MACHINE_I386: Machine.X86, IMAGE_FILE_MACHINE_AMD64: Machine.X64}


@dataclass(frozen=True)
class Section:
    name: str
    rva: int
    virtual_size: int
    raw_offset: int
    raw_size: int
    executable: bool
    characteristics: int = 0

    @property
    def virtual_end(self):
        return self.rva + self.virtual_size

    @property
    def raw_end_rva(self):
        """First RVA past the file-backed part of the section."""
        return self.rva + min(self.raw_size, self.virtual_size)

    def contains(self, rva):
        return self.rva <= rva < self.virtual_end


@dataclass(frozen=True)
class RuntimeFunctionEntry:
    begin: int
    end: int
    unwind_info: int
    prolog_size: int
    chained: bool = False


@dataclass(frozen=True)
class PdataTable:
    entries: tuple
    skipped_chains: int = 0


@dataclass(frozen=True, eq=False)
class PeImage:
    raw_bytes: bytes
    machine: Machine
    image_base: int
    entry_point: int
    sections: tuple
    exception_dir: tuple = (0, 0)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def bits(self):
        return self.machine.bits

    def section_for_rva(self, rva):
        for sec in self.sections:
            if sec.contains(rva):
                return sec
        return None

    def rva_to_offset(self, rva):
        return rva_to_offset(self, rva)

    def offset_to_rva(self, offset):
        return offset_to_rva(self, offset)

    def read(self, rva, size):
        """Return ``size`` file-backed bytes starting at ``rva`` (must not cross the raw tail)."""
        off = rva_to_offset(self, rva)
        sec = self.section_for_rva(rva)
        if rva + size > sec.raw_end_rva:
            raise UnbackedRva(f"read of {size:#x} bytes at rva {rva:#x} leaves the raw data of {sec.name}")
        return self.raw_bytes[off:off + size]

    def executable_sections(self):
        """Executable sections with file-backed bytes; zero-raw sections are kept in
        ``sections`` but never scanned."""
        return [s for s in self.sections if s.executable and min(s.raw_size, s.virtual_size) > 0]

    def executable_ranges(self):
        return [(s.rva, s.raw_end_rva) for s in self.executable_sections()]

    def is_executable(self, rva):
        sec = self.section_for_rva(rva)
        return sec is not None and sec.executable and rva < sec.raw_end_rva

    def section_bytes(self, sec):
        n = min(sec.raw_size, sec.virtual_size)
        return self.raw_bytes[sec.raw_offset:sec.raw_offset + n]

    def iter_executable_bytes(self) -> Iterator[tuple[int, bytes]]:
        for sec in self.executable_sections():
            yield sec.rva, self.section_bytes(sec)


def _u16(data, off):
    return struct.unpack_from("<H", data, off)[0]


def _u32(data, off):
    return struct.unpack_from("<I", data, off)[0]


def parse_pe(data: bytes) -> PeImage:
    data = bytes(data)
    if len(data) < 0x40 or data[:2] != b"MZ":
        raise MalformedPe("missing MZ signature")
    e_lfanew = _u32(data, 0x3C)
    if e_lfanew + 24 > len(data):
        raise MalformedPe("e_lfanew points past end of file")
    if data[e_lfanew:e_lfanew + 4] != b"PE\0\0":
        raise MalformedPe("missing PE signature")

    coff = e_lfanew + 4
    machine_id, nsections, _, _, _, opt_size, _ = struct.unpack_from("<HHIIIHH", data, coff)
    if machine_id not in _MACHINES:
        raise UnsupportedMachine(f"machine {machine_id:#06x} is neither x86 nor x64")
    machine = _MACHINES[machine_id]

    opt = coff + 20
    if opt + opt_size > len(data) or opt_size < 2:
        raise MalformedPe("truncated optional header")
    magic = _u16(data, opt)
    if magic == OPTIONAL_MAGIC_PE32:
        min_size, base_fmt, base_off, ndirs_off, dirs_off = 96, "<I", 28, 92, 96
    elif magic == OPTIONAL_MAGIC_PE32_PLUS:
        min_size, base_fmt, base_off, ndirs_off, dirs_off = 112, "<Q", 24, 108, 112
    else:
        raise MalformedPe(f"unknown optional header magic {magic:#x}")
    if opt_size < min_size:
        raise MalformedPe("optional header too small")
    entry_point = _u32(data, opt + 16)
    image_base = struct.unpack_from(base_fmt, data, opt + base_off)[0]
    ndirs = _u32(data, opt + ndirs_off)
    exception_dir = (0, 0)
    if ndirs > IMAGE_DIRECTORY_ENTRY_EXCEPTION:
        d = opt + dirs_off + 8 * IMAGE_DIRECTORY_ENTRY_EXCEPTION
        if d + 8 > opt + opt_size:
            raise MalformedPe("data directory table truncated")
        exception_dir = struct.unpack_from("<II", data, d)

    sec_table = opt + opt_size
    if sec_table + 40 * nsections > len(data):
        raise MalformedPe("truncated section table")
    sections = []
    for i in range(nsections):
        off = sec_table + 40 * i
        name_raw, vsize, rva, raw_size, raw_off = struct.unpack_from("<8sIIII", data, off)
        chars = _u32(data, off + 36)
        name = name_raw.rstrip(b"\0").decode("latin-1")
        if raw_size and raw_off + raw_size > len(data):
            raise MalformedPe(f"section {name!r} raw data exceeds file length")
        if vsize == 0:
            vsize = raw_size
        sections.append(Section(name, rva, vsize, raw_off if raw_size else 0, raw_size,
                                bool(chars & IMAGE_SCN_MEM_EXECUTE), chars))
    sections.sort(key=lambda s: s.rva)
    for a, b in zip(sections, sections[1:]):
        if a.virtual_end > b.rva:
            raise MalformedPe(f"sections {a.name!r} and {b.name!r} overlap")

    image = PeImage(data, machine, image_base, entry_point, tuple(sections), tuple(exception_dir))
    if entry_point and image.section_for_rva(entry_point) is None:
        raise MalformedPe(f"entry point {entry_point:#x} outside every section")
    return image


def rva_to_offset(image: PeImage, rva: int) -> int:
    sec = image.section_for_rva(rva)
    if sec is None:
        raise UnmappedRva(f"rva {rva:#x} is not inside any section")
    delta = rva - sec.rva
    if delta >= sec.raw_size:
        raise UnbackedRva(f"rva {rva:#x} lies in the zero-filled tail of {sec.name}")
    return sec.raw_offset + delta


def offset_to_rva(image: PeImage, offset: int) -> int:
    for sec in image.sections:
        n = min(sec.raw_size, sec.virtual_size)
        if sec.raw_size and sec.raw_offset <= offset < sec.raw_offset + n:
            return sec.rva + (offset - sec.raw_offset)
    raise UnmappedRva(f"file offset {offset:#x} is not backed by any section")


def _read_unwind(image, rva):
    try:
        hdr = image.read(rva, 4)
    except (UnmappedRva, UnbackedRva):
        return None
    version_flags, prolog_size, count_codes, _ = hdr
    return version_flags >> 3, prolog_size, count_codes


def _chain_parent(image, unwind_rva, count_codes):
    # unwind codes are padded to an even count before the chained RUNTIME_FUNCTION
    slots = count_codes + (count_codes & 1)
    try:
        raw = image.read(unwind_rva + 4 + 2 * slots, RUNTIME_FUNCTION_SIZE)
    except (UnmappedRva, UnbackedRva):
        return None
    return struct.unpack("<III", raw)


def read_pdata(image: PeImage) -> PdataTable:
    if image.machine is not Machine.X64:
        raise NotX64("only x64 images carry RUNTIME_FUNCTION exception data")
    cache = image._cache
    if "pdata" in cache:
        return cache["pdata"]
    rva, size = image.exception_dir
    if rva == 0 or size == 0:
        table = PdataTable(())
        cache["pdata"] = table
        return table
    if size % RUNTIME_FUNCTION_SIZE:
        raise MalformedPdata(f"exception directory size {size} is not a multiple of {RUNTIME_FUNCTION_SIZE}")
    try:
        raw = image.read(rva, size)
    except (UnmappedRva, UnbackedRva) as exc:
        raise MalformedPdata(f"exception directory not readable: {exc}") from exc

    entries = []
    skipped = 0
    for begin, end, unwind in struct.iter_unpack("<III", raw):
        if begin == 0 and end == 0:
            continue
        if not begin < end:
            raise MalformedPdata(f"RUNTIME_FUNCTION begin {begin:#x} >= end {end:#x}")
        if not image.is_executable(begin):
            raise MalformedPdata(f"RUNTIME_FUNCTION begin {begin:#x} outside executable sections")
        info = _read_unwind(image, unwind)
        if info is None:
            raise MalformedPdata(f"unwind info rva {unwind:#x} is unmapped")
        flags, prolog_size, count_codes = info
        chained = bool(flags & UNW_FLAG_CHAININFO)
        target = unwind
        depth = 0
        while flags & UNW_FLAG_CHAININFO:
            parent = _chain_parent(image, target, count_codes)
            depth += 1
            info = _read_unwind(image, parent[2]) if parent else None
            if info is None or depth > MAX_CHAIN_DEPTH:
                break
            target = parent[2]
            flags, prolog_size, count_codes = info
        if flags & UNW_FLAG_CHAININFO or info is None:
            skipped += 1
            continue
        entries.append(RuntimeFunctionEntry(begin, end, unwind, min(prolog_size, end - begin), chained))
    if skipped:
        log.warning("skipped %d RUNTIME_FUNCTION entries with unresolvable unwind chains", skipped)
    table = PdataTable(tuple(entries), skipped)
    cache["pdata"] = table
    return table


def parse_pdata(image: PeImage) -> list:
    return list(read_pdata(image).entries)


def image_info(image: PeImage) -> dict:
    """JSON-ready summary used by the ``info`` subcommand."""
    pdata_count = None
    skipped = None
    if image.machine is Machine.X64:
        table = read_pdata(image)
        pdata_count = len(table.entries)
        skipped = table.skipped_chains
    return {
        "machine": image.machine.value,
        "image_base": image.image_base,
        "entry_point": image.entry_point,
        "sections": [
            {
                "name": s.name,
                "rva": s.rva,
                "virtual_size": s.virtual_size,
                "raw_offset": s.raw_offset,
                "raw_size": s.raw_size,
                "executable": s.executable,
            }
            for s in image.sections
        ],
        "pdata_entries": pdata_count,
        "pdata_skipped_chains": skipped,
    }
