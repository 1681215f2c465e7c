"""Dataset diversity statistics: byte-unique and normalized functions, prologues, padding."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

from .disasm import DecodeMode, InsnClass, sweep_bytes
from .errors import UnbackedRva, UnmappedFunction, UnmappedRva
from .ground_truth import Encoding, GroundTruth
from .padding import PaddingConfig, find_padding_instances
from .pe import Machine, PeImage, read_pdata

log = logging.getLogger(__name__)

END_SOURCES = ("auto", "ground_truth", "pdata")


@dataclass(frozen=True)
class NormalizedSequence:
    bytes: bytes
    source_len: int

    def __post_init__(self):
        if len(self.bytes) != self.source_len:
            raise ValueError("normalized length must equal source length")


@dataclass(frozen=True)
class DiversityStats:
    rva_count: int = 0
    byte_unique_count: int = 0
    normalized_unique_count: int = 0
    prologue_present: int = 0
    prologue_unique: int = 0
    prologue_normalized: int = 0
    padding_instances: int = 0
    functions_omitted: int = 0
    end_source: str = "none"

    def to_dict(self):
        return asdict(self)

    def table_row(self):
        """Counts in reporting column order."""
        return [self.rva_count, self.byte_unique_count, self.normalized_unique_count,
                self.prologue_present, self.prologue_unique, self.prologue_normalized,
                self.padding_instances]


class FunctionBytes(dict):
    """start RVA -> function bytes, plus how the ends were obtained."""

    def __init__(self, *args, omitted=0, end_source="none", **kw):
        super().__init__(*args, **kw)
        self.omitted = omitted
        self.end_source = end_source


def _ends_from(image, gt, end_source):
    if end_source not in END_SOURCES:
        raise ValueError(f"end_source must be one of {END_SOURCES}")
    use_gt = end_source in ("auto", "ground_truth") and gt.has_ends
    if use_gt:
        bump = 1 if gt.encoding is Encoding.INCLUSIVE else 0
        return "ground_truth", {r.start: r.end + bump for r in gt.records if r.end is not None}
    if end_source in ("auto", "pdata") and image.machine is Machine.X64:
        return "pdata", {e.begin: e.end for e in read_pdata(image).entries}
    return "none", {}


def extract_function_bytes(image: PeImage, gt: GroundTruth, end_source: str = "auto") -> FunctionBytes:
    source, ends = _ends_from(image, gt, end_source)
    out = FunctionBytes(end_source=source)
    omitted = 0
    for r in gt.records:
        end = ends.get(r.start)
        if end is None:
            omitted += 1
            continue
        try:
            out[r.start] = image.read(r.start, end - r.start)
        except (UnmappedRva, UnbackedRva) as exc:
            raise UnmappedFunction(f"function {r.start:#x}..{end:#x} is not file-backed") from exc
    out.omitted = omitted
    if omitted:
        log.info("%d functions without a derivable end omitted from %s", omitted, gt.sample_id)
    return out


def normalize(data, mode=DecodeMode.BITS64) -> NormalizedSequence:
    """Zero immediates and relative branch/call targets; everything else is kept.

    Zeroing never changes instruction lengths, so normalizing twice is a no-op.
    """
    buf = bytearray(data)
    for insn in sweep_bytes(buf, DecodeMode(mode)):
        if insn.cls is InsnClass.INVALID:
            continue
        for off, width in insn.imm_spans:
            p = insn.offset + off
            buf[p:p + width] = bytes(width)
    return NormalizedSequence(bytes(buf), len(data))


def diversity_stats(image: PeImage, gt: GroundTruth, padding_config: PaddingConfig | None = None,
                    end_source: str = "auto") -> DiversityStats:
    if not gt.records:
        return DiversityStats()
    mode = DecodeMode.for_machine(image.machine)
    funcs = extract_function_bytes(image, gt, end_source)
    bodies = [funcs[s] for s in sorted(funcs)]
    byte_unique = set(bodies)
    norm_unique = {normalize(b, mode).bytes for b in byte_unique}

    present = 0
    prologues = set()
    if image.machine is Machine.X64:
        starts = gt.starts
        for e in read_pdata(image).entries:
            if e.prolog_size and e.begin in starts:
                present += 1
                prologues.add(image.read(e.begin, e.prolog_size))
    norm_prologues = {normalize(p, mode).bytes for p in prologues}
    padding = find_padding_instances(image, gt, padding_config)
    return DiversityStats(
        rva_count=len(gt.records),
        byte_unique_count=len(byte_unique),
        normalized_unique_count=len(norm_unique),
        prologue_present=present,
        prologue_unique=len(prologues),
        prologue_normalized=len(norm_prologues),
        padding_instances=len(padding),
        functions_omitted=funcs.omitted,
        end_source=funcs.end_source,
    )
