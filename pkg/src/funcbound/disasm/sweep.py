"""Linear sweep and recursive descent over a parsed image."""
from __future__ import annotations

import bisect
import logging
from collections import deque
from dataclasses import dataclass, field, replace

from ..errors import UnmappedRange
from .decoder import DecodeMode, InsnClass, decode_one

log = logging.getLogger(__name__)

PADDING_CLASSES = frozenset({InsnClass.INT3, InsnClass.NOP})
BLOCK_TERMINATORS = frozenset({InsnClass.RET, InsnClass.JMP_INDIRECT, InsnClass.JMP_REL, InsnClass.INVALID})
# terminators after which the gap heuristic assumes another block follows
GAP_TRIGGERS = frozenset({InsnClass.RET, InsnClass.JMP_INDIRECT})


def sweep_bytes(data, mode=DecodeMode.BITS64, start=0, end=None, base=0):
    """Linear sweep over ``data[start:end]``; ``base`` is the address of ``data[0]``."""
    end = len(data) if end is None else end
    out = []
    pos = start
    while pos < end:
        insn = decode_one(data, pos, mode, base + pos)
        if insn.end > end:
            insn = replace(insn, truncated=True)
        out.append(insn)
        pos = insn.end
    return out


def _exec_section(image, rva):
    sec = image.section_for_rva(rva)
    if sec is None or not sec.executable or rva >= sec.raw_end_rva:
        return None
    return sec


def linear_sweep(image, start: int, end: int) -> list:
    """Decode ``[start, end)`` back to back. The final instruction may run past
    ``end``; it is then marked ``truncated``."""
    sec = _exec_section(image, start)
    if sec is None or end > sec.raw_end_rva or end < start:
        raise UnmappedRange(f"range [{start:#x}, {end:#x}) is not inside one executable section")
    data = image.section_bytes(sec)
    mode = DecodeMode.for_machine(image.machine)
    insns = sweep_bytes(data, mode, start - sec.rva, end - sec.rva, base=sec.rva)
    return [replace(i, offset=i.offset + sec.raw_offset) for i in insns]


@dataclass
class DescentResult:
    instructions: dict = field(default_factory=dict)  # rva -> Instruction
    call_targets: set = field(default_factory=set)
    gap_starts: set = field(default_factory=set)
    unmapped_targets: set = field(default_factory=set)
    shifted: dict = field(default_factory=dict)  # original target -> shifted rva

    def covered(self):
        out = set()
        for insn in self.instructions.values():
            out.update(range(insn.start_address, insn.end_address))
        return out


class _Coverage:
    """Sorted instruction starts so containment queries stay logarithmic."""

    def __init__(self):
        self.starts = []
        self.ends = {}

    def add(self, insn):
        a = insn.start_address
        if a not in self.ends:
            bisect.insort(self.starts, a)
        self.ends[a] = max(self.ends.get(a, a), insn.end_address)

    def containing(self, rva):
        i = bisect.bisect_right(self.starts, rva) - 1
        if i >= 0:
            s = self.starts[i]
            if s < rva < self.ends[s]:
                return s
        return None


def recursive_descent(image, seeds, gap_heuristic: bool = False, shift_misaligned: bool = False) -> DescentResult:
    """Follow fall-through, relative branches and direct calls from ``seeds``.

    With ``gap_heuristic`` a new block is assumed right after every ``ret`` or
    indirect jump; the first non-padding instruction of such a block is
    reported in ``gap_starts``. With ``shift_misaligned`` a target landing
    inside an already decoded instruction is moved to that instruction's end.
    """
    mode = DecodeMode.for_machine(image.machine)
    seeds = sorted(set(seeds))
    for s in seeds:
        if _exec_section(image, s) is None:
            raise UnmappedRange(f"seed {s:#x} is outside executable sections")

    result = DescentResult()
    cov = _Coverage()
    work = deque((s, False) for s in seeds)
    views = {}

    def view(sec):
        if sec.rva not in views:
            views[sec.rva] = image.section_bytes(sec)
        return views[sec.rva]

    while work:
        addr, from_gap = work.popleft()
        if addr in result.instructions:
            continue
        inside = cov.containing(addr)
        if inside is not None and shift_misaligned:
            new = cov.ends[inside]
            result.shifted[addr] = new
            if addr in result.call_targets:
                result.call_targets.discard(addr)
                result.call_targets.add(new)
            work.appendleft((new, from_gap))
            continue
        sec = _exec_section(image, addr)
        if sec is None:
            continue
        data = view(sec)
        skipping_padding = from_gap
        while True:
            if addr in result.instructions or addr >= sec.raw_end_rva:
                break
            insn = decode_one(data, addr - sec.rva, mode, addr)
            insn = replace(insn, offset=insn.offset + sec.raw_offset)
            if skipping_padding and insn.cls not in PADDING_CLASSES:
                skipping_padding = False
                if insn.cls is not InsnClass.INVALID and cov.containing(addr) is None:
                    result.gap_starts.add(addr)
            if insn.rel_target is not None:
                mapped = _exec_section(image, insn.rel_target) is not None
                insn = replace(insn, target_mapped=mapped)
                if not mapped:
                    result.unmapped_targets.add(insn.rel_target)
            result.instructions[addr] = insn
            cov.add(insn)
            cls = insn.cls
            if cls is InsnClass.CALL_REL:
                result.call_targets.add(insn.rel_target)
                if insn.target_mapped:
                    work.append((insn.rel_target, False))
            elif cls in (InsnClass.JCC, InsnClass.JMP_REL) and insn.target_mapped:
                work.append((insn.rel_target, False))
            if cls in BLOCK_TERMINATORS:
                if gap_heuristic and cls in GAP_TRIGGERS:
                    work.append((insn.end_address, True))
                break
            addr = insn.end_address
    return result
