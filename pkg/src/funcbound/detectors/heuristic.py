"""Recursive-descent start detector with optional gap analysis."""
from __future__ import annotations

import logging
from dataclasses import dataclass

from ..disasm import recursive_descent
from ..errors import NotX64
from ..pe import Machine, PeImage, read_pdata

log = logging.getLogger(__name__)

# common compiler prologues, matched only at aligned offsets inside undecoded gaps
PROLOGUE_PATTERNS = {
    Machine.X64: [bytes.fromhex(p) for p in (
        "48895c24", "48894c24", "4889542408", "40534883ec", "40554883ec", "4055565748",
        "4883ec", "4881ec", "55488bec", "554889e5", "488bc4", "4c8bdc",
    )],
    Machine.X86: [bytes.fromhex(p) for p in (
        "8bff558bec", "558bec", "5589e5", "535657",
    )],
}
MAX_ROUNDS = 8


@dataclass(frozen=True)
class HeuristicOptions:
    gap_heuristic: bool = False
    prologue_patterns: bool = False
    pdata_seeds: bool = True
    alignment: int = 16


def _seeds(image, opts):
    seeds = set()
    if image.is_executable(image.entry_point):
        seeds.add(image.entry_point)
    if opts.pdata_seeds and image.machine is Machine.X64:
        try:
            seeds |= {e.begin for e in read_pdata(image).entries if image.is_executable(e.begin)}
        except NotX64:
            pass
    return seeds


def _pattern_hits(image, covered, opts):
    pats = PROLOGUE_PATTERNS[image.machine]
    hits = set()
    for base, data in image.iter_executable_bytes():
        first = base + (-base % opts.alignment)
        for rva in range(first, base + len(data), opts.alignment):
            if rva in covered:
                continue
            off = rva - base
            if any(data.startswith(p, off) for p in pats):
                hits.add(rva)
    return hits


def heuristic_detect(image: PeImage, options: HeuristicOptions | None = None, **kw) -> set:
    """Entry point (plus ``.pdata`` begins) as seeds, direct call targets, and
    optionally gap starts and aligned prologue matches in undecoded regions."""
    opts = options or HeuristicOptions(**kw)
    seeds = _seeds(image, opts)
    if not seeds:
        log.warning("no usable seeds in image")
    found = set(seeds)
    for _ in range(MAX_ROUNDS):
        res = recursive_descent(image, seeds, gap_heuristic=opts.gap_heuristic)
        found |= {t for t in res.call_targets if image.is_executable(t)}
        if opts.gap_heuristic:
            found |= res.gap_starts
        if not opts.prologue_patterns:
            break
        new = _pattern_hits(image, res.covered(), opts) - seeds
        if not new:
            break
        seeds |= new
        found |= new
    return found
