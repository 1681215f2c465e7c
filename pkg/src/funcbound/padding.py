"""Inter-function padding: detection and seeded randomization.

The randomizer walks backward from every function start over at most
``lookback`` bytes. It stops at the first byte owned by a function, replaces
bytes whose value is a padding value and skips (but keeps walking past)
everything else.
"""
from __future__ import annotations

import bisect
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import UnbackedRva, UnmappedRva, UnmappedStart
from .ground_truth import Encoding, GroundTruth
from .pe import Machine, PeImage, parse_pe, read_pdata

log = logging.getLogger(__name__)

MODE_EXACT = "ground_truth_ends"
MODE_PDATA = "pdata_ends"
MODE_FIRST_NON_PADDING = "first_non_padding"


@dataclass(frozen=True)
class PaddingConfig:
    lookback: int = 20
    padding_values: frozenset = frozenset({0xCC})
    seed: int = 0
    exclude_original: bool = False

    def __post_init__(self):
        object.__setattr__(self, "padding_values", frozenset(self.padding_values))
        if self.lookback < 1:
            raise ValueError("lookback must be >= 1")
        if not self.padding_values:
            raise ValueError("padding_values must not be empty")
        if any(not 0 <= v <= 255 for v in self.padding_values):
            raise ValueError("padding values are bytes")
        if self.seed < 0:
            raise ValueError("seed must be unsigned")


@dataclass(frozen=True)
class PaddingChange:
    rva: int
    old_value: int
    new_value: int


@dataclass
class PaddingResult:
    data: bytes
    changes: list = field(default_factory=list)
    mode: str = MODE_EXACT
    config: PaddingConfig = field(default_factory=PaddingConfig)

    def image(self) -> PeImage:
        return parse_pe(self.data)

    def change_log(self) -> dict:
        return {
            "mode": self.mode,
            "seed": self.config.seed,
            "lookback": self.config.lookback,
            "padding_values": sorted(self.config.padding_values),
            "exclude_original": self.config.exclude_original,
            "changes": [{"rva": c.rva, "old": c.old_value, "new": c.new_value} for c in self.changes],
        }

    def dumps_change_log(self) -> str:
        return json.dumps(self.change_log(), indent=1) + "\n"


class _Ownership:
    """Answers "does this RVA belong to some function?" over merged ranges."""

    def __init__(self, ranges):
        merged = []
        for s, e in sorted(ranges):
            if merged and s <= merged[-1][1]:
                merged[-1][1] = max(merged[-1][1], e)
            else:
                merged.append([s, e])
        self.starts = [m[0] for m in merged]
        self.ends = [m[1] for m in merged]

    def owned(self, rva):
        i = bisect.bisect_right(self.starts, rva) - 1
        return i >= 0 and rva < self.ends[i]


def ownership(image: PeImage, gt: GroundTruth):
    """Return (mode, _Ownership or None) describing how function extents are known."""
    if gt.encoding is not Encoding.STARTS_ONLY and gt.has_ends:
        return MODE_EXACT, _Ownership(gt.exclusive_ranges())
    if image.machine is Machine.X64:
        ends = {e.begin: e.end for e in read_pdata(image).entries}
        ranges = [(s, ends[s]) for s in gt.starts if s in ends]
        if ranges:
            return MODE_PDATA, _Ownership(ranges)
    return MODE_FIRST_NON_PADDING, None


def _raw_window(image, start, lookback):
    """File offsets of bytes start-1 .. start-lookback, clipped at the section base."""
    try:
        off = image.rva_to_offset(start)
    except (UnmappedRva, UnbackedRva) as exc:
        raise UnmappedStart(f"function start {start:#x} is not file-backed") from exc
    sec = image.section_for_rva(start)
    depth = min(lookback, start - sec.rva)
    return off, depth


def find_padding_instances(image: PeImage, gt: GroundTruth, config: PaddingConfig | None = None) -> set:
    config = config or PaddingConfig()
    _, owner = ownership(image, gt)
    data = image.raw_bytes
    found = set()
    for s in sorted(gt.starts):
        try:
            off, depth = _raw_window(image, s, 1)
        except UnmappedStart:
            continue
        if depth < 1:
            continue
        if owner is not None and owner.owned(s - 1):
            continue
        if data[off - 1] in config.padding_values:
            found.add(s)
    return found


def randomize_padding(image: PeImage, gt: GroundTruth, config: PaddingConfig | None = None) -> PaddingResult:
    config = config or PaddingConfig()
    mode, owner = ownership(image, gt)
    buf = bytearray(image.raw_bytes)
    changes = []
    touched = set()
    for s in sorted(gt.starts):
        off, depth = _raw_window(image, s, config.lookback)
        rng = np.random.default_rng([config.seed, s])
        for i in range(1, depth + 1):
            rva = s - i
            if owner is not None and owner.owned(rva):
                break
            if rva in touched:
                continue
            old = buf[off - i]
            if old not in config.padding_values:
                if owner is None:
                    break
                continue
            if config.exclude_original:
                new = int(rng.integers(0, 255))
                new += new >= old
            else:
                new = int(rng.integers(0, 256))
            buf[off - i] = new
            touched.add(rva)
            changes.append(PaddingChange(rva, old, new))
    changes.sort(key=lambda c: c.rva)
    if mode != MODE_EXACT:
        log.info("padding randomization for %s used %s approximation", gt.sample_id, mode)
    return PaddingResult(bytes(buf), changes, mode, config)


def apply_changes(image: PeImage, changes) -> bytes:
    buf = bytearray(image.raw_bytes)
    for c in changes:
        buf[image.rva_to_offset(c.rva)] = c.new_value
    return bytes(buf)
