"""Weighted prefix tree over raw bytes.

Every candidate offset contributes one lookup sequence built from up to
``context_window`` bytes before the offset and ``depth`` bytes starting at
it. The two sides are interleaved nearest-first (offset-1, offset,
offset-2, offset+1, ...). Putting all context first made deep nodes split
on the tail of the previous function and lose support before reaching the
prologue. Positions outside the section use a sentinel symbol that never
collides with a real byte.

The trie is stored level by level. A node at level ``L`` is identified by its
key ``parent_index * 257 + symbol``, where ``parent_index`` is the node's
parent position in level ``L - 1``. Keys are sorted so lookup is a binary
search per level.
"""
from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from ..errors import EmptyCorpus, ModelFormatError
from ..pe import PeImage

log = logging.getLogger(__name__)

SENTINEL = 256
RADIX = 257
MAGIC = b"FBPT"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHHHIIIq q")


class Prediction(NamedTuple):
    rva: int
    score: float


@dataclass(frozen=True)
class PrefixTreeConfig:
    depth: int = 16
    context_window: int = 0
    min_support: int = 10
    alignment: int | None = None
    prune: bool = True

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.context_window < 0:
            raise ValueError("context_window must be >= 0")
        if self.min_support < 1:
            raise ValueError("min_support must be >= 1")
        if self.alignment is not None and self.alignment < 1:
            raise ValueError("alignment must be a positive integer")

    @property
    def length(self):
        return self.context_window + self.depth


@dataclass
class _Level:
    keys: np.ndarray
    starts: np.ndarray
    totals: np.ndarray


@dataclass
class PrefixTreeModel:
    config: PrefixTreeConfig
    levels: list = field(default_factory=list)
    root_starts: int = 0
    root_total: int = 0

    @property
    def depth(self):
        return self.config.depth

    @property
    def context_window(self):
        return self.config.context_window

    @property
    def min_support(self):
        return self.config.min_support

    @property
    def node_count(self):
        return sum(len(lv.keys) for lv in self.levels)

    def path(self, forward=b"", context=b""):
        """Trie path for ``forward`` bytes at a candidate preceded by ``context``
        (given in memory order, so the nearest byte is last)."""
        before = list(context)[::-1]
        out = []
        for rel in _lookup_order(self.context_window, self.depth):
            src, i = (before, -1 - rel) if rel < 0 else (list(forward), rel)
            if i >= len(src):
                break
            out.append(src[i])
        return out

    def lookup(self, path):
        """(start_count, total_count) of the node reached by ``path``, or None."""
        parent = 0
        hit = None
        for lvl, sym in enumerate(path):
            if lvl >= len(self.levels):
                return None
            lv = self.levels[lvl]
            key = parent * RADIX + int(sym)
            i = int(np.searchsorted(lv.keys, key))
            if i >= len(lv.keys) or lv.keys[i] != key:
                return None
            parent = i
            hit = (int(lv.starts[i]), int(lv.totals[i]))
        return hit

    def weight(self, path):
        hit = self.lookup(path)
        if hit is None or hit[1] == 0:
            return None
        return hit[0] / hit[1]

    # --- serialization ---------------------------------------------------

    def to_bytes(self) -> bytes:
        c = self.config
        out = io.BytesIO()
        out.write(_HEADER.pack(MAGIC, FORMAT_VERSION, c.depth, c.context_window, c.min_support,
                               c.alignment or 0, len(self.levels), self.root_starts, self.root_total))
        out.write(struct.pack("<B", int(c.prune)))
        for lv in self.levels:
            out.write(struct.pack("<Q", len(lv.keys)))
            for arr in (lv.keys, lv.starts, lv.totals):
                out.write(np.ascontiguousarray(arr, dtype="<i8").tobytes())
        return out.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> PrefixTreeModel:
        if len(data) < _HEADER.size + 1:
            raise ModelFormatError("model file is truncated")
        magic, version, depth, cw, ms, align, nlev, rs, rt = _HEADER.unpack_from(data, 0)
        if magic != MAGIC:
            raise ModelFormatError("not a prefix-tree model (bad magic)")
        if version != FORMAT_VERSION:
            raise ModelFormatError(f"unsupported model version {version}")
        pos = _HEADER.size
        prune = bool(data[pos])
        pos += 1
        try:
            config = PrefixTreeConfig(depth, cw, ms, align or None, prune)
        except ValueError as exc:
            raise ModelFormatError(str(exc)) from exc
        if nlev != config.length:
            raise ModelFormatError("level count does not match depth + context_window")
        levels = []
        for _ in range(nlev):
            if pos + 8 > len(data):
                raise ModelFormatError("model file is truncated")
            (n,) = struct.unpack_from("<Q", data, pos)
            pos += 8
            arrs = []
            for _ in range(3):
                end = pos + 8 * n
                if end > len(data):
                    raise ModelFormatError("model file is truncated")
                arrs.append(np.frombuffer(data[pos:end], dtype="<i8").astype(np.int64))
                pos = end
            levels.append(_Level(*arrs))
        if pos != len(data):
            raise ModelFormatError("trailing bytes after model payload")
        return cls(config, levels, rs, rt)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


# --- candidate sequences ---------------------------------------------------

def _lookup_order(cw, depth):
    """Byte positions relative to the candidate, in trie order.

    Context and forward bytes alternate (-1, 0, -2, 1, ...) so the shallow
    levels see both sides of the candidate; leftovers follow in order.
    """
    order = []
    for i in range(max(cw, depth)):
        if i < cw:
            order.append(-1 - i)
        if i < depth:
            order.append(i)
    return order


def _candidate_matrix(data: bytes, base: int, config: PrefixTreeConfig):
    """(rvas, symbols) for every candidate offset of one section.

    ``symbols`` has one row per candidate and ``context_window + depth``
    columns of uint16 symbols.
    """
    n = len(data)
    offs = np.arange(n, dtype=np.int64)
    if config.alignment:
        offs = offs[(base + offs) % config.alignment == 0]
    cw, depth = config.context_window, config.depth
    padded = np.full(cw + n + depth, SENTINEL, dtype=np.uint16)
    padded[cw:cw + n] = np.frombuffer(data, dtype=np.uint8)
    cols = [padded[offs + cw + rel] for rel in _lookup_order(cw, depth)]
    symbols = np.stack(cols, axis=1) if cols else np.empty((len(offs), 0), np.uint16)
    return base + offs, symbols


def _image_candidates(image: PeImage, config: PrefixTreeConfig):
    rvas, syms = [], []
    for sec in image.executable_sections():
        r, s = _candidate_matrix(image.section_bytes(sec), sec.rva, config)
        rvas.append(r)
        syms.append(s)
    if not rvas:
        return np.empty(0, np.int64), np.empty((0, config.length), np.uint16)
    return np.concatenate(rvas), np.concatenate(syms)


def _label_vector(rvas, starts):
    if not starts:
        return np.zeros(len(rvas), dtype=bool)
    return np.isin(rvas, np.fromiter(starts, dtype=np.int64))


# --- training and scoring ----------------------------------------------------

def train_prefix_tree(corpus, config: PrefixTreeConfig | None = None, **kw) -> PrefixTreeModel:
    """Count start/total occurrences of every lookup-sequence prefix in ``corpus``.

    ``corpus`` is a list of (PeImage, GroundTruth). Counting is a pure sum over
    candidates, so corpus order never affects the model.
    """
    config = config or PrefixTreeConfig(**kw)
    corpus = list(corpus)
    if not corpus:
        raise EmptyCorpus("training corpus is empty")
    all_syms, all_lab = [], []
    for image, gt in corpus:
        rvas, syms = _image_candidates(image, config)
        all_syms.append(syms)
        all_lab.append(_label_vector(rvas, gt.starts))
    syms = np.concatenate(all_syms)
    labels = np.concatenate(all_lab).astype(np.int64)
    model = PrefixTreeModel(config, [], int(labels.sum()), len(labels))

    parent = np.zeros(len(syms), dtype=np.int64)
    alive = np.ones(len(syms), dtype=bool)
    for lvl in range(config.length):
        idx = np.flatnonzero(alive)
        keys = parent[idx] * RADIX + syms[idx, lvl]
        uniq, inv, totals = np.unique(keys, return_inverse=True, return_counts=True)
        inv = inv.reshape(-1)
        starts = np.bincount(inv, weights=labels[idx], minlength=len(uniq)).astype(np.int64)
        totals = totals.astype(np.int64)
        if config.prune:
            keep = totals >= config.min_support
            remap = np.cumsum(keep) - 1
            uniq, starts, totals = uniq[keep], starts[keep], totals[keep]
            node_keep = keep[inv]
            alive[idx[~node_keep]] = False
            parent[idx[node_keep]] = remap[inv[node_keep]]
        else:
            parent[idx] = inv
        model.levels.append(_Level(uniq.astype(np.int64), starts, totals))
        if not alive.any():
            # keep the level count fixed so the format stays self-describing
            for _ in range(lvl + 1, config.length):
                model.levels.append(_Level(*(np.empty(0, np.int64) for _ in range(3))))
            break
    log.info("trained prefix tree: %d candidates, %d starts, %d nodes",
             model.root_total, model.root_starts, model.node_count)
    return model


def score_array(model: PrefixTreeModel, image: PeImage):
    """Vectorized scoring: (rvas, scores) for every candidate offset of ``image``."""
    rvas, syms = _image_candidates(image, model.config)
    scores = np.zeros(len(rvas), dtype=np.float64)
    parent = np.zeros(len(rvas), dtype=np.int64)
    alive = np.ones(len(rvas), dtype=bool)
    ms = model.min_support
    for lvl, lv in enumerate(model.levels):
        idx = np.flatnonzero(alive)
        if len(idx) == 0 or len(lv.keys) == 0:
            break
        keys = parent[idx] * RADIX + syms[idx, lvl]
        pos = np.searchsorted(lv.keys, keys)
        pos_c = np.minimum(pos, len(lv.keys) - 1)
        found = lv.keys[pos_c] == keys
        # totals shrink along a path, so once a node is below min_support
        # nothing deeper can be trusted either
        ok = found & (lv.totals[pos_c] >= ms)
        hit = idx[ok]
        scores[hit] = lv.starts[pos_c[ok]] / lv.totals[pos_c[ok]]
        parent[hit] = pos_c[ok]
        alive[idx[~ok]] = False
    order = np.argsort(rvas, kind="stable")
    return rvas[order], scores[order]


def score_candidates(model: PrefixTreeModel, image: PeImage, nonzero_only: bool = False) -> list:
    rvas, scores = score_array(model, image)
    if nonzero_only:
        keep = scores > 0
        rvas, scores = rvas[keep], scores[keep]
    return [Prediction(int(r), float(s)) for r, s in zip(rvas, scores)]
