"""Desk-scale synthetic PE images with exact function ground truth.

Functions are assembled from byte templates. A template is a whitespace
separated token string:

    ``48``          literal byte
    ``i8`` ``i32``  random immediate (blinded by normalization); ``i8=frame``
                    shares one value across the prologue and the epilogue
    ``d8``          random stack displacement byte (not blinded)
    ``r32``         rel32 of a direct call, fixed up after layout
    ``j8:02``       rel8 branch displacement with a fixed value

Because each template knows where its immediates sit, the generator can
produce a "blinded skeleton" of every function without going through the
decoder; the tests use it as an independent normalization oracle.
"""
from __future__ import annotations

import json
import random
import struct
from dataclasses import asdict, dataclass, field

from .errors import SpecInfeasible
from .ground_truth import Encoding, FunctionRecord, GroundTruth, convert_encoding
from .pe import (
    IMAGE_FILE_MACHINE_AMD64,
    IMAGE_FILE_MACHINE_I386,
    IMAGE_SCN_CNT_CODE,
    IMAGE_SCN_MEM_EXECUTE,
    Machine,
    RuntimeFunctionEntry,
)

SECTION_ALIGN = 0x1000
FILE_ALIGN = 0x200
HEADERS_SIZE = 0x400
MAX_TEXT_SIZE = 16 << 20

SCN_TEXT = IMAGE_SCN_CNT_CODE | IMAGE_SCN_MEM_EXECUTE | 0x40000000  # code, execute, read
SCN_RDATA = 0x00000040 | 0x40000000  # initialized data, read

# (prologue, epilogue) pairs; epilogues end with the return
PROLOGUES = {
    Machine.X64: [
        ("48 89 5C 24 08 57 48 83 EC i8=frame", "48 83 C4 i8=frame 5F 48 8B 5C 24 08 C3"),
        ("40 53 48 83 EC i8=frame", "48 83 C4 i8=frame 5B C3"),
        ("48 83 EC i8=frame", "48 83 C4 i8=frame C3"),
        ("55 48 8B EC 48 83 EC i8=frame", "48 8B E5 5D C3"),
        ("48 8B C4 48 89 58 08 48 81 EC i32=frame", "48 81 C4 i32=frame 5B C3"),
        ("4C 8B DC 49 89 5B 08 56 48 83 EC i8=frame", "48 83 C4 i8=frame 5E 5B C3"),
        ("48 89 4C 24 08 48 83 EC i8=frame", "48 83 C4 i8=frame C3"),
        ("40 55 56 57 48 8D 6C 24 d8", "5F 5E 5D C3"),
    ],
    Machine.X86: [
        ("55 8B EC 83 EC i8=frame", "8B E5 5D C3"),
        ("55 8B EC", "5D C3"),
        ("8B FF 55 8B EC 51", "8B E5 5D C3"),
        ("53 56 57", "5F 5E 5B C3"),
        ("55 8B EC 81 EC i32=frame", "C9 C3"),
        ("83 EC i8=frame", "83 C4 i8=frame C3"),
    ],
}

BODY_TEMPLATES = {
    Machine.X64: [
        "B8 i32", "B9 i32", "41 B8 i32", "48 8B 44 24 d8", "48 83 C0 i8", "81 F9 i32",
        "31 C0", "48 89 C1", "48 8D 54 24 d8", "85 C0 74 j8:02 31 C0", "C7 44 24 d8 i32",
        "6B C1 i8", "0F B6 01", "C1 E0 i8", "48 8B 4C 24 d8", "48 03 C1", "89 44 24 d8",
        "48 85 C9 75 j8:03 48 8B C1", "66 83 F8 i8", "0F AF C1",
    ],
    Machine.X86: [
        "B8 i32", "B9 i32", "8B 45 d8", "83 C0 i8", "81 F9 i32", "31 C0", "89 C1",
        "6A i8", "68 i32", "85 C0 74 j8:02 31 C0", "C7 45 d8 i32", "8B 4D d8", "03 C1",
        "89 45 d8", "6B C1 i8", "0F B6 01", "C1 E0 i8",
    ],
}

CALL_TEMPLATE = "E8 r32"


@dataclass
class CorpusSpec:
    machine: str = "x64"
    function_count: int = 16
    min_body: int = 16
    max_body: int = 96
    alignment: int = 16
    padding_value: int = 0xCC
    prologues: list | None = None
    body_templates: list | None = None
    call_density: float = 0.5
    duplicate_fraction: float = 0.0
    immediate_variant_fraction: float = 0.0
    unreferenced_fraction: float = 0.0
    pdata_fraction: float = 1.0
    gt_encoding: str = "exclusive_end"
    seed: int = 0

    def validate(self):
        if self.alignment < 1 or self.alignment & (self.alignment - 1):
            raise SpecInfeasible(f"alignment {self.alignment} is not a power of two")
        for name in ("call_density", "duplicate_fraction", "immediate_variant_fraction",
                     "unreferenced_fraction", "pdata_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise SpecInfeasible(f"{name}={v} outside [0, 1]")
        if self.function_count < 0:
            raise SpecInfeasible("function_count must be >= 0")
        if not 0 < self.min_body <= self.max_body:
            raise SpecInfeasible("need 0 < min_body <= max_body")
        if not 0 <= self.padding_value <= 255:
            raise SpecInfeasible("padding_value is a byte")
        Machine(self.machine)
        Encoding.parse(self.gt_encoding)
        n = self.function_count
        if round(self.duplicate_fraction * n) + round(self.immediate_variant_fraction * n) > max(n - 1, 0):
            raise SpecInfeasible("duplicates and immediate variants need more functions")
        worst = n * (self.max_body + 16 + self.alignment)
        if worst > MAX_TEXT_SIZE:
            raise SpecInfeasible(f"{n} functions of up to {self.max_body} bytes exceed the text section limit")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class SynthFunction:
    index: int
    start: int = 0
    body: bytes = b""
    skeleton: bytes = b""
    prologue_len: int = 0
    callees: list = field(default_factory=list)
    unreferenced: bool = False
    duplicate_of: int | None = None
    variant_of: int | None = None

    @property
    def end(self):
        return self.start + len(self.body)


@dataclass
class SynthSample:
    pe_bytes: bytes
    ground_truth: GroundTruth
    spec: CorpusSpec
    functions: list
    pdata: list
    text_rva: int

    @property
    def entry_point(self):
        return self.functions[0].start if self.functions else 0

    def reachable(self):
        """Function starts reachable from the entry point through call edges."""
        if not self.functions:
            return set()
        seen = {0}
        todo = [0]
        while todo:
            for c in self.functions[todo.pop()].callees:
                if c not in seen:
                    seen.add(c)
                    todo.append(c)
        return {self.functions[i].start for i in seen}


# --- template assembly ------------------------------------------------------

class _Piece:
    """Assembled bytes plus the positions blinded by normalization and pending call fixups."""

    def __init__(self):
        self.data = bytearray()
        self.blind = []
        self.fixups = []  # (position, callee index)

    def __len__(self):
        return len(self.data)


def _emit(piece, template, rng, shared, callee=None):
    for tok in template.split():
        if tok.startswith("i"):
            width, _, name = tok[1:].partition("=")
            n = int(width) // 8
            if name and name in shared:
                val = shared[name]
            else:
                val = rng.getrandbits(8 * n)
                if name:
                    shared[name] = val
            piece.blind.extend(range(len(piece.data), len(piece.data) + n))
            piece.data += val.to_bytes(n, "little")
        elif tok == "r32":
            piece.fixups.append((len(piece.data), callee))
            piece.blind.extend(range(len(piece.data), len(piece.data) + 4))
            piece.data += b"\0\0\0\0"
        elif tok.startswith("j8:"):
            piece.blind.append(len(piece.data))
            piece.data.append(int(tok[3:], 16))
        else:
            piece.data.append(int(tok, 16))


def _fix_disp(template, rng):
    return " ".join(f"{rng.randrange(1, 16) * 8:02X}" if tok == "d8" else tok for tok in template.split())


def _plan_body(rng, spec, templates, prologues, callees):
    """A body "plan" is the template list with displacements fixed; variants
    re-assemble it with fresh immediates."""
    pro, epi = (_fix_disp(t, rng) for t in rng.choice(prologues))
    target = rng.randint(spec.min_body, spec.max_body)
    plan = [("pro", pro, None)]
    size = _template_len(pro) + _template_len(epi)
    middle = []
    while size < target:
        t = _fix_disp(rng.choice(templates), rng)
        middle.append(("mid", t, None))
        size += _template_len(t)
    for c in callees:
        middle.insert(rng.randint(0, len(middle)), ("call", CALL_TEMPLATE, c))
    plan.extend(middle)
    plan.append(("epi", epi, None))
    return plan


def _template_len(t):
    n = 0
    for tok in t.split():
        if tok.startswith("i"):
            n += int(tok[1:].partition("=")[0]) // 8
        elif tok == "r32":
            n += 4
        else:
            n += 1
    return n


def _assemble(plan, rng):
    piece = _Piece()
    shared = {}
    prologue_len = 0
    for kind, t, callee in plan:
        _emit(piece, t, rng, shared, callee)
        if kind == "pro":
            prologue_len = len(piece)
    return piece, prologue_len


# --- PE writer --------------------------------------------------------------

def _align(x, a):
    return (x + a - 1) & ~(a - 1)


class PeBuilder:
    """Writes a structurally valid PE32/PE32+ file from in-memory sections."""

    def __init__(self, machine, image_base=None):
        self.machine = Machine(machine)
        self.image_base = image_base if image_base is not None else (
            0x140000000 if self.machine is Machine.X64 else 0x400000)
        self.sections = []
        self.entry_point = 0
        self.exception_dir = (0, 0)
        self._next_rva = SECTION_ALIGN

    def next_rva(self):
        return self._next_rva

    def add_section(self, name, data, characteristics, virtual_size=None, raw=True):
        rva = self._next_rva
        vsize = virtual_size if virtual_size is not None else max(len(data), 1)
        self.sections.append((name, bytes(data) if raw else b"", rva, vsize, characteristics))
        self._next_rva = _align(rva + vsize, SECTION_ALIGN)
        return rva

    def build(self) -> bytes:
        x64 = self.machine is Machine.X64
        opt_size = 240 if x64 else 224
        e_lfanew = 0x80
        headers_len = e_lfanew + 4 + 20 + opt_size + 40 * len(self.sections)
        size_of_headers = _align(max(headers_len, HEADERS_SIZE), FILE_ALIGN)

        raw_offset = size_of_headers
        table = []
        body = bytearray()
        for name, data, rva, vsize, chars in self.sections:
            raw_size = _align(len(data), FILE_ALIGN) if data else 0
            table.append((name, vsize, rva, raw_size, raw_offset if raw_size else 0, chars))
            body += data + b"\0" * (raw_size - len(data))
            raw_offset += raw_size
        size_of_image = _align(self._next_rva, SECTION_ALIGN)
        code = sum(t[3] for t in table if t[5] & IMAGE_SCN_CNT_CODE)
        init = sum(t[3] for t in table if not t[5] & IMAGE_SCN_CNT_CODE)

        dos = bytearray(e_lfanew)
        dos[0:2] = b"MZ"
        struct.pack_into("<I", dos, 0x3C, e_lfanew)
        coff = struct.pack("<HHIIIHH", IMAGE_FILE_MACHINE_AMD64 if x64 else IMAGE_FILE_MACHINE_I386,
                           len(self.sections), 0, 0, 0, opt_size, 0x22 if x64 else 0x102)
        base_of_code = next((t[2] for t in table if t[5] & IMAGE_SCN_CNT_CODE), 0)
        if x64:
            opt = struct.pack("<HBBIIIII Q II HHHHHH IIII HH QQQQ II",
                              0x20B, 14, 0, code, init, 0, self.entry_point, base_of_code,
                              self.image_base, SECTION_ALIGN, FILE_ALIGN, 6, 0, 0, 0, 6, 0,
                              0, size_of_image, size_of_headers, 0, 3, 0x8160,
                              0x100000, 0x1000, 0x100000, 0x1000, 0, 16)
        else:
            opt = struct.pack("<HBBIIIIII I II HHHHHH IIII HH IIII II",
                              0x10B, 14, 0, code, init, 0, self.entry_point, base_of_code, 0,
                              self.image_base, SECTION_ALIGN, FILE_ALIGN, 6, 0, 0, 0, 6, 0,
                              0, size_of_image, size_of_headers, 0, 3, 0x8140,
                              0x100000, 0x1000, 0x100000, 0x1000, 0, 16)
        dirs = bytearray(16 * 8)
        struct.pack_into("<II", dirs, 8 * 3, *self.exception_dir)
        opt += bytes(dirs)
        assert len(opt) == opt_size
        sec_table = b"".join(
            struct.pack("<8sIIIIIIHHI", name.encode()[:8], vsize, rva, raw_size, raw_off, 0, 0, 0, 0, chars)
            for name, vsize, rva, raw_size, raw_off, chars in table)
        header = bytes(dos) + b"PE\0\0" + coff + opt + sec_table
        header += b"\0" * (size_of_headers - len(header))
        return header + bytes(body)


def build_pe(machine, text: bytes, entry_offset=0, pdata_records=(), unwind_blobs=(), text_rva=None):
    """Assemble an image whose ``.text`` holds ``text``.

    ``pdata_records`` are (begin, end, unwind_index) with begin/end as RVAs;
    ``unwind_index`` selects a blob from ``unwind_blobs`` (raw UNWIND_INFO bytes)
    placed in ``.rdata``. Returns (bytes, text_rva).
    """
    b = PeBuilder(machine)
    rva = b.add_section(".text", text, SCN_TEXT)
    b.entry_point = rva + entry_offset if text else 0
    if pdata_records:
        rdata_rva = b.next_rva()
        blob = bytearray()
        offsets = []
        for u in unwind_blobs:
            blob += b"\0" * (_align(len(blob), 4) - len(blob))
            offsets.append(len(blob))
            blob += u
        b.add_section(".rdata", bytes(blob), SCN_RDATA)
        pdata = b"".join(struct.pack("<III", beg, end, rdata_rva + offsets[u] if u is not None else 0)
                         for beg, end, u in pdata_records)
        prva = b.add_section(".pdata", pdata, SCN_RDATA)
        b.exception_dir = (prva, len(pdata))
    return b.build(), rva


def unwind_info(prolog_size, chain_to=None):
    """Minimal UNWIND_INFO (version 1, no unwind codes), optionally chained to a
    RUNTIME_FUNCTION given as (begin, end, unwind_rva)."""
    flags = 0x4 if chain_to is not None else 0
    blob = bytes([1 | (flags << 3), prolog_size, 0, 0])
    if chain_to is not None:
        blob += struct.pack("<III", *chain_to)
    return blob


# --- generator ---------------------------------------------------------------

def generate(spec: CorpusSpec, sample_id: str | None = None) -> SynthSample:
    spec.validate()
    rng = random.Random(spec.seed)
    machine = Machine(spec.machine)
    prologues = [tuple(p) for p in spec.prologues] if spec.prologues else PROLOGUES[machine]
    templates = spec.body_templates or BODY_TEMPLATES[machine]
    n = spec.function_count
    funcs = [SynthFunction(i) for i in range(n)]

    # roles: function 0 is the entry; duplicates copy a leaf, variants share one base
    n_dup = round(spec.duplicate_fraction * n)
    n_var = round(spec.immediate_variant_fraction * n)
    pool = list(range(1, n))
    rng.shuffle(pool)
    dup_ids = sorted(pool[:n_dup])
    var_ids = sorted(pool[n_dup:n_dup + n_var])
    taken = set(dup_ids) | set(var_ids)
    originals = [i for i in range(n) if i not in taken]
    dup_sources = set()
    for d in dup_ids:
        choices = [i for i in originals if i < d and i not in dup_sources and i != 0] or \
                  [i for i in originals if i < d and i not in dup_sources]
        src = rng.choice(choices) if choices else 0
        dup_sources.add(src)
        funcs[d].duplicate_of = src
    if var_ids:
        base_choices = [i for i in originals if i < var_ids[0] and i not in dup_sources]
        base = rng.choice(base_choices) if base_choices else None
        for v in var_ids:
            funcs[v].variant_of = base

    n_unref = round(spec.unreferenced_fraction * max(n - 1, 0))
    unref = set(rng.sample(range(1, n), n_unref)) if n > 1 else set()
    for i in unref:
        funcs[i].unreferenced = True

    # call edges: each referenced callee gets one caller among earlier non-leaf functions
    leafs = dup_sources | set(dup_ids)
    callers = []
    for j in range(1, n):
        i = j - 1
        if i not in leafs and funcs[i].variant_of is None:
            callers.append(i)
        if j in unref or rng.random() >= spec.call_density:
            continue
        if callers:
            funcs[rng.choice(callers)].callees.append(j)
    for v in var_ids:
        funcs[v].callees = list(funcs[funcs[v].variant_of].callees) if funcs[v].variant_of is not None else []

    plans = {}
    pieces = {}
    for f in funcs:
        if f.duplicate_of is not None:
            continue
        if f.variant_of is not None and f.variant_of in plans:
            plans[f.index] = plans[f.variant_of]
        else:
            plans[f.index] = _plan_body(rng, spec, templates, prologues, f.callees)
        pieces[f.index] = _assemble(plans[f.index], rng)

    text = bytearray()
    text_rva = SECTION_ALIGN
    for f in funcs:
        src = f.duplicate_of if f.duplicate_of is not None else f.index
        piece, plen = pieces[src]
        pad = (-len(text)) % spec.alignment
        text += bytes([spec.padding_value]) * pad
        f.start = text_rva + len(text)
        f.prologue_len = plen
        f.body = bytes(piece.data)
        text += piece.data
    text += bytes([spec.padding_value]) * ((-len(text)) % spec.alignment or spec.alignment)

    for f in funcs:
        if f.duplicate_of is not None:
            piece = pieces[f.duplicate_of][0]
        else:
            piece = pieces[f.index][0]
        body = bytearray(f.body)
        for pos, callee in piece.fixups:
            rel = funcs[callee].start - (f.start + pos + 4)
            body[pos:pos + 4] = struct.pack("<i", rel)
        skeleton = bytearray(body)
        for p in piece.blind:
            skeleton[p] = 0
        f.body = bytes(body)
        f.skeleton = bytes(skeleton)
        off = f.start - text_rva
        text[off:off + len(body)] = body

    pdata = []
    pdata_records = []
    blobs = []
    if machine is Machine.X64:
        for f in funcs:
            if rng.random() < spec.pdata_fraction:
                pdata_records.append((f.start, f.end, len(blobs)))
                blobs.append(unwind_info(f.prologue_len))
    pe_bytes, text_rva_built = build_pe(machine, bytes(text), funcs[0].start - text_rva if funcs else 0,
                                        pdata_records, blobs)
    assert text_rva_built == text_rva
    if pdata_records:
        for beg, end, u in pdata_records:
            pdata.append(RuntimeFunctionEntry(beg, end, 0, blobs[u][1]))

    sid = sample_id or f"synth-{machine.value}-{spec.seed}"
    gt = GroundTruth(sid, machine, Encoding.EXCLUSIVE, tuple(FunctionRecord(f.start, f.end) for f in funcs))
    gt = convert_encoding(gt, spec.gt_encoding)
    return SynthSample(pe_bytes, gt, spec, funcs, pdata, text_rva)


def generate_corpus(spec: CorpusSpec, count: int, prefix="synth"):
    """``count`` samples with seeds ``spec.seed, spec.seed + 1, ...``."""
    out = []
    for k in range(count):
        s = CorpusSpec(**{**spec.to_dict(), "seed": spec.seed + k})
        out.append(generate(s, f"{prefix}-{s.machine}-{s.seed}"))
    return out


def dumps_spec(spec: CorpusSpec) -> str:
    return json.dumps(spec.to_dict(), indent=1, sort_keys=True) + "\n"
