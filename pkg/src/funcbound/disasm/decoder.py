"""Table-driven x86/x64 instruction decoder.

Decodes length, a coarse control-flow class and the positions of immediate,
displacement and branch-offset fields. It never raises on bad input: anything
it cannot decode comes back as a one-byte ``invalid`` instruction so sweeps
always make progress.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

from .tables import (
    INV,
    INV64,
    INVALID_GROUP_SLOTS,
    LEGACY_PREFIXES,
    LOCKABLE,
    ONE_BYTE,
    SSE_SHIFT_GROUPS,
    X87_MEM_INVALID,
    X87_REG_VALID,
    PREFIX,
    SSE_PREFIXES,
    TWO_BYTE,
    EVEX_MAP1_EXTRA,
    EVEX_MAP2_F2,
    EVEX_MAP2_F3,
    VEX_0F_IMM8,
    VEX_NO_VVVV,
    VEX_OPCODES,
)

MAX_INSN_LEN = 15


class InsnClass(str, enum.Enum):
    CALL_REL = "call_rel"
    CALL_INDIRECT = "call_indirect"
    JMP_REL = "jmp_rel"
    JMP_INDIRECT = "jmp_indirect"
    JCC = "jcc"
    RET = "ret"
    INT3 = "int3"
    NOP = "nop"
    OTHER = "other"
    INVALID = "invalid"


REL_CLASSES = frozenset({InsnClass.CALL_REL, InsnClass.JMP_REL, InsnClass.JCC})


class DecodeMode(enum.IntEnum):
    BITS32 = 32
    BITS64 = 64

    @classmethod
    def for_machine(cls, machine):
        return cls.BITS64 if getattr(machine, "bits", machine) == 64 else cls.BITS32


@dataclass(frozen=True)
class Instruction:
    offset: int
    length: int
    cls: InsnClass
    imm_spans: tuple = ()
    disp_span: tuple | None = None
    rel_target: int | None = None
    rel_span: tuple | None = None
    address: int | None = None
    truncated: bool = False
    target_mapped: bool | None = None

    @property
    def end(self):
        return self.offset + self.length

    @property
    def start_address(self):
        return self.offset if self.address is None else self.address

    @property
    def end_address(self):
        return self.start_address + self.length


def _invalid(offset, address):
    return Instruction(offset, 1, InsnClass.INVALID, address=address)


class _Need(Exception):
    """Internal: the encoding runs past the available bytes."""


def _modrm_len(data, pos, end, addr16):
    """Size of ModRM + SIB + displacement and the displacement's (start, width)."""
    if pos >= end:
        raise _Need
    modrm = data[pos]
    mod, rm = modrm >> 6, modrm & 7
    if mod == 3:
        return 1, None
    if addr16:
        if mod == 0:
            disp = 2 if rm == 6 else 0
        else:
            disp = 1 if mod == 1 else 2
        return 1 + disp, ((1, disp) if disp else None)
    size = 1
    if rm == 4:
        if pos + 1 >= end:
            raise _Need
        size = 2
        base = data[pos + 1] & 7
        if mod == 0 and base == 5:
            return 6, (2, 4)
    if mod == 0:
        if rm == 5:
            return 5, (1, 4)
        return size, None
    disp = 1 if mod == 1 else 4
    return size + disp, (size, disp)


def decode_one(data, offset: int, mode: DecodeMode = DecodeMode.BITS64, address: int | None = None) -> Instruction:
    """Decode the instruction at ``data[offset]``.

    ``address`` is the RVA of ``data[offset]``; relative branch targets are
    computed from it (or from ``offset`` when omitted).
    """
    try:
        return _decode(data, offset, mode, address)
    except _Need:
        return _invalid(offset, address)


def _decode(data, offset, mode, address):
    end = min(len(data), offset + MAX_INSN_LEN)
    if offset >= end:
        raise _Need
    long_mode = mode == DecodeMode.BITS64
    pos = offset
    opsize16 = addr_override = lock = has66 = False
    rep = None
    rex = 0
    while True:
        if pos >= end:
            raise _Need
        b = data[pos]
        if b in LEGACY_PREFIXES:
            if b == 0x66:
                opsize16 = has66 = True
            elif b == 0x67:
                addr_override = True
            elif b in (0xF2, 0xF3):
                rep = b
            elif b == 0xF0:
                lock = True
            rex = 0
            pos += 1
            continue
        if long_mode and 0x40 <= b <= 0x4F:
            rex = b
            pos += 1
            continue
        break

    rex_w = bool(rex & 8)
    if rex_w:
        opsize16 = False
    addr16 = addr_override and not long_mode
    op = data[pos]
    pos += 1
    base = address if address is not None else offset
    vex_map = None

    if op == 0x0F:
        if pos >= end:
            raise _Need
        op2 = data[pos]
        pos += 1
        if op2 in (0x38, 0x3A):
            if pos >= end:
                raise _Need
            op3 = data[pos]
            pos += 1
            entry = (True, "b" if op2 == 0x3A else None, 0)
            opcode = (0x0F, op2, op3)
        else:
            entry = TWO_BYTE[op2]
            opcode = (0x0F, op2)
    elif op in (0xC4, 0xC5, 0x62) and (long_mode or (pos < end and data[pos] >> 6 == 3)):
        if rex or has66 or rep or lock:
            return _invalid(offset, address)
        return _decode_vex(data, offset, pos, end, op, address)
    else:
        entry = ONE_BYTE[op]
        opcode = (op,)

    has_modrm, imm_kind, flags = entry
    if flags & INV or flags & PREFIX or (long_mode and flags & INV64):
        return _invalid(offset, address)

    modrm = None
    disp_span = None
    if has_modrm:
        if pos >= end:
            raise _Need
        modrm = data[pos]
        mlen, disp = _modrm_len(data, pos, end, addr16)
        if disp:
            disp_span = (pos - offset + disp[0], disp[1])
        pos += mlen
        if not _modrm_valid(opcode, modrm, opsize16):
            return _invalid(offset, address)
        if len(opcode) == 2 and opcode[1] in SSE_PREFIXES:
            allowed, mem_only, reg_only = SSE_PREFIXES[opcode[1]]
            mandatory = rep or (0x66 if has66 else None)
            is_reg = modrm >> 6 == 3

            def _ok(m):
                return m in allowed and not (is_reg and m in mem_only) and not (not is_reg and m in reg_only)

            # an unlisted prefix followed by REX.W is reserved; decode the plain form
            if not _ok(mandatory) and not (rex_w and _ok(None)):
                return _invalid(offset, address)
    if lock and not _lockable(opcode, modrm):
        return _invalid(offset, address)

    imm_len = _imm_size(imm_kind, opcode, modrm, opsize16, rex_w, long_mode, addr_override)
    imm_spans = ()
    rel_span = None
    rel_target = None
    if imm_len:
        if pos + imm_len > end:
            raise _Need
        span = (pos - offset, imm_len)
        imm_spans = (span,)
        if imm_kind in ("jb", "jz"):
            rel_span = span
            rel = int.from_bytes(data[pos:pos + imm_len], "little", signed=True)
            rel_target = base + (pos + imm_len - offset) + rel
            if not long_mode and opsize16:
                rel_target &= 0xFFFF
        elif imm_kind == "e":
            imm_spans = ((span[0], 2), (span[0] + 2, 1))
        elif imm_kind == "p":
            imm_spans = ((span[0], imm_len - 2), (span[0] + imm_len - 2, 2))
        pos += imm_len
    length = pos - offset
    if length > MAX_INSN_LEN:
        return _invalid(offset, address)

    cls = _classify(opcode, modrm, rep, rex)
    return Instruction(offset, length, cls, imm_spans, disp_span,
                       rel_target if cls in REL_CLASSES else None,
                       rel_span, address)


def _imm_size(kind, opcode, modrm, opsize16, rex_w, long_mode, addr_override):
    if kind is None:
        return 0
    if kind in ("b", "jb"):
        return 1
    if kind == "w":
        return 2
    if kind == "e":
        return 3
    if kind == "z":
        return 2 if opsize16 else 4
    if kind == "jz":
        return 2 if (opsize16 and not long_mode) else 4
    if kind == "v":
        return 8 if rex_w else (2 if opsize16 else 4)
    if kind == "a":
        if long_mode:
            return 4 if addr_override else 8
        return 2 if addr_override else 4
    if kind == "p":
        return (2 if opsize16 else 4) + 2
    if kind == "g3":
        if (modrm >> 3) & 7 > 1:
            return 0
        return 1 if opcode[0] == 0xF6 else (2 if opsize16 else 4)
    raise ValueError(kind)


def _lockable(opcode, modrm):
    if modrm is None or modrm >> 6 == 3 or opcode not in LOCKABLE:
        return False
    regs = LOCKABLE[opcode]
    return regs is None or (modrm >> 3) & 7 in regs


def _modrm_valid(opcode, modrm, opsize16):
    reg = (modrm >> 3) & 7
    mod = modrm >> 6
    if len(opcode) == 1:
        op = opcode[0]
        if 0xD8 <= op <= 0xDF:
            if mod == 3:
                return modrm in X87_REG_VALID[op]
            return reg not in X87_MEM_INVALID.get(op, ())
        if (op, reg) in INVALID_GROUP_SLOTS:
            return False
        if op in (0xC6, 0xC7) and reg != 0:
            # only XABORT/XBEGIN (C6 F8 / C7 F8) live outside /0
            return modrm == 0xF8
        if op in (0xC4, 0xC5, 0x62, 0x8D) and mod == 3:
            return False
        if op == 0xFF and reg in (3, 5) and mod == 3:
            return False
        return True
    if len(opcode) == 2:
        op2 = opcode[1]
        if op2 == 0x00 and reg > 5:
            return False
        if op2 == 0xBA and reg < 4:
            return False
        if op2 == 0x18 and mod == 3 and reg < 4:
            return False
        if op2 in SSE_SHIFT_GROUPS:
            if mod != 3 or reg not in SSE_SHIFT_GROUPS[op2]:
                return False
            # PSRLDQ/PSLLDQ exist only in the 66-prefixed form
            return op2 != 0x73 or reg not in (3, 7) or opsize16
    return True


def _classify(opcode, modrm, rep, rex):
    op = opcode[0]
    if len(opcode) == 1:
        if op == 0xE8:
            return InsnClass.CALL_REL
        if op in (0xE9, 0xEB):
            return InsnClass.JMP_REL
        if 0x70 <= op <= 0x7F or 0xE0 <= op <= 0xE3:
            return InsnClass.JCC
        if op in (0xC2, 0xC3, 0xCA, 0xCB):
            return InsnClass.RET
        if op == 0xCC:
            return InsnClass.INT3
        if op == 0x90 and rep != 0xF3 and not rex & 1:
            return InsnClass.NOP
        if op == 0xFF:
            reg = (modrm >> 3) & 7
            if reg in (2, 3):
                return InsnClass.CALL_INDIRECT
            if reg in (4, 5):
                return InsnClass.JMP_INDIRECT
        if op == 0x9A:
            return InsnClass.CALL_INDIRECT
        if op == 0xEA:
            return InsnClass.JMP_INDIRECT
        return InsnClass.OTHER
    if len(opcode) == 2:
        op2 = opcode[1]
        if 0x80 <= op2 <= 0x8F:
            return InsnClass.JCC
        # 0F 1F and the reserved 0F 18 /4-/7 slots are hint NOPs
        if op2 == 0x1F or (op2 == 0x18 and (modrm >> 3) & 7 >= 4):
            return InsnClass.NOP
    return InsnClass.OTHER


def _decode_vex(data, offset, pos, end, op, address):
    """VEX (C4/C5) and EVEX (62) encodings: length only, class ``other``."""
    if op == 0xC5:
        nbytes = 1
    elif op == 0xC4:
        nbytes = 2
    else:
        nbytes = 3
    if pos + nbytes >= end:
        raise _Need
    p = data[pos:pos + nbytes]
    if op == 0xC5:
        vmap, pp, vvvv = 1, p[0] & 3, (p[0] >> 3) & 0xF
    elif op == 0xC4:
        vmap, pp, vvvv = p[0] & 0x1F, p[1] & 3, (p[1] >> 3) & 0xF
    else:
        # EVEX: P0 bits 3:2 and P1 bit 2 are fixed
        if p[0] & 0x0C or not p[1] & 0x04:
            return _invalid(offset, address)
        vmap, pp, vvvv = p[0] & 3, p[1] & 3, (p[1] >> 3) & 0xF
    pos += nbytes
    if vmap not in (1, 2, 3):
        return _invalid(offset, address)
    opc = data[pos]
    pos += 1
    if op == 0x62 and vmap == 1 and opc not in EVEX_MAP1_EXTRA:
        allowed = VEX_OPCODES[1].get(opc)
        if allowed is None or pp not in allowed:
            return _invalid(offset, address)
    if op == 0x62 and vmap != 1 and pp != 1:
        if vmap == 3 or opc not in (EVEX_MAP2_F3 if pp == 2 else EVEX_MAP2_F2 if pp == 3 else ()):
            return _invalid(offset, address)
    if op != 0x62:
        allowed = VEX_OPCODES[vmap].get(opc)
        if allowed is None or pp not in allowed:
            return _invalid(offset, address)
        if vmap == 1 and (opc, pp) in VEX_NO_VVVV and vvvv != 0xF:
            return _invalid(offset, address)
        if vmap == 1 and opc == 0x77:
            return Instruction(offset, pos - offset, InsnClass.OTHER, address=address)
    mlen, disp = _modrm_len(data, pos, end, False)
    disp_span = (pos - offset + disp[0], disp[1]) if disp else None
    pos += mlen
    imm_spans = ()
    if vmap == 3 or (vmap == 1 and opc in VEX_0F_IMM8):
        if pos >= end:
            raise _Need
        imm_spans = ((pos - offset, 1),)
        pos += 1
    if pos - offset > MAX_INSN_LEN:
        return _invalid(offset, address)
    return Instruction(offset, pos - offset, InsnClass.OTHER, imm_spans, disp_span, address=address)
