"""Opcode maps for the length/class decoder.

Each map entry is ``(has_modrm, imm_kind, flags)``. ``imm_kind`` names the
immediate layout:

    None   no immediate
    "b"    1 byte
    "w"    2 bytes
    "z"    2 bytes with 16-bit operand size, else 4
    "v"    like "z" but 8 bytes with REX.W (MOV r64, imm64)
    "a"    absolute memory offset, sized by the address size
    "p"    far pointer, offset ("z") plus 2-byte selector
    "e"    ENTER: 2 + 1 bytes
    "jb"   rel8 branch displacement
    "jz"   rel16/rel32 branch displacement
    "g3"   group 3: "b"/"z" only for /0 and /1 (TEST)

Flags: ``INV64`` (invalid in 64-bit mode), ``INV`` (always invalid), ``PREFIX``.
"""

INV64 = 1
INV = 2
PREFIX = 4

LEGACY_PREFIXES = frozenset({0xF0, 0xF2, 0xF3, 0x2E, 0x36, 0x3E, 0x26, 0x64, 0x65, 0x66, 0x67})


def _build_one_byte():
    t = [(False, None, INV)] * 256

    def put(codes, modrm=False, imm=None, flags=0):
        for c in codes:
            t[c] = (modrm, imm, flags)

    for base in range(0x00, 0x40, 0x08):
        put(range(base, base + 4), modrm=True)
        put([base + 4], imm="b")
        put([base + 5], imm="z")
    put([0x06, 0x07, 0x0E, 0x16, 0x17, 0x1E, 0x1F], flags=INV64)
    put([0x26, 0x2E, 0x36, 0x3E], flags=PREFIX)
    put([0x27, 0x2F, 0x37, 0x3F], flags=INV64)
    put([0x0F], flags=0)  # escape, handled by the decoder
    put(range(0x40, 0x60))
    put([0x60, 0x61], flags=INV64)
    put([0x62], modrm=True, flags=INV64)
    put([0x63], modrm=True)
    put([0x64, 0x65, 0x66, 0x67], flags=PREFIX)
    put([0x68], imm="z")
    put([0x69], modrm=True, imm="z")
    put([0x6A], imm="b")
    put([0x6B], modrm=True, imm="b")
    put(range(0x6C, 0x70))
    put(range(0x70, 0x80), imm="jb")
    put([0x80, 0x83], modrm=True, imm="b")
    put([0x81], modrm=True, imm="z")
    put([0x82], modrm=True, imm="b", flags=INV64)
    put(range(0x84, 0x90), modrm=True)
    put(range(0x90, 0xA0))
    put([0x9A], imm="p", flags=INV64)
    put(range(0xA0, 0xA4), imm="a")
    put(range(0xA4, 0xA8))
    put([0xA8], imm="b")
    put([0xA9], imm="z")
    put(range(0xAA, 0xB0))
    put(range(0xB0, 0xB8), imm="b")
    put(range(0xB8, 0xC0), imm="v")
    put([0xC0, 0xC1], modrm=True, imm="b")
    put([0xC2, 0xCA], imm="w")
    put([0xC3, 0xC9, 0xCB, 0xCC, 0xCF])
    put([0xC4, 0xC5], modrm=True, flags=INV64)
    put([0xC6], modrm=True, imm="b")
    put([0xC7], modrm=True, imm="z")
    put([0xC8], imm="e")
    put([0xCD], imm="b")
    put([0xCE], flags=INV64)
    put(range(0xD0, 0xD4), modrm=True)
    put([0xD4, 0xD5], imm="b", flags=INV64)
    put([0xD6], flags=INV64)
    put([0xD7])
    put(range(0xD8, 0xE0), modrm=True)
    put(range(0xE0, 0xE4), imm="jb")
    put(range(0xE4, 0xE8), imm="b")
    put([0xE8, 0xE9], imm="jz")
    put([0xEA], imm="p", flags=INV64)
    put([0xEB], imm="jb")
    put(range(0xEC, 0xF0))
    put([0xF0, 0xF2, 0xF3], flags=PREFIX)
    put([0xF1, 0xF4, 0xF5])
    put([0xF6, 0xF7], modrm=True, imm="g3")
    put(range(0xF8, 0xFE))
    put([0xFE, 0xFF], modrm=True)
    return tuple(t)


def _build_two_byte():
    t = [(True, None, 0)] * 256

    def put(codes, modrm=True, imm=None, flags=0):
        for c in codes:
            t[c] = (modrm, imm, flags)

    put([0x04, 0x0A, 0x0C, 0x0F, 0x24, 0x25, 0x26, 0x27, 0x36, 0x39,
         0x3B, 0x3C, 0x3D, 0x3E, 0x3F, 0x7A, 0x7B, 0xA6, 0xA7], modrm=False, flags=INV)
    put([0x05, 0x06, 0x07, 0x08, 0x09, 0x0B, 0x30, 0x31, 0x32, 0x33, 0x34, 0x35, 0x37,
         0x0E, 0x77, 0xA0, 0xA1, 0xA2, 0xA8, 0xA9, 0xAA], modrm=False)
    put(range(0x70, 0x74), imm="b")
    put(range(0x80, 0x90), modrm=False, imm="jz")
    put([0xA4, 0xAC, 0xBA, 0xC2, 0xC4, 0xC5, 0xC6], imm="b")
    put(range(0xC8, 0xD0), modrm=False)
    return tuple(t)


ONE_BYTE = _build_one_byte()
TWO_BYTE = _build_two_byte()

# opcodes of the 0F map that carry an imm8 when reached through VEX/EVEX
VEX_0F_IMM8 = frozenset({0x70, 0x71, 0x72, 0x73, 0xC2, 0xC4, 0xC5, 0xC6})

# group slots with no defined instruction: (opcode, reg) pairs; mod-dependent ones are in the decoder
INVALID_GROUP_SLOTS = frozenset(
    [(0xFE, r) for r in range(2, 8)]
    + [(0xFF, 7)]
    + [(0x8F, r) for r in range(1, 8)]
    + [(0x8C, 6), (0x8C, 7), (0x8E, 1), (0x8E, 6), (0x8E, 7)]
)

# x87 escapes: /reg values undefined for memory operands
X87_MEM_INVALID = {0xD9: {1}, 0xDB: {4, 6}, 0xDD: {5}}


def _ranges(*spans):
    out = set()
    for lo, hi in spans:
        out.update(range(lo, hi + 1))
    return frozenset(out)


# x87 register forms (second byte C0..FF) that execute; includes the D9 D8-DF
# fstp alias and the legacy DB E0/E1/E4 control ops that run as no-ops
X87_REG_VALID = {
    0xD8: _ranges((0xC0, 0xFF)),
    0xD9: _ranges((0xC0, 0xD0), (0xD8, 0xE1), (0xE4, 0xE5), (0xE8, 0xEE), (0xF0, 0xFF)),
    0xDA: _ranges((0xC0, 0xDF), (0xE9, 0xE9)),
    0xDB: _ranges((0xC0, 0xE4), (0xE8, 0xF7)),
    0xDC: _ranges((0xC0, 0xCF), (0xE0, 0xFF)),
    0xDD: _ranges((0xC0, 0xC7), (0xD0, 0xEF)),
    0xDE: _ranges((0xC0, 0xCF), (0xD9, 0xD9), (0xE0, 0xFF)),
    0xDF: _ranges((0xC0, 0xC7), (0xE0, 0xE0), (0xE8, 0xF7)),
}

# 0F 71/72/73 shift groups: register form only, these /reg values
SSE_SHIFT_GROUPS = {0x71: (2, 4, 6), 0x72: (2, 4, 6), 0x73: (2, 3, 6, 7)}

# opcodes that accept LOCK (memory destination only); group opcodes list allowed /reg values
LOCKABLE = {
    **{(op,): None for base in range(0x00, 0x38, 0x08) for op in (base, base + 1)},
    (0x80,): range(0, 7), (0x81,): range(0, 7), (0x82,): range(0, 7), (0x83,): range(0, 7),
    (0x86,): None, (0x87,): None,
    (0xF6,): (2, 3), (0xF7,): (2, 3), (0xFE,): (0, 1), (0xFF,): (0, 1),
    (0x0F, 0xB0): None, (0x0F, 0xB1): None, (0x0F, 0xC0): None, (0x0F, 0xC1): None,
    (0x0F, 0xC7): (1,), (0x0F, 0xAB): None, (0x0F, 0xB3): None, (0x0F, 0xBB): None,
    (0x0F, 0xBA): (5, 6, 7),
}


# --- mandatory prefixes in the 0F map ----------------------------------------
# op2 -> (allowed mandatory prefixes, prefixes whose form is memory-only,
#         prefixes whose form is register-only). None means no prefix.
# F2/F3 take precedence over 66 when several are present.
_N, _66, _F3, _F2 = None, 0x66, 0xF3, 0xF2
_ALL = frozenset({_N, _66, _F3, _F2})
_PS_PD = frozenset({_N, _66})


def _sse(allowed, mem=(), reg=()):
    return (frozenset(allowed), frozenset(mem), frozenset(reg))


SSE_PREFIXES = {
    0x10: _sse(_ALL), 0x11: _sse(_ALL),
    0x12: _sse(_ALL, mem=[_66]), 0x13: _sse(_PS_PD, mem=_PS_PD),
    0x14: _sse(_PS_PD), 0x15: _sse(_PS_PD),
    0x16: _sse({_N, _66, _F3}, mem=[_66]), 0x17: _sse(_PS_PD, mem=_PS_PD),
    0x28: _sse(_PS_PD), 0x29: _sse(_PS_PD), 0x2A: _sse(_ALL), 0x2B: _sse(_PS_PD, mem=_PS_PD),
    0x2C: _sse(_ALL), 0x2D: _sse(_ALL), 0x2E: _sse(_PS_PD), 0x2F: _sse(_PS_PD),
    0x50: _sse(_PS_PD, reg=_PS_PD), 0x51: _sse(_ALL), 0x52: _sse({_N, _F3}), 0x53: _sse({_N, _F3}),
    0x54: _sse(_PS_PD), 0x55: _sse(_PS_PD), 0x56: _sse(_PS_PD), 0x57: _sse(_PS_PD),
    0x58: _sse(_ALL), 0x59: _sse(_ALL), 0x5A: _sse(_ALL), 0x5B: _sse({_N, _66, _F3}),
    0x5C: _sse(_ALL), 0x5D: _sse(_ALL), 0x5E: _sse(_ALL), 0x5F: _sse(_ALL),
    **{op: _sse(_PS_PD) for op in range(0x60, 0x6C)},
    0x6C: _sse({_66}), 0x6D: _sse({_66}), 0x6E: _sse(_PS_PD), 0x6F: _sse({_N, _66, _F3}),
    0x70: _sse(_ALL), 0x71: _sse(_PS_PD), 0x72: _sse(_PS_PD), 0x73: _sse(_PS_PD),
    0x74: _sse(_PS_PD), 0x75: _sse(_PS_PD), 0x76: _sse(_PS_PD), 0x77: _sse({_N}),
    0x7C: _sse({_66, _F2}), 0x7D: _sse({_66, _F2}), 0x7E: _sse({_N, _66, _F3}), 0x7F: _sse({_N, _66, _F3}),
    0xB8: _sse({_F3}), 0xBC: _sse({_N, _66, _F3}), 0xBD: _sse({_N, _66, _F3}),
    0xC2: _sse(_ALL), 0xC3: _sse({_N}, mem=[_N]), 0xC4: _sse(_PS_PD), 0xC5: _sse(_PS_PD, reg=_PS_PD),
    0xC6: _sse(_PS_PD),
    0xD0: _sse({_66, _F2}),
    **{op: _sse(_PS_PD) for op in range(0xD1, 0xD6)},
    0xD6: _sse({_66, _F3, _F2}, reg=[_F3, _F2]), 0xD7: _sse(_PS_PD, reg=_PS_PD),
    **{op: _sse(_PS_PD) for op in range(0xD8, 0xE6)},
    0xE6: _sse({_66, _F3, _F2}), 0xE7: _sse(_PS_PD, mem=_PS_PD),
    **{op: _sse(_PS_PD) for op in range(0xE8, 0xF0)},
    0xF0: _sse({_F2}, mem=[_F2]),
    **{op: _sse(_PS_PD) for op in range(0xF1, 0xF7)},
    0xF7: _sse(_PS_PD, reg=_PS_PD),
    **{op: _sse(_PS_PD) for op in range(0xF8, 0xFF)},
}


# --- VEX opcode maps ----------------------------------------------------------
# map -> {opcode: allowed implied prefixes}; pp 0..3 stands for none/66/F3/F2.
_P0, _P66, _PF3, _PF2 = 0, 1, 2, 3


def _vmap(spec):
    out = {}
    for ops, pps in spec:
        for op in ops:
            out[op] = frozenset(pps)
    return out


_VALL = (_P0, _P66, _PF3, _PF2)
_VPS = (_P0, _P66)
_V66 = (_P66,)

VEX_OPCODES = {
    1: _vmap([
        ([0x10, 0x11, 0x51, 0x58, 0x59, 0x5A, 0x5C, 0x5D, 0x5E, 0x5F, 0xC2], _VALL),
        ([0x12], _VALL), ([0x16], (_P0, _P66, _PF3)), ([0x13, 0x14, 0x15, 0x17], _VPS),
        ([0x28, 0x29, 0x2B, 0x2E, 0x2F, 0x50, 0x54, 0x55, 0x56, 0x57, 0xC6], _VPS),
        ([0x2A, 0x2C, 0x2D], (_PF3, _PF2)), ([0x52, 0x53], (_P0, _PF3)), ([0x5B], (_P0, _P66, _PF3)),
        (range(0x60, 0x6F), _V66), ([0x6F, 0x7E, 0x7F], (_P66, _PF3)), ([0x70], (_P66, _PF3, _PF2)),
        ([0x71, 0x72, 0x73, 0x74, 0x75, 0x76, 0xC4, 0xC5, 0xD6, 0xD7, 0xE7, 0xF7], _V66),
        ([0x77, 0xAE], (_P0,)), ([0x7C, 0x7D, 0xD0], (_P66, _PF2)),
        (range(0xD1, 0xD6), _V66), (range(0xD8, 0xE6), _V66), ([0xE6], (_P66, _PF3, _PF2)),
        (range(0xE8, 0xF0), _V66), ([0xF0], (_PF2,)), (range(0xF1, 0xF7), _V66), (range(0xF8, 0xFF), _V66),
    ]),
    2: _vmap([
        (list(range(0x00, 0x10)) + [0x13, 0x16, 0x17, 0x18, 0x19, 0x1A, 0x1C, 0x1D, 0x1E]
         + list(range(0x20, 0x26)) + list(range(0x28, 0x2F + 1)) + list(range(0x30, 0x38))
         + list(range(0x36, 0x41)) + [0x41, 0x45, 0x46, 0x47, 0x58, 0x59, 0x5A, 0x78, 0x79, 0x8C, 0x8E]
         + list(range(0x90, 0x94)) + list(range(0x96, 0xA0)) + list(range(0xA6, 0xB0))
         + list(range(0xB6, 0xC0)) + list(range(0xDB, 0xE0)), _V66),
        ([0xF2, 0xF3], (_P0,)), ([0xF5], (_P0, _PF3, _PF2)), ([0xF6], (_PF2,)), ([0xF7], _VALL),
    ]),
    3: _vmap([
        ([0x00, 0x01, 0x02, 0x04, 0x05, 0x06] + list(range(0x08, 0x10)) + [0x14, 0x15, 0x16, 0x17, 0x18,
         0x19, 0x1D, 0x20, 0x21, 0x22, 0x38, 0x39, 0x40, 0x41, 0x42, 0x44, 0x46, 0x4A, 0x4B, 0x4C,
         0x60, 0x61, 0x62, 0x63, 0xDF], _V66),
        ([0xF0], (_PF2,)),
    ]),
}

# map-1 (opcode, pp) forms whose VEX.vvvv operand is unused and must be 1111b
VEX_NO_VVVV = frozenset(
    [(op, pp) for op in (0x28, 0x29, 0x2B, 0x2C, 0x2D, 0x2E, 0x2F, 0x50, 0x5B, 0x6E, 0x6F, 0x70,
                         0x7E, 0x7F, 0xD6, 0xD7, 0xE6, 0xE7, 0xF0, 0xF7, 0xC5) for pp in range(4)]
    + [(0x51, 0), (0x51, 1), (0x52, 0), (0x53, 0), (0x5A, 0), (0x5A, 1),
       (0x12, 2), (0x12, 3), (0x16, 2)]
)

# EVEX maps 2 and 3 mostly imply 66; these opcodes also take F3 or F2
EVEX_MAP2_F3 = frozenset(list(range(0x10, 0x16)) + list(range(0x20, 0x26)) + [0x26, 0x27, 0x28, 0x29, 0x2A]
                         + list(range(0x30, 0x36)) + [0x38, 0x39, 0x3A, 0x52, 0x72])
EVEX_MAP2_F2 = frozenset({0x52, 0x53, 0x68, 0x72, 0x9A, 0x9B, 0xAA, 0xAB})
EVEX_MAP1_EXTRA = frozenset({0x78, 0x79, 0x7A, 0x7B})
