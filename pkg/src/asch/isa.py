"""Decoder and encoder for the A64 instruction subset used by the rewriter.

Only the handful of encodings the scanner, planner, trampoline generator and
emulator care about are understood.  Every other 32-bit word decodes to an
``OPAQUE`` instruction carrying the raw word, which the rest of the package
treats conservatively (unknown register effects, possibly pc-relative).

Register numbering follows the architecture: 0..30 are x0..x30 and 31 is
either ``sp`` or ``xzr`` depending on the operand slot.  Branch immediates are
kept in instruction units (as encoded); memory offsets are kept in bytes.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Optional

__all__ = [
    "Kind", "Cond", "Mode", "Instr", "OutOfRange",
    "decode", "encode", "branch_target", "writes_register", "reads_register",
    "is_pc_relative", "is_branch", "is_direct_branch",
    "decode_bitmask", "encode_bitmask",
    "SP", "XZR", "X8", "X30",
]

SP = XZR = 31
X8 = 8
X30 = 30

MASK32 = 0xFFFF_FFFF
MASK64 = 0xFFFF_FFFF_FFFF_FFFF


class OutOfRange(ValueError):
    """An operand does not fit the field it is encoded into."""


class Kind(enum.Enum):
    SVC = "svc"
    BRK = "brk"
    UDF = "udf"
    MOVZ = "movz"
    MOVK = "movk"
    MOV_REG = "mov_reg"
    ORR_IMM = "orr_imm"
    ADRP = "adrp"
    ADD_IMM = "add_imm"
    SUB_IMM = "sub_imm"
    B = "b"
    BL = "bl"
    B_COND = "b_cond"
    CBZ = "cbz"
    CBNZ = "cbnz"
    TBZ = "tbz"
    TBNZ = "tbnz"
    BR = "br"
    BLR = "blr"
    RET = "ret"
    LDR_IMM = "ldr_imm"
    STR_IMM = "str_imm"
    STP_PRE = "stp_pre"
    LDP_POST = "ldp_post"
    MRS_NZCV = "mrs_nzcv"
    MSR_NZCV = "msr_nzcv"
    NOP = "nop"
    OPAQUE = "opaque"


class Cond(enum.IntEnum):
    EQ = 0
    NE = 1
    CS = 2
    CC = 3
    MI = 4
    PL = 5
    VS = 6
    VC = 7
    HI = 8
    LS = 9
    GE = 10
    LT = 11
    GT = 12
    LE = 13
    AL = 14
    NV = 15


class Mode(enum.Enum):
    """Addressing mode of single-register loads and stores."""

    OFFSET = "offset"  # unsigned, scaled by 8
    PRE = "pre"        # signed 9-bit, writeback before access
    POST = "post"      # signed 9-bit, writeback after access


DIRECT_BRANCHES = frozenset(
    {Kind.B, Kind.BL, Kind.B_COND, Kind.CBZ, Kind.CBNZ, Kind.TBZ, Kind.TBNZ})
INDIRECT_BRANCHES = frozenset({Kind.BR, Kind.BLR, Kind.RET})


@dataclass(frozen=True)
class Instr:
    """One decoded instruction.

    Equality compares the kind and operands only; ``address`` and ``raw`` are
    carried along for reporting.  ``rt`` is the transfer register of loads,
    stores, CBZ/TBZ and MRS/MSR; ``rd`` is the destination of data-processing
    instructions.  ``sf`` selects the 64-bit (x) or 32-bit (w) form.
    """

    kind: Kind
    rd: Optional[int] = None
    rn: Optional[int] = None
    rm: Optional[int] = None
    rt: Optional[int] = None
    rt2: Optional[int] = None
    imm: Optional[int] = None
    shift: int = 0
    cond: Optional[int] = None
    bit: Optional[int] = None
    mode: Optional[Mode] = None
    sf: bool = True
    setflags: bool = False
    address: int = field(default=0, compare=False)
    raw: Optional[int] = field(default=None, compare=False)

    def at(self, address: int) -> "Instr":
        return replace(self, address=address)

    def __str__(self) -> str:
        return disassemble(self)


# --- constructors ----------------------------------------------------------

def svc(imm: int = 0) -> Instr:
    return Instr(Kind.SVC, imm=imm)


def brk(imm: int = 0) -> Instr:
    return Instr(Kind.BRK, imm=imm)


def udf(imm: int = 0) -> Instr:
    return Instr(Kind.UDF, imm=imm)


def nop() -> Instr:
    return Instr(Kind.NOP)


def movz(rd: int, imm: int, shift: int = 0, sf: bool = True) -> Instr:
    return Instr(Kind.MOVZ, rd=rd, imm=imm, shift=shift, sf=sf)


def movk(rd: int, imm: int, shift: int = 0, sf: bool = True) -> Instr:
    return Instr(Kind.MOVK, rd=rd, imm=imm, shift=shift, sf=sf)


def mov_reg(rd: int, rm: int, sf: bool = True) -> Instr:
    return Instr(Kind.MOV_REG, rd=rd, rm=rm, sf=sf)


def orr_imm(rd: int, rn: int, imm: int, sf: bool = True) -> Instr:
    return Instr(Kind.ORR_IMM, rd=rd, rn=rn, imm=imm, sf=sf)


def adrp(rd: int, pages: int) -> Instr:
    return Instr(Kind.ADRP, rd=rd, imm=pages)


def add_imm(rd: int, rn: int, imm: int, shift: int = 0, sf: bool = True,
            setflags: bool = False) -> Instr:
    return Instr(Kind.ADD_IMM, rd=rd, rn=rn, imm=imm, shift=shift, sf=sf,
                 setflags=setflags)


def sub_imm(rd: int, rn: int, imm: int, shift: int = 0, sf: bool = True,
            setflags: bool = False) -> Instr:
    return Instr(Kind.SUB_IMM, rd=rd, rn=rn, imm=imm, shift=shift, sf=sf,
                 setflags=setflags)


def cmp_imm(rn: int, imm: int, sf: bool = True) -> Instr:
    return sub_imm(XZR, rn, imm, sf=sf, setflags=True)


def b(offset: int) -> Instr:
    return Instr(Kind.B, imm=offset)


def bl(offset: int) -> Instr:
    return Instr(Kind.BL, imm=offset)


def b_cond(cond: int, offset: int) -> Instr:
    return Instr(Kind.B_COND, cond=int(cond), imm=offset)


def cbz(rt: int, offset: int, sf: bool = True) -> Instr:
    return Instr(Kind.CBZ, rt=rt, imm=offset, sf=sf)


def cbnz(rt: int, offset: int, sf: bool = True) -> Instr:
    return Instr(Kind.CBNZ, rt=rt, imm=offset, sf=sf)


def tbz(rt: int, bit: int, offset: int) -> Instr:
    return Instr(Kind.TBZ, rt=rt, bit=bit, imm=offset)


def tbnz(rt: int, bit: int, offset: int) -> Instr:
    return Instr(Kind.TBNZ, rt=rt, bit=bit, imm=offset)


def br(rn: int) -> Instr:
    return Instr(Kind.BR, rn=rn)


def blr(rn: int) -> Instr:
    return Instr(Kind.BLR, rn=rn)


def ret(rn: int = X30) -> Instr:
    return Instr(Kind.RET, rn=rn)


def ldr(rt: int, rn: int, imm: int = 0, mode: Mode = Mode.OFFSET) -> Instr:
    return Instr(Kind.LDR_IMM, rt=rt, rn=rn, imm=imm, mode=mode)


def str_(rt: int, rn: int, imm: int = 0, mode: Mode = Mode.OFFSET) -> Instr:
    return Instr(Kind.STR_IMM, rt=rt, rn=rn, imm=imm, mode=mode)


def stp_pre(rt: int, rt2: int, rn: int, imm: int) -> Instr:
    return Instr(Kind.STP_PRE, rt=rt, rt2=rt2, rn=rn, imm=imm)


def ldp_post(rt: int, rt2: int, rn: int, imm: int) -> Instr:
    return Instr(Kind.LDP_POST, rt=rt, rt2=rt2, rn=rn, imm=imm)


def mrs_nzcv(rt: int) -> Instr:
    return Instr(Kind.MRS_NZCV, rt=rt)


def msr_nzcv(rt: int) -> Instr:
    return Instr(Kind.MSR_NZCV, rt=rt)


def opaque(word: int) -> Instr:
    return Instr(Kind.OPAQUE, imm=word & MASK32, raw=word & MASK32)


# --- bit helpers -----------------------------------------------------------

def _sext(value: int, bits: int) -> int:
    sign = 1 << (bits - 1)
    return (value & (sign - 1)) - (value & sign)


def _signed_field(value: int, bits: int, what: str) -> int:
    lo, hi = -(1 << (bits - 1)), (1 << (bits - 1)) - 1
    if not lo <= value <= hi:
        raise OutOfRange(f"{what} {value} outside signed {bits}-bit range")
    return value & ((1 << bits) - 1)


def _unsigned_field(value: int, bits: int, what: str) -> int:
    if not 0 <= value < (1 << bits):
        raise OutOfRange(f"{what} {value} outside unsigned {bits}-bit range")
    return value


def _reg(value: Optional[int], what: str = "register") -> int:
    if value is None or not 0 <= value <= 31:
        raise OutOfRange(f"{what} {value!r} is not a register number")
    return value


def _ror(value: int, amount: int, width: int) -> int:
    amount %= width
    mask = (1 << width) - 1
    return ((value >> amount) | (value << (width - amount))) & mask


def decode_bitmask(n: int, immr: int, imms: int, width: int) -> Optional[int]:
    """DecodeBitMasks for logical immediates; None for reserved encodings."""
    combined = (n << 6) | (~imms & 0x3F)
    if combined == 0:
        return None
    length = combined.bit_length() - 1
    if length < 1 or (1 << length) > width:
        return None
    levels = (1 << length) - 1
    s, r = imms & levels, immr & levels
    if s == levels:
        return None
    esize = 1 << length
    elem = _ror((1 << (s + 1)) - 1, r, esize)
    value = 0
    for i in range(width // esize):
        value |= elem << (i * esize)
    return value


@lru_cache(maxsize=None)
def _bitmask_table(width: int) -> dict:
    table = {}
    for n in ((0, 1) if width == 64 else (0,)):
        for immr in range(width):
            for imms in range(64):
                value = decode_bitmask(n, immr, imms, width)
                if value is not None:
                    table.setdefault(value, (n, immr, imms))
    return table


def encode_bitmask(value: int, width: int = 64) -> tuple:
    """Return (N, immr, imms) encoding ``value`` as a logical immediate."""
    try:
        return _bitmask_table(width)[value]
    except KeyError:
        raise OutOfRange(f"{value:#x} is not a {width}-bit logical immediate") from None


# --- decode ----------------------------------------------------------------

_MOVE_WIDE = {0b10: Kind.MOVZ, 0b11: Kind.MOVK}


def decode(word: int, address: int = 0) -> Instr:
    """Decode one little-endian instruction word; unknown words become OPAQUE."""
    word &= MASK32
    instr = _decode(word)
    return replace(instr, address=address, raw=word)


def _decode(w: int) -> Instr:
    rd = w & 0x1F
    rn = (w >> 5) & 0x1F

    if w & 0xFFE0001F == 0xD4000001:
        return svc((w >> 5) & 0xFFFF)
    if w & 0xFFE0001F == 0xD4200000:
        return brk((w >> 5) & 0xFFFF)
    if w & 0xFFFF0000 == 0:
        return udf(w & 0xFFFF)
    if w == 0xD503201F:
        return nop()

    # move wide immediate: sf opc 100101 hw imm16 rd
    if (w >> 23) & 0x3F == 0b100101:
        opc = (w >> 29) & 3
        sf = bool(w >> 31)
        hw = (w >> 21) & 3
        if opc in _MOVE_WIDE and (sf or hw < 2):
            return Instr(_MOVE_WIDE[opc], rd=rd, imm=(w >> 5) & 0xFFFF,
                         shift=hw * 16, sf=sf)
        return opaque(w)

    # mov (register) = orr rd, zr, rm with no shift
    if w & 0x7FE0FFE0 == 0x2A0003E0:
        return mov_reg(rd, (w >> 16) & 0x1F, sf=bool(w >> 31))

    # orr (immediate)
    if w & 0x7F800000 == 0x32000000:
        sf = bool(w >> 31)
        n = (w >> 22) & 1
        if not sf and n:
            return opaque(w)
        value = decode_bitmask(n, (w >> 16) & 0x3F, (w >> 10) & 0x3F,
                               64 if sf else 32)
        if value is None:
            return opaque(w)
        return orr_imm(rd, rn, value, sf=sf)

    if w & 0x9F000000 == 0x90000000:
        pages = _sext((((w >> 5) & 0x7FFFF) << 2) | ((w >> 29) & 3), 21)
        return adrp(rd, pages)

    # add/sub immediate: sf op S 100010 sh imm12 rn rd
    if (w >> 23) & 0x3F == 0b100010:
        sf = bool(w >> 31)
        op = (w >> 30) & 1
        setflags = bool((w >> 29) & 1)
        kind = Kind.SUB_IMM if op else Kind.ADD_IMM
        return Instr(kind, rd=rd, rn=rn, imm=(w >> 10) & 0xFFF,
                     shift=12 if (w >> 22) & 1 else 0, sf=sf, setflags=setflags)

    if w & 0x7C000000 == 0x14000000:
        kind = Kind.BL if w >> 31 else Kind.B
        return Instr(kind, imm=_sext(w & 0x3FFFFFF, 26))
    if w & 0xFF000010 == 0x54000000:
        return b_cond(w & 0xF, _sext((w >> 5) & 0x7FFFF, 19))
    if w & 0x7E000000 == 0x34000000:
        kind = Kind.CBNZ if (w >> 24) & 1 else Kind.CBZ
        return Instr(kind, rt=rd, imm=_sext((w >> 5) & 0x7FFFF, 19),
                     sf=bool(w >> 31))
    if w & 0x7E000000 == 0x36000000:
        kind = Kind.TBNZ if (w >> 24) & 1 else Kind.TBZ
        bit = ((w >> 31) << 5) | ((w >> 19) & 0x1F)
        return Instr(kind, rt=rd, bit=bit, imm=_sext((w >> 5) & 0x3FFF, 14))

    if w & 0xFFFFFC1F == 0xD61F0000:
        return br(rn)
    if w & 0xFFFFFC1F == 0xD63F0000:
        return blr(rn)
    if w & 0xFFFFFC1F == 0xD65F0000:
        return ret(rn)

    # 64-bit ldr/str, unsigned offset
    if w & 0xFFC00000 == 0xF9400000:
        return ldr(rd, rn, ((w >> 10) & 0xFFF) * 8, Mode.OFFSET)
    if w & 0xFFC00000 == 0xF9000000:
        return str_(rd, rn, ((w >> 10) & 0xFFF) * 8, Mode.OFFSET)
    # 64-bit ldr/str, pre/post-index
    if w & 0xFFA00400 == 0xF8000400:
        imm = _sext((w >> 12) & 0x1FF, 9)
        mode = Mode.PRE if (w >> 11) & 1 else Mode.POST
        if (w >> 22) & 1:
            return ldr(rd, rn, imm, mode)
        return str_(rd, rn, imm, mode)

    if w & 0xFFC00000 == 0xA9800000:
        return stp_pre(rd, (w >> 10) & 0x1F, rn, _sext((w >> 15) & 0x7F, 7) * 8)
    if w & 0xFFC00000 == 0xA8C00000:
        return ldp_post(rd, (w >> 10) & 0x1F, rn, _sext((w >> 15) & 0x7F, 7) * 8)

    if w & 0xFFFFFFE0 == 0xD53B4200:
        return mrs_nzcv(rd)
    if w & 0xFFFFFFE0 == 0xD51B4200:
        return msr_nzcv(rd)

    return opaque(w)


# --- encode ----------------------------------------------------------------

def encode(instr: Instr) -> int:
    """Encode ``instr``; raises OutOfRange when an operand does not fit."""
    k = instr.kind
    sfbit = (1 << 31) if instr.sf else 0

    if k is Kind.OPAQUE:
        return _unsigned_field(instr.imm, 32, "opaque word")
    if k is Kind.SVC:
        return 0xD4000001 | _unsigned_field(instr.imm, 16, "svc imm") << 5
    if k is Kind.BRK:
        return 0xD4200000 | _unsigned_field(instr.imm, 16, "brk imm") << 5
    if k is Kind.UDF:
        return _unsigned_field(instr.imm or 0, 16, "udf imm")
    if k is Kind.NOP:
        return 0xD503201F

    if k in (Kind.MOVZ, Kind.MOVK):
        if instr.shift not in ((0, 16, 32, 48) if instr.sf else (0, 16)):
            raise OutOfRange(f"move-wide shift {instr.shift}")
        base = 0x52800000 if k is Kind.MOVZ else 0x72800000
        return (base | sfbit | (instr.shift // 16) << 21
                | _unsigned_field(instr.imm, 16, "move-wide imm") << 5
                | _reg(instr.rd))
    if k is Kind.MOV_REG:
        return 0x2A0003E0 | sfbit | _reg(instr.rm) << 16 | _reg(instr.rd)
    if k is Kind.ORR_IMM:
        n, immr, imms = encode_bitmask(instr.imm, 64 if instr.sf else 32)
        return (0x32000000 | sfbit | n << 22 | immr << 16 | imms << 10
                | _reg(instr.rn) << 5 | _reg(instr.rd))
    if k is Kind.ADRP:
        pages = _signed_field(instr.imm, 21, "adrp page delta")
        return (0x90000000 | (pages & 3) << 29 | (pages >> 2) << 5
                | _reg(instr.rd))
    if k in (Kind.ADD_IMM, Kind.SUB_IMM):
        if instr.shift not in (0, 12):
            raise OutOfRange(f"add/sub shift {instr.shift}")
        word = 0x11000000 | sfbit
        if k is Kind.SUB_IMM:
            word |= 1 << 30
        if instr.setflags:
            word |= 1 << 29
        if instr.shift:
            word |= 1 << 22
        return (word | _unsigned_field(instr.imm, 12, "add/sub imm") << 10
                | _reg(instr.rn) << 5 | _reg(instr.rd))

    if k in (Kind.B, Kind.BL):
        base = 0x94000000 if k is Kind.BL else 0x14000000
        return base | _signed_field(instr.imm, 26, "branch offset")
    if k is Kind.B_COND:
        return (0x54000000 | _signed_field(instr.imm, 19, "b.cond offset") << 5
                | _unsigned_field(instr.cond, 4, "condition"))
    if k in (Kind.CBZ, Kind.CBNZ):
        base = 0x35000000 if k is Kind.CBNZ else 0x34000000
        return (base | sfbit | _signed_field(instr.imm, 19, "cbz offset") << 5
                | _reg(instr.rt))
    if k in (Kind.TBZ, Kind.TBNZ):
        bit = _unsigned_field(instr.bit, 6, "test bit")
        base = 0x37000000 if k is Kind.TBNZ else 0x36000000
        return (base | (bit >> 5) << 31 | (bit & 0x1F) << 19
                | _signed_field(instr.imm, 14, "tbz offset") << 5
                | _reg(instr.rt))
    if k is Kind.BR:
        return 0xD61F0000 | _reg(instr.rn) << 5
    if k is Kind.BLR:
        return 0xD63F0000 | _reg(instr.rn) << 5
    if k is Kind.RET:
        return 0xD65F0000 | _reg(instr.rn) << 5

    if k in (Kind.LDR_IMM, Kind.STR_IMM):
        load = k is Kind.LDR_IMM
        regs = _reg(instr.rn) << 5 | _reg(instr.rt)
        if instr.mode is Mode.OFFSET:
            if instr.imm % 8:
                raise OutOfRange(f"unscaled offset {instr.imm}")
            scaled = _unsigned_field(instr.imm // 8, 12, "ldr/str offset")
            return (0xF9400000 if load else 0xF9000000) | scaled << 10 | regs
        if instr.mode in (Mode.PRE, Mode.POST):
            word = 0xF8400400 if load else 0xF8000400
            if instr.mode is Mode.PRE:
                word |= 1 << 11
            return word | _signed_field(instr.imm, 9, "ldr/str offset") << 12 | regs
        raise OutOfRange(f"addressing mode {instr.mode!r}")
    if k in (Kind.STP_PRE, Kind.LDP_POST):
        if instr.imm % 8:
            raise OutOfRange(f"unscaled pair offset {instr.imm}")
        base = 0xA9800000 if k is Kind.STP_PRE else 0xA8C00000
        return (base | _signed_field(instr.imm // 8, 7, "pair offset") << 15
                | _reg(instr.rt2) << 10 | _reg(instr.rn) << 5 | _reg(instr.rt))
    if k is Kind.MRS_NZCV:
        return 0xD53B4200 | _reg(instr.rt)
    if k is Kind.MSR_NZCV:
        return 0xD51B4200 | _reg(instr.rt)
    raise OutOfRange(f"cannot encode {k}")


# --- queries ---------------------------------------------------------------

def is_direct_branch(instr: Instr) -> bool:
    return instr.kind in DIRECT_BRANCHES


def is_branch(instr: Instr) -> bool:
    return instr.kind in DIRECT_BRANCHES or instr.kind in INDIRECT_BRANCHES


def branch_target(instr: Instr) -> Optional[int]:
    """Static target of a direct branch, or None."""
    if instr.kind not in DIRECT_BRANCHES:
        return None
    return (instr.address + instr.imm * 4) & MASK64


def writes_register(instr: Instr, reg: int) -> Optional[bool]:
    """True/False whether ``instr`` writes general register ``reg`` (0..30).

    Returns None for OPAQUE words, whose effects are unknown.
    """
    k = instr.kind
    if k is Kind.OPAQUE:
        return None
    if k in (Kind.MOVZ, Kind.MOVK, Kind.MOV_REG, Kind.ORR_IMM, Kind.ADRP,
             Kind.ADD_IMM, Kind.SUB_IMM):
        return instr.rd == reg
    if k in (Kind.LDR_IMM, Kind.MRS_NZCV):
        if instr.rt == reg:
            return True
        return instr.mode in (Mode.PRE, Mode.POST) and instr.rn == reg
    if k is Kind.STR_IMM:
        return instr.mode in (Mode.PRE, Mode.POST) and instr.rn == reg
    if k is Kind.STP_PRE:
        return instr.rn == reg
    if k is Kind.LDP_POST:
        return reg in (instr.rt, instr.rt2, instr.rn)
    if k in (Kind.BL, Kind.BLR):
        return reg == X30
    return False


def reads_register(instr: Instr, reg: int) -> Optional[bool]:
    """True/False whether ``instr`` reads register ``reg`` (31 means sp).

    The zero register is never reported as read.  None for OPAQUE words.
    """
    k = instr.kind
    if k is Kind.OPAQUE:
        return None
    if k is Kind.MOVK:
        return instr.rd == reg
    if k is Kind.MOV_REG:
        return instr.rm == reg and reg != XZR
    if k is Kind.ORR_IMM:
        return instr.rn == reg and reg != XZR
    if k in (Kind.ADD_IMM, Kind.SUB_IMM):
        return instr.rn == reg
    if k in (Kind.CBZ, Kind.CBNZ, Kind.TBZ, Kind.TBNZ, Kind.MSR_NZCV):
        return instr.rt == reg and reg != XZR
    if k in (Kind.BR, Kind.BLR, Kind.RET):
        return instr.rn == reg
    if k is Kind.LDR_IMM or k is Kind.LDP_POST:
        return instr.rn == reg
    if k is Kind.STR_IMM:
        return instr.rn == reg or (instr.rt == reg and reg != XZR)
    if k is Kind.STP_PRE:
        return reg in (instr.rn, instr.rt, instr.rt2)
    return False


def is_pc_relative(instr: Instr) -> bool:
    return (instr.kind is Kind.ADRP or instr.kind in DIRECT_BRANCHES
            or instr.kind is Kind.OPAQUE)


# --- text ------------------------------------------------------------------

def _x(r: Optional[int], sf: bool = True, sp: bool = False) -> str:
    if r == 31:
        return ("sp" if sf else "wsp") if sp else ("xzr" if sf else "wzr")
    return f"{'x' if sf else 'w'}{r}"


def disassemble(i: Instr) -> str:
    k = i.kind
    if k in (Kind.SVC, Kind.BRK, Kind.UDF):
        return f"{k.value} #{i.imm or 0:#x}"
    if k is Kind.NOP:
        return "nop"
    if k in (Kind.MOVZ, Kind.MOVK):
        tail = f", lsl #{i.shift}" if i.shift else ""
        return f"{k.value} {_x(i.rd, i.sf)}, #{i.imm:#x}{tail}"
    if k is Kind.MOV_REG:
        return f"mov {_x(i.rd, i.sf)}, {_x(i.rm, i.sf)}"
    if k is Kind.ORR_IMM:
        return f"orr {_x(i.rd, i.sf, sp=True)}, {_x(i.rn, i.sf)}, #{i.imm:#x}"
    if k is Kind.ADRP:
        return f"adrp {_x(i.rd)}, #{i.imm:+d} pages"
    if k in (Kind.ADD_IMM, Kind.SUB_IMM):
        op = ("add" if k is Kind.ADD_IMM else "sub") + ("s" if i.setflags else "")
        tail = ", lsl #12" if i.shift else ""
        return (f"{op} {_x(i.rd, i.sf, sp=not i.setflags)}, "
                f"{_x(i.rn, i.sf, sp=True)}, #{i.imm:#x}{tail}")
    if k in DIRECT_BRANCHES:
        target = f"{branch_target(i):#x}"
        if k is Kind.B_COND:
            return f"b.{Cond(i.cond).name.lower()} {target}"
        if k in (Kind.CBZ, Kind.CBNZ):
            return f"{k.value} {_x(i.rt, i.sf)}, {target}"
        if k in (Kind.TBZ, Kind.TBNZ):
            return f"{k.value} {_x(i.rt, i.bit >= 32)}, #{i.bit}, {target}"
        return f"{k.value} {target}"
    if k in (Kind.BR, Kind.BLR, Kind.RET):
        return f"{k.value} {_x(i.rn)}"
    if k in (Kind.LDR_IMM, Kind.STR_IMM):
        op = "ldr" if k is Kind.LDR_IMM else "str"
        base = _x(i.rn, sp=True)
        if i.mode is Mode.PRE:
            addr = f"[{base}, #{i.imm}]!"
        elif i.mode is Mode.POST:
            addr = f"[{base}], #{i.imm}"
        else:
            addr = f"[{base}, #{i.imm}]"
        return f"{op} {_x(i.rt)}, {addr}"
    if k is Kind.STP_PRE:
        return f"stp {_x(i.rt)}, {_x(i.rt2)}, [{_x(i.rn, sp=True)}, #{i.imm}]!"
    if k is Kind.LDP_POST:
        return f"ldp {_x(i.rt)}, {_x(i.rt2)}, [{_x(i.rn, sp=True)}], #{i.imm}"
    if k is Kind.MRS_NZCV:
        return f"mrs {_x(i.rt)}, nzcv"
    if k is Kind.MSR_NZCV:
        return f"msr nzcv, {_x(i.rt)}"
    return f".inst {i.imm:#010x}"
