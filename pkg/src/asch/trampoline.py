"""Three-level trampoline code generation.

L1 is a 16-byte springboard in the low 64 KiB that loads a 48-bit L2 address
into x8 and jumps.  L2 is a 24-byte per-site block that pushes the return
address, replays the site's x8 assignment and branches to L3.  L3 is one
shared block that saves the register context, calls the hook gate, restores
the context, performs the system call unless the hook claimed it, pops the
return address and jumps back.

L3 frame, relative to the frame base handed to the hook gate in x0::

    +0      claim flag (non-zero: hook supplied the result in the x0 slot)
    +16+8i  saved xi, i = 0..30
    +264    saved NZCV
    +272    return address pushed by L2 (+280 is padding)
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

from . import isa
from .isa import Instr, Mode, SP, X8, XZR, X30

__all__ = [
    "L1_SIZE", "L2_SIZE", "FRAME_SIZE", "CLAIM_OFFSET", "NZCV_OFFSET",
    "RET_OFFSET", "reg_offset", "gen_l1", "gen_l2", "gen_l3", "gen_gate_stub",
    "HookOrigin", "HookEvent", "TrampolineLayout", "TrampolineError",
    "Unreachable", "NotRelocatable", "word_of",
]

L1_SIZE = 16
L2_SIZE = 24
FRAME_SIZE = 272
CLAIM_OFFSET = 0
NZCV_OFFSET = 264
RET_OFFSET = FRAME_SIZE
SCRATCH = 9
B_RANGE = 128 << 20
ADDR_LIMIT = 1 << 48


def reg_offset(reg: int) -> int:
    return 16 + 8 * reg


class TrampolineError(Exception):
    pass


class Unreachable(TrampolineError):
    pass


class NotRelocatable(TrampolineError):
    pass


class HookOrigin(enum.Enum):
    TRAMPOLINE = "Trampoline"
    SIGNAL_BRK = "SignalBrk"
    SIGNAL_UDF = "SignalUdf"
    SIGNAL_FAULT = "SignalFault"


@dataclass(frozen=True)
class HookEvent:
    sysno: int
    args: tuple
    return_addr: int
    origin: HookOrigin
    sp: int = 0  # caller's sp at the SVC site

    def to_json(self) -> dict:
        return {"sysno": self.sysno, "args": [f"{a:#x}" for a in self.args],
                "return_addr": f"{self.return_addr:#x}",
                "origin": self.origin.value, "sp": f"{self.sp:#x}"}


def _load48(rd: int, value: int) -> list:
    if not 0 <= value < ADDR_LIMIT:
        raise isa.OutOfRange(f"{value:#x} does not fit in 48 bits")
    return [isa.movz(rd, value & 0xFFFF),
            isa.movk(rd, (value >> 16) & 0xFFFF, 16),
            isa.movk(rd, (value >> 32) & 0xFFFF, 32)]


def _place(instrs: list, base: int) -> list:
    return [i.at(base + 4 * n) for n, i in enumerate(instrs)]


def gen_l1(l2_addr: int, self_addr: int = 0) -> list:
    return _place(_load48(X8, l2_addr) + [isa.br(X8)], self_addr)


def gen_l2(site, l3_addr: int, self_addr: int) -> list:
    """Per-site block: push svc_addr+4, replay the assign, branch to L3."""
    assign = site.assign_instr
    if assign is None or isa.is_pc_relative(assign):
        raise NotRelocatable(f"site {site.svc_addr:#x} has no relocatable x8 assignment")
    ret_addr = site.svc_addr + 4
    branch_at = self_addr + 20
    delta = l3_addr - branch_at
    if not -B_RANGE <= delta < B_RANGE or delta % 4:
        raise Unreachable(f"L3 {l3_addr:#x} out of branch range from {branch_at:#x}")
    body = _load48(X8, ret_addr) + [
        isa.str_(X8, SP, -16, Mode.PRE),
        assign,
        isa.b(delta // 4),
    ]
    return _place(body, self_addr)


def gen_l3(hook_gate_addr: int, self_addr: int = 0) -> list:
    body = [isa.str_(X30, SP, -16, Mode.PRE)]
    for lo in range(28, -1, -2):
        body.append(isa.stp_pre(lo, lo + 1, SP, -16))
    body += [
        isa.mrs_nzcv(SCRATCH),
        isa.str_(SCRATCH, SP, NZCV_OFFSET - 16),   # sp is 16 above the frame base here
        isa.str_(XZR, SP, -16, Mode.PRE),           # claim flag = 0
        isa.add_imm(0, SP, 0),                      # x0 = frame base
    ]
    body += _load48(SCRATCH, hook_gate_addr)
    body += [
        isa.blr(SCRATCH),
        isa.ldr(SCRATCH, SP, NZCV_OFFSET),
        isa.msr_nzcv(SCRATCH),
    ]
    body += [isa.ldr(r, SP, reg_offset(r)) for r in range(31) if r != SCRATCH]
    # x9 is reloaded on both paths so the kernel sees the caller's registers
    body += [
        isa.ldr(SCRATCH, SP, CLAIM_OFFSET),
        isa.cbz(SCRATCH, 3),
        isa.ldr(SCRATCH, SP, reg_offset(SCRATCH)),  # claimed: skip the svc
        isa.b(3),
        isa.ldr(SCRATCH, SP, reg_offset(SCRATCH)),
        isa.svc(0),
        isa.add_imm(SP, SP, FRAME_SIZE),
        isa.ldr(X8, SP, 16, Mode.POST),
        isa.br(X8),
    ]
    return _place(body, self_addr)


def gen_gate_stub(self_addr: int = 0) -> list:
    """Default hook gate: returns immediately, i.e. never claims."""
    return _place([isa.ret()], self_addr)


def word_of(instr: Instr) -> int:
    """Encoding to emit: copied instructions keep their original word."""
    if instr.raw is not None:
        return instr.raw
    return isa.encode(instr)


def assemble(instrs: list) -> bytes:
    return b"".join(word_of(i).to_bytes(4, "little") for i in instrs)


@dataclass
class TrampolineLayout:
    l1_blocks: list          # [(addr, [4 Instr])]
    l2_blocks: list          # [(addr, [6 Instr])]
    l3_block: tuple          # (addr, [Instr])
    hook_gate_addr: int
    gate_block: Optional[tuple] = None

    @property
    def l3_addr(self) -> int:
        return self.l3_block[0]

    def symbols(self) -> dict:
        syms = {"hook_gate": f"{self.hook_gate_addr:#x}", "l3": f"{self.l3_addr:#x}"}
        for n, (addr, _) in enumerate(self.l1_blocks):
            syms[f"l1_{n}"] = f"{addr:#x}"
        for n, (addr, _) in enumerate(self.l2_blocks):
            syms[f"l2_{n}"] = f"{addr:#x}"
        return syms
