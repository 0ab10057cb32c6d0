"""Deterministic interpreter for the isa subset.

The machine executes original and rewritten images side by side so their
behaviour can be compared.  System calls go to a table-driven model of the
kernel; BRK/UDF/fault traps go to the signal handlers the rewriter would
install; a BLR to the registered hook gate calls back into Python with the L3
frame.  Costs are counted in retired instructions plus fixed, synthetic
charges for kernel entries and signal deliveries.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import isa, trampoline
from .asm import Assembler
from .completeness import ConfigEntry, FaultContext
from .image import MemoryImage, Perm, Segment, SYNTH_PREFIX
from .isa import Instr, Kind, Mode, MASK64
from .planner import PlannerConfig, apply, plan_image
from .trampoline import HookEvent, HookOrigin

__all__ = [
    "TrapKind", "Trap", "Machine", "SyscallModel", "Interception", "RunResult",
    "FuelExhausted", "run", "diff_run", "Verdict", "CostModel",
    "measure_interception_cost", "interception_profile", "CostProfile",
    "MECHANISMS", "EXIT_SENTINEL", "DEFAULT_SYSCALLS",
]

log = logging.getLogger(__name__)

STACK_TOP = 0x7FFF_FFFF_0000
STACK_SIZE = 64 * 1024
STACK_SOURCE = SYNTH_PREFIX + "stack"
EXIT_SENTINEL = 0x7FFF_DEAD_0000
DEFAULT_FUEL = 10_000_000
ENOSYS = -38
EXIT_SYSCALLS = (93, 94)


class TrapKind(enum.Enum):
    SVC = "SvcTrap"
    BRK = "BrkTrap"
    UDF = "UdfTrap"
    SEGV = "SegFault"
    BUS = "BusError"
    HOOK_GATE = "HookGate"
    EXIT = "Exit"


@dataclass(frozen=True)
class Trap:
    kind: TrapKind
    at: int
    imm: Optional[int] = None
    addr: Optional[int] = None
    code: Optional[int] = None


@dataclass(frozen=True)
class CostModel:
    svc_kernel: int = 100
    signal_delivery: int = 1500


class _MemFault(Exception):
    def __init__(self, kind: TrapKind, addr: int):
        self.kind = kind
        self.addr = addr


def _cond_holds(cond: int, nzcv: int) -> bool:
    n, z, c, v = (nzcv >> 3) & 1, (nzcv >> 2) & 1, (nzcv >> 1) & 1, nzcv & 1
    base = cond >> 1
    if base == 0:
        r = z == 1
    elif base == 1:
        r = c == 1
    elif base == 2:
        r = n == 1
    elif base == 3:
        r = v == 1
    elif base == 4:
        r = c == 1 and z == 0
    elif base == 5:
        r = n == v
    elif base == 6:
        r = n == v and z == 0
    else:
        return True
    return (not r) if (cond & 1) else r


class Machine:
    """Architectural state plus the image it runs in."""

    def __init__(self, image: MemoryImage, entry: Optional[int] = None, *,
                 hook_gate: Optional[int] = None, stack_top: int = STACK_TOP,
                 stack_size: int = STACK_SIZE, costs: Optional[CostModel] = None,
                 regs: Optional[dict] = None):
        self.image = image.copy()
        self.image.add(Segment(stack_top - stack_size, bytearray(stack_size),
                               Perm.R | Perm.W, STACK_SOURCE))
        self.stack_top = stack_top
        self.x = [0] * 31
        self.x[30] = EXIT_SENTINEL
        self.sp = stack_top & ~0xF
        self.nzcv = 0
        self.pc = entry if entry is not None else image.entry
        if self.pc is None:
            raise ValueError("no entry point")
        for reg, value in (regs or {}).items():
            if reg == "sp":
                self.sp = value
            else:
                self.x[int(reg)] = value & MASK64
        self.hook_gate = hook_gate
        self.costs = costs or CostModel()
        self.retired = 0
        self.instr_count = 0
        self._code: dict = {}
        self._seg_cache: Optional[Segment] = None
        self._dispatch = {
            Kind.MOVZ: self._movz, Kind.MOVK: self._movk, Kind.MOV_REG: self._mov_reg,
            Kind.ORR_IMM: self._orr_imm, Kind.ADRP: self._adrp,
            Kind.ADD_IMM: self._addsub, Kind.SUB_IMM: self._addsub,
            Kind.B: self._b, Kind.BL: self._bl, Kind.B_COND: self._b_cond,
            Kind.CBZ: self._cbz, Kind.CBNZ: self._cbz, Kind.TBZ: self._tbz,
            Kind.TBNZ: self._tbz, Kind.BR: self._br, Kind.BLR: self._blr,
            Kind.RET: self._br, Kind.LDR_IMM: self._ldr, Kind.STR_IMM: self._str,
            Kind.STP_PRE: self._stp, Kind.LDP_POST: self._ldp,
            Kind.MRS_NZCV: self._mrs, Kind.MSR_NZCV: self._msr, Kind.NOP: self._nop,
        }

    # --- registers ---------------------------------------------------------

    def reg(self, r: int) -> int:
        """General register read; 31 reads as zero."""
        return 0 if r == 31 else self.x[r]

    def set_reg(self, r: int, value: int, sf: bool = True) -> None:
        if r != 31:
            self.x[r] = value & (MASK64 if sf else 0xFFFFFFFF)

    def _base(self, r: int) -> int:
        if r == 31:
            if self.sp & 0xF:
                raise _MemFault(TrapKind.BUS, self.sp)
            return self.sp
        return self.x[r]

    def _set_base(self, r: int, value: int) -> None:
        if r == 31:
            self.sp = value & MASK64
        else:
            self.x[r] = value & MASK64

    # --- memory ------------------------------------------------------------

    def _segment(self, addr: int, size: int) -> Segment:
        seg = self._seg_cache
        if seg is not None and seg.vaddr <= addr and addr + size <= seg.vaddr + len(seg.data):
            return seg
        seg = self.image.find(addr, size)
        if seg is None:
            raise _MemFault(TrapKind.SEGV, addr)
        self._seg_cache = seg
        return seg

    def load64(self, addr: int) -> int:
        addr &= MASK64
        seg = self._segment(addr, 8)
        if not seg.perms & Perm.R:
            raise _MemFault(TrapKind.SEGV, addr)
        off = addr - seg.vaddr
        return int.from_bytes(seg.data[off:off + 8], "little")

    def store64(self, addr: int, value: int) -> None:
        addr &= MASK64
        seg = self._segment(addr, 8)
        if not seg.perms & Perm.W:
            raise _MemFault(TrapKind.SEGV, addr)
        off = addr - seg.vaddr
        seg.data[off:off + 8] = (value & MASK64).to_bytes(8, "little")
        if seg.perms & Perm.X:
            self._code.clear()

    def write_bytes(self, addr: int, data: bytes) -> None:
        seg = self._segment(addr, len(data))
        if not seg.perms & Perm.W:
            raise _MemFault(TrapKind.SEGV, addr)
        off = addr - seg.vaddr
        seg.data[off:off + len(data)] = data

    def fetch(self, pc: int) -> Optional[Instr]:
        instr = self._code.get(pc)
        if instr is None:
            seg = self.image.find(pc, 4)
            if seg is None or not seg.perms & Perm.X:
                return None
            off = pc - seg.vaddr
            instr = isa.decode(int.from_bytes(seg.data[off:off + 4], "little"), pc)
            self._code[pc] = instr
        return instr

    # --- execution ---------------------------------------------------------

    def step(self) -> Optional[Trap]:
        """Execute one instruction; returns a Trap when execution must stop."""
        pc = self.pc
        if pc == EXIT_SENTINEL:
            return Trap(TrapKind.EXIT, pc, code=self.x[0])
        if pc & 3:
            return Trap(TrapKind.BUS, pc, addr=pc)
        instr = self.fetch(pc)
        if instr is None:
            return Trap(TrapKind.SEGV, pc, addr=pc)
        handler = self._dispatch.get(instr.kind)
        if handler is None:
            k = instr.kind
            if k is Kind.SVC:
                return Trap(TrapKind.SVC, pc, imm=instr.imm)
            if k is Kind.BRK:
                return Trap(TrapKind.BRK, pc, imm=instr.imm)
            return Trap(TrapKind.UDF, pc, imm=instr.imm)
        try:
            trap = handler(instr)
        except _MemFault as fault:
            return Trap(fault.kind, pc, addr=fault.addr)
        self.retired += 1
        self.instr_count += 1
        return trap

    def _nop(self, i):
        self.pc += 4

    def _movz(self, i):
        self.set_reg(i.rd, i.imm << i.shift, i.sf)
        self.pc += 4

    def _movk(self, i):
        old = self.reg(i.rd)
        self.set_reg(i.rd, (old & ~(0xFFFF << i.shift)) | (i.imm << i.shift), i.sf)
        self.pc += 4

    def _mov_reg(self, i):
        self.set_reg(i.rd, self.reg(i.rm), i.sf)
        self.pc += 4

    def _orr_imm(self, i):
        value = self.reg(i.rn) | i.imm
        if i.rd == 31:
            self.sp = value & (MASK64 if i.sf else 0xFFFFFFFF)
        else:
            self.set_reg(i.rd, value, i.sf)
        self.pc += 4

    def _adrp(self, i):
        self.set_reg(i.rd, (self.pc & ~0xFFF) + (i.imm << 12))
        self.pc += 4

    def _addsub(self, i):
        width = 64 if i.sf else 32
        mask = (1 << width) - 1
        a = (self.sp if i.rn == 31 else self.x[i.rn]) & mask
        b = (i.imm << i.shift) & mask
        if i.kind is Kind.SUB_IMM:
            b_eff, carry_in = (~b) & mask, 1
        else:
            b_eff, carry_in = b, 0
        full = a + b_eff + carry_in
        result = full & mask
        if i.setflags:
            n = result >> (width - 1)
            z = int(result == 0)
            c = int(full > mask)
            sign = 1 << (width - 1)
            v = int(((a ^ result) & (b_eff ^ result) & sign) != 0)
            self.nzcv = (n << 3) | (z << 2) | (c << 1) | v
            self.set_reg(i.rd, result, i.sf)
        elif i.rd == 31:
            self.sp = result
        else:
            self.x[i.rd] = result
        self.pc += 4

    def _b(self, i):
        self.pc = (self.pc + i.imm * 4) & MASK64

    def _bl(self, i):
        self.x[30] = self.pc + 4
        self.pc = (self.pc + i.imm * 4) & MASK64

    def _b_cond(self, i):
        self.pc = (self.pc + i.imm * 4) & MASK64 if _cond_holds(i.cond, self.nzcv) else self.pc + 4

    def _cbz(self, i):
        value = self.reg(i.rt) & (MASK64 if i.sf else 0xFFFFFFFF)
        taken = (value == 0) == (i.kind is Kind.CBZ)
        self.pc = (self.pc + i.imm * 4) & MASK64 if taken else self.pc + 4

    def _tbz(self, i):
        set_ = (self.reg(i.rt) >> i.bit) & 1
        taken = set_ == (1 if i.kind is Kind.TBNZ else 0)
        self.pc = (self.pc + i.imm * 4) & MASK64 if taken else self.pc + 4

    def _br(self, i):
        self.pc = self.reg(i.rn)

    def _blr(self, i):
        target = self.reg(i.rn)
        self.x[30] = self.pc + 4
        self.pc = target
        if self.hook_gate is not None and target == self.hook_gate:
            return Trap(TrapKind.HOOK_GATE, target)
        return None

    def _ldr(self, i):
        base = self._base(i.rn)
        if i.mode is Mode.POST:
            value = self.load64(base)
            self._set_base(i.rn, base + i.imm)
        elif i.mode is Mode.PRE:
            value = self.load64(base + i.imm)
            self._set_base(i.rn, base + i.imm)
        else:
            value = self.load64(base + i.imm)
        self.set_reg(i.rt, value)
        self.pc += 4

    def _str(self, i):
        base = self._base(i.rn)
        value = self.reg(i.rt)
        if i.mode is Mode.POST:
            self.store64(base, value)
            self._set_base(i.rn, base + i.imm)
        elif i.mode is Mode.PRE:
            self.store64(base + i.imm, value)
            self._set_base(i.rn, base + i.imm)
        else:
            self.store64(base + i.imm, value)
        self.pc += 4

    def _stp(self, i):
        addr = self._base(i.rn) + i.imm
        self.store64(addr, self.reg(i.rt))
        self.store64(addr + 8, self.reg(i.rt2))
        self._set_base(i.rn, addr)
        self.pc += 4

    def _ldp(self, i):
        base = self._base(i.rn)
        first, second = self.load64(base), self.load64(base + 8)
        self.set_reg(i.rt, first)
        self.set_reg(i.rt2, second)
        self._set_base(i.rn, base + i.imm)
        self.pc += 4

    def _mrs(self, i):
        self.set_reg(i.rt, self.nzcv << 28)
        self.pc += 4

    def _msr(self, i):
        self.nzcv = (self.reg(i.rt) >> 28) & 0xF
        self.pc += 4

    # --- snapshots ---------------------------------------------------------

    def writable_memory(self) -> dict:
        return {s.vaddr: bytes(s.data) for s in self.image.segments if s.writable}

    def stack_segment(self) -> Segment:
        return self.image.segment_for(self.stack_top - 16, 16)

    def objects(self) -> tuple:
        return tuple(self.image.objects())

    def fault_context(self, trap: Trap) -> FaultContext:
        return FaultContext(
            pc=trap.at, regs=tuple(self.x), mappings=self.objects(),
            fault_kind="BusError" if trap.kind is TrapKind.BUS else "SegFault",
            addr=trap.addr, sp=self.sp)


# --- kernel model ------------------------------------------------------------

def _read_pattern(args, m: Machine) -> int:
    # read(fd, buf, n): fills buf with a deterministic pattern derived from fd
    fd, buf, n = args[0], args[1], min(args[2], 4096)
    m.write_bytes(buf, bytes((fd + k) & 0xFF for k in range(n)))
    return n


DEFAULT_SYSCALLS = {
    63: _read_pattern,                   # read
    64: lambda a, m: a[2],               # write: reports everything written
    172: lambda a, m: 4242,              # getpid
    173: lambda a, m: 4241,              # getppid
    174: lambda a, m: 1000,              # getuid
    178: lambda a, m: 4243,              # gettid
    222: lambda a, m: a[0] or 0x10_0000_0000,  # mmap
}


class SyscallModel:
    """Maps system-call numbers to deterministic results.

    Table values are callables ``(args, machine) -> result`` or plain ints.
    Unknown numbers return -ENOSYS, or stop the run when ``unknown="trap"``.
    """

    def __init__(self, table: Optional[dict] = None, unknown: str = "enosys"):
        self.table = dict(DEFAULT_SYSCALLS if table is None else table)
        if unknown not in ("enosys", "trap"):
            raise ValueError(f"unknown-sysno policy {unknown!r}")
        self.unknown = unknown

    @classmethod
    def from_json(cls, doc: dict) -> "SyscallModel":
        """``{"172": {"return": 4242} | "echo-arg0" | "enosys", ...}``"""
        table = {}
        unknown = doc.get("unknown", "enosys") if isinstance(doc.get("unknown"), str) else "enosys"
        for key, spec in doc.items():
            if key == "unknown":
                continue
            sysno = int(key, 0)
            if isinstance(spec, dict) and "return" in spec:
                table[sysno] = int(spec["return"])
            elif spec == "echo-arg0":
                table[sysno] = lambda a, m: a[0]
            elif spec == "enosys":
                table[sysno] = ENOSYS
            else:
                raise ValueError(f"bad syscall spec for {key}: {spec!r}")
        return cls(table, unknown)

    def handle(self, sysno: int, args: tuple, machine: Machine):
        """Result value, or None when the number is unknown in trap mode."""
        fn = self.table.get(sysno)
        if fn is None:
            return None if self.unknown == "trap" else ENOSYS
        if isinstance(fn, int):
            return fn
        return fn(args, machine)


@dataclass(frozen=True)
class Interception:
    """Signal handlers installed by the rewriter."""

    brk_imm: int = 0xF5C
    udf_sites: frozenset = frozenset()

    @classmethod
    def for_plan(cls, plan) -> "Interception":
        return cls(plan.cfg.brk_imm, plan.udf_sites())


class FuelExhausted(Exception):
    def __init__(self, result: "RunResult"):
        super().__init__(f"fuel exhausted after {result.retired} instructions")
        self.result = result


@dataclass
class RunResult:
    status: str                      # exit | fault | trap | fuel
    exit_code: Optional[int] = None
    fault: Optional[FaultContext] = None
    trap: Optional[Trap] = None
    events: list = field(default_factory=list)
    trace: list = field(default_factory=list)       # (sysno, args) per kernel entry
    svc_sites: list = field(default_factory=list)   # (pc, sp) of every SVC executed
    instr_count: int = 0
    retired: int = 0
    regs: tuple = ()
    sp: int = 0
    nzcv: int = 0
    pc: int = 0
    memory: dict = field(default_factory=dict)
    stack_top: int = STACK_TOP

    def to_json(self) -> dict:
        return {
            "schema_version": 1,
            "status": self.status,
            "exit_code": self.exit_code,
            "x0": f"{self.regs[0]:#x}" if self.regs else None,
            "fault": None if self.fault is None else self.fault.to_json(),
            "trap": None if self.trap is None else
            {"kind": self.trap.kind.value, "at": f"{self.trap.at:#x}"},
            "events": [e.to_json() for e in self.events],
            "event_count": len(self.events),
            "syscalls": len(self.trace),
            "instr_count": self.instr_count,
            "retired": self.retired,
        }


def _frame_event(m: Machine, frame: int) -> HookEvent:
    regs = [m.load64(frame + trampoline.reg_offset(r)) for r in range(9)]
    ret_addr = m.load64(frame + trampoline.RET_OFFSET)
    return HookEvent(regs[8], tuple(regs[:6]), ret_addr, HookOrigin.TRAMPOLINE,
                     frame + trampoline.RET_OFFSET + 16)


def _finish(m: Machine, result: RunResult, status: str) -> RunResult:
    result.status = status
    result.instr_count = m.instr_count
    result.retired = m.retired
    result.regs = tuple(m.x)
    result.sp = m.sp
    result.nzcv = m.nzcv
    result.pc = m.pc
    result.memory = m.writable_memory()
    result.stack_top = m.stack_top
    return result


def run(machine: Machine, syscalls: Optional[SyscallModel] = None,
        hook: Optional[Callable] = None, intercept: Optional[Interception] = None,
        fuel: int = DEFAULT_FUEL) -> RunResult:
    """Drive ``machine`` until it exits, faults, or uses up ``fuel`` instructions.

    ``hook(event)`` returns None to let the call through or an int to claim
    it with that result.  ``intercept`` enables the rewriter's signal
    handlers; without it BRK/UDF/faults simply stop the run.
    """
    if fuel <= 0:
        raise ValueError("fuel must be positive")
    syscalls = syscalls or SyscallModel()
    m = machine
    res = RunResult("running")
    costs = m.costs

    def kernel(sysno, args):
        res.trace.append((sysno, args))
        m.instr_count += costs.svc_kernel
        if sysno in EXIT_SYSCALLS:
            return Trap(TrapKind.EXIT, m.pc, code=args[0])
        value = syscalls.handle(sysno, args, m)
        if value is None:
            return Trap(TrapKind.SVC, m.pc, imm=sysno)
        m.x[0] = value & MASK64
        return None

    step = m.step
    while True:
        if m.retired >= fuel:
            raise FuelExhausted(_finish(m, res, "fuel"))
        trap = step()
        if trap is None:
            continue
        kind = trap.kind

        if kind is TrapKind.SVC:
            m.retired += 1
            m.instr_count += 1
            res.svc_sites.append((m.pc, m.sp))
            stop = kernel(m.x[8], tuple(m.x[:6]))
            if stop is not None:
                res.trap = stop
                if stop.kind is TrapKind.EXIT:
                    res.exit_code = stop.code
                    return _finish(m, res, "exit")
                return _finish(m, res, "trap")
            m.pc += 4

        elif kind is TrapKind.HOOK_GATE:
            frame = m.x[0]
            event = _frame_event(m, frame)
            res.events.append(event)
            claim = hook(event) if hook is not None else None
            if claim is not None:
                m.store64(frame + trampoline.reg_offset(0), claim)
                m.store64(frame + trampoline.CLAIM_OFFSET, 1)
            m.pc = m.x[30]

        elif kind in (TrapKind.BRK, TrapKind.UDF) and intercept is not None and (
                (kind is TrapKind.BRK and trap.imm == intercept.brk_imm)
                or (kind is TrapKind.UDF and trap.at in intercept.udf_sites)):
            m.retired += 1
            m.instr_count += 1 + costs.signal_delivery
            origin = HookOrigin.SIGNAL_BRK if kind is TrapKind.BRK else HookOrigin.SIGNAL_UDF
            event = HookEvent(m.x[8], tuple(m.x[:6]), m.pc + 4, origin, m.sp)
            res.events.append(event)
            claim = hook(event) if hook is not None else None
            if claim is None:
                stop = kernel(m.x[8], tuple(m.x[:6]))
                if stop is not None:
                    res.trap = stop
                    if stop.kind is TrapKind.EXIT:
                        res.exit_code = stop.code
                        return _finish(m, res, "exit")
                    return _finish(m, res, "trap")
            else:
                m.x[0] = claim & MASK64
            m.pc += 4

        elif kind is TrapKind.EXIT:
            res.trap = trap
            res.exit_code = trap.code
            return _finish(m, res, "exit")

        elif kind in (TrapKind.SEGV, TrapKind.BUS):
            if intercept is not None:
                m.instr_count += costs.signal_delivery
            res.trap = trap
            res.fault = m.fault_context(trap)
            return _finish(m, res, "fault")

        else:
            res.trap = trap
            return _finish(m, res, "trap")


# --- differential runs -------------------------------------------------------

@dataclass
class Verdict:
    label: str                       # equivalent | equivalent-with-x8-mask | divergent
    divergences: list = field(default_factory=list)
    original: Optional[RunResult] = None
    rewritten: Optional[RunResult] = None

    @property
    def equivalent(self) -> bool:
        return self.label != "divergent"

    @property
    def first_divergence(self) -> Optional[str]:
        return self.divergences[0] if self.divergences else None

    def to_json(self) -> dict:
        return {
            "schema_version": 1,
            "verdict": self.label,
            "divergences": self.divergences,
            "original": None if self.original is None else self.original.to_json(),
            "rewritten": None if self.rewritten is None else self.rewritten.to_json(),
        }


def _run_to_end(machine, **kw) -> RunResult:
    try:
        return run(machine, **kw)
    except FuelExhausted as exc:
        return exc.result


def _caller_sp(result: RunResult, plan) -> int:
    """sp as the program sees it; an exit taken inside L3 reports the site's sp."""
    region = getattr(plan, "trampoline_region", None)
    if (result.trap is not None and region is not None and region.contains(result.trap.at, 4)
            and result.events):
        return result.events[-1].sp
    return result.sp


def diff_run(original: MemoryImage, rewritten: MemoryImage, plan=None,
             entry: Optional[int] = None, inputs: Optional[dict] = None,
             mask_x8: bool = True, syscalls: Optional[SyscallModel] = None,
             fuel: int = DEFAULT_FUEL, hook: Optional[Callable] = None) -> Verdict:
    """Run both images from the same state and compare what the program can see.

    Compared: exit state, the system-call trace, one hook event per original
    SVC at the same (address, sp), final registers (x8 optionally masked),
    NZCV, sp, and all writable memory; the stack only at or above the final sp.
    """
    syscalls = syscalls or SyscallModel()
    m1 = Machine(original, entry, regs=inputs)
    r1 = _run_to_end(m1, syscalls=syscalls, fuel=fuel)
    gate = plan.hook_gate_addr if plan is not None else None
    m2 = Machine(rewritten, entry, hook_gate=gate, regs=inputs)
    intercept = Interception.for_plan(plan) if plan is not None else None
    r2 = _run_to_end(m2, syscalls=syscalls, hook=hook, intercept=intercept, fuel=fuel)

    diffs = []
    if r1.status != r2.status or r1.exit_code != r2.exit_code:
        where = f" at {r2.trap.at:#x}" if r2.trap is not None else ""
        diffs.append(f"exit state: {r1.status}/{r1.exit_code} vs {r2.status}/{r2.exit_code}{where}")
    if r1.fault is not None and r2.fault is not None and (
            r1.fault.pc, r1.fault.addr) != (r2.fault.pc, r2.fault.addr):
        diffs.append(f"fault: pc {r1.fault.pc:#x} vs {r2.fault.pc:#x}")
    if r1.trace != r2.trace:
        n = next((k for k, (a, b) in enumerate(zip(r1.trace, r2.trace)) if a != b),
                 min(len(r1.trace), len(r2.trace)))
        diffs.append(f"syscall trace differs at entry {n} "
                     f"({len(r1.trace)} vs {len(r2.trace)} calls)")
    if hook is None:
        sites = [(e.return_addr - 4, e.sp) for e in r2.events]
        if len(sites) != len(r1.svc_sites):
            diffs.append(f"hook events: {len(r2.events)} for {len(r1.svc_sites)} SVCs")
        elif sites != r1.svc_sites:
            n = next(k for k, (a, b) in enumerate(zip(sites, r1.svc_sites)) if a != b)
            diffs.append(f"hook event {n} at {sites[n][0]:#x}/sp {sites[n][1]:#x}, "
                         f"SVC at {r1.svc_sites[n][0]:#x}/sp {r1.svc_sites[n][1]:#x}")

    x8_differs = False
    if r1.regs and r2.regs:
        for r in range(31):
            if r1.regs[r] == r2.regs[r]:
                continue
            if r == isa.X8 and mask_x8:
                x8_differs = True
                continue
            diffs.append(f"x{r}: {r1.regs[r]:#x} vs {r2.regs[r]:#x}")
        sp1, sp2 = r1.sp, _caller_sp(r2, plan)
        if sp1 != sp2:
            diffs.append(f"sp: {sp1:#x} vs {sp2:#x}")
        if r1.nzcv != r2.nzcv:
            diffs.append(f"nzcv: {r1.nzcv:#x} vs {r2.nzcv:#x}")
        for base, data in r1.memory.items():
            other = r2.memory.get(base)
            if other is None:
                diffs.append(f"segment {base:#x} missing after rewrite")
                continue
            lo = 0
            if base == m1.stack_top - len(data):
                lo = max(min(sp1, sp2) - base, 0)
            if data[lo:] != other[lo:]:
                off = lo + next(k for k, (a, b) in enumerate(zip(data[lo:], other[lo:])) if a != b)
                diffs.append(f"memory differs at {base + off:#x}")

    if diffs:
        label = "divergent"
    elif x8_differs:
        label = "equivalent-with-x8-mask"
    else:
        label = "equivalent"
    return Verdict(label, diffs, r1, r2)


# --- cost measurement --------------------------------------------------------

MECHANISMS = ("baseline", "trampoline", "signal")
COST_BASE = 0x40_0000
COST_SYSNO = 172


@dataclass(frozen=True)
class CostProfile:
    mechanism: str
    iterations: int
    cycles: float                 # modeled cycles per interception
    instructions: float           # retired guest instructions per interception
    events: int

    def to_json(self) -> dict:
        return {"mechanism": self.mechanism, "iterations": self.iterations,
                "cycles_per_interception": self.cycles,
                "instructions_per_interception": self.instructions,
                "events": self.events}


def _cost_program(iterations: int, body: str) -> MemoryImage:
    a = Assembler(COST_BASE)
    a.emit(isa.mov_reg(20, isa.X30))
    a.mov64(19, iterations)
    a.label("loop")
    a.emit(isa.movz(isa.X8, COST_SYSNO))
    if body == "svc":
        a.emit(isa.svc(0))
    elif body == "call":
        a.bl("fn")
    else:
        a.emit(isa.nop())
    a.emit(isa.sub_imm(19, 19, 1))
    a.cbnz(19, "loop")
    a.emit(isa.br(20))
    a.label("fn")
    a.emit(isa.movz(0, 7), isa.ret())
    code = a.assemble()
    return MemoryImage([Segment(COST_BASE, bytearray(code), Perm.R | Perm.X, "bench")],
                       COST_BASE)


def interception_profile(mechanism: str, iterations: int = 1000,
                         costs: Optional[CostModel] = None) -> CostProfile:
    """Per-interception cost of one mechanism over a tight getpid loop.

    Each run is measured against the same loop with the call removed, and the
    hook claims every call so no kernel entry is charged.
    """
    if mechanism not in MECHANISMS:
        raise ValueError(f"mechanism must be one of {MECHANISMS}")
    if iterations <= 0:
        raise ValueError("iterations must be positive")
    costs = costs or CostModel()
    empty = run(Machine(_cost_program(iterations, "empty"), costs=costs))

    claim = lambda event: 7  # noqa: E731
    if mechanism == "baseline":
        res = run(Machine(_cost_program(iterations, "call"), costs=costs))
    else:
        image = _cost_program(iterations, "svc")
        demote = [ConfigEntry("brk", sysno=COST_SYSNO)] if mechanism == "signal" else []
        plan = plan_image(image, PlannerConfig(), demote)
        machine = Machine(apply(plan, image), hook_gate=plan.hook_gate_addr, costs=costs)
        res = run(machine, hook=claim, intercept=Interception.for_plan(plan))
    return CostProfile(
        mechanism, iterations,
        (res.instr_count - empty.instr_count) / iterations,
        (res.retired - empty.retired) / iterations,
        len(res.events))


def measure_interception_cost(mechanism: str, iterations: int = 1000,
                              costs: Optional[CostModel] = None) -> float:
    """Modeled cycles per interception for ``baseline``, ``trampoline`` or ``signal``."""
    return interception_profile(mechanism, iterations, costs).cycles
