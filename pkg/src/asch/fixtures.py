"""Guest programs for differential testing, completeness and scan statistics.

Programs are built with :class:`asch.asm.Assembler` at ``CODE_BASE`` with a
writable data segment at ``DATA_BASE``.  They return through x30, which the
emulator seeds with its exit sentinel, so the final register state is the
program's own rather than a kernel snapshot.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import isa
from .asm import Assembler
from .image import MemoryImage, Perm, Segment
from .isa import Cond, Mode, SP, X8, X30
from .planner import PlannerConfig

__all__ = [
    "Fixture", "CODE_BASE", "DATA_BASE", "equivalence_fixtures", "extra_fixtures",
    "all_fixtures", "strategy2_fixture", "strategy3_fixture", "null_deref_fixture",
    "wild_jump_fixture", "loop_bound_fixture", "misplanned_fixture", "glibc_like",
    "GLIBC_OBJECTS", "GLIBC_EXPECTED",
]

CODE_BASE = 0x40_0000
DATA_BASE = 0x50_0000
DATA_SIZE = 0x4000
CODE_SOURCE = "/fixtures/prog"

GETPID, GETPPID, GETTID, READ, WRITE, EXIT_GROUP = 172, 173, 178, 63, 64, 94


@dataclass
class Fixture:
    name: str
    image: MemoryImage
    description: str = ""
    inputs: dict = field(default_factory=dict)
    cfg: Optional[PlannerConfig] = None
    expect: str = "equivalent-with-x8-mask"

    @property
    def entry(self) -> int:
        return self.image.entry


def _image(a: Assembler, data: bytes = b"", source: str = CODE_SOURCE) -> MemoryImage:
    blob = bytearray(DATA_SIZE)
    blob[:len(data)] = data
    return MemoryImage([
        Segment(a.base, bytearray(a.assemble()), Perm.R | Perm.X, source),
        Segment(DATA_BASE, blob, Perm.R | Perm.W, source + ":data"),
    ], a.base)


def _program(body: Callable[[Assembler], None], data: bytes = b"",
             tail_getpid: bool = True) -> MemoryImage:
    """Wrap ``body`` with x30 kept in x28 and an optional closing getpid."""
    a = Assembler(CODE_BASE)
    a.emit(isa.mov_reg(28, X30))
    a.mov64(21, DATA_BASE)
    body(a)
    if tail_getpid:
        a.emit(isa.movz(X8, GETPID), isa.svc(0))
    a.emit(isa.ret(28))
    return _image(a, data)


def _sys(a: Assembler, sysno: int) -> None:
    a.emit(isa.movz(X8, sysno), isa.svc(0))


def _keep(a: Assembler, offset: int, reg: int = 0) -> None:
    """Store a result into the data segment."""
    a.emit(isa.str_(reg, 21, offset))


# --- equivalence corpus ------------------------------------------------------

def _getpid(a):
    _sys(a, GETPID)
    _keep(a, 0)


def _zero_args(a):
    for n, sysno in enumerate((GETPPID, GETTID, 174)):
        _sys(a, sysno)
        _keep(a, 8 * n)


def _write_three(a):
    a.emit(isa.movz(0, 1), isa.add_imm(1, 21, 0x100), isa.movz(2, 5))
    _sys(a, WRITE)
    _keep(a, 0)


def _six_args(a):
    for r in range(6):
        a.emit(isa.movz(r, 0x100 + r))
    _sys(a, 999)            # unknown number: ENOSYS
    _keep(a, 0)
    a.emit(isa.movz(0, 1), isa.movz(1, 2), isa.movz(2, 3), isa.movz(3, 4))
    _sys(a, 240)
    _keep(a, 8)


def _counted_loop(n: int, sysno: int):
    def body(a):
        a.mov64(19, n)
        a.label("loop")
        a.emit(isa.mov_reg(2, 19))
        _sys(a, sysno)
        a.emit(isa.str_(0, 21, 8, Mode.POST))
        a.emit(isa.sub_imm(19, 19, 1))
        a.cbnz(19, "loop")
    return body


def _back_to_back(a):
    _sys(a, GETPID)
    a.emit(isa.mov_reg(19, 0))
    _sys(a, GETTID)
    a.emit(isa.mov_reg(20, 0))
    _sys(a, GETPPID)
    _keep(a, 0, 19)
    _keep(a, 8, 20)


def _svc_svc(a):
    # second SVC reuses the number left in x8
    a.emit(isa.movz(X8, GETPID), isa.svc(0), isa.svc(0))
    _keep(a, 0)


def _branch_around(a):
    a.emit(isa.movz(0, 3))
    a.cbz(0, "skip")
    _sys(a, GETPID)
    _keep(a, 0)
    a.label("skip")
    a.emit(isa.movz(0, 0))
    a.cbz(0, "skip2")
    _sys(a, GETTID)
    a.label("skip2")
    _sys(a, GETPPID)
    _keep(a, 8)


def _branch_into(a):
    a.emit(isa.movz(X8, GETTID))
    a.b("inside")
    a.emit(isa.movz(X8, GETPID))
    a.label("inside")
    a.emit(isa.svc(0))
    _keep(a, 0)


def _branch_into_loop(a):
    # the loop re-enters between the assign and the SVC
    a.emit(isa.movz(19, 5), isa.movz(X8, GETPID))
    a.label("again")
    a.emit(isa.mov_reg(0, 19), isa.svc(0))
    a.emit(isa.str_(0, 21, 8, Mode.POST), isa.sub_imm(19, 19, 1))
    a.cbnz(19, "again")


def _flags_across(a):
    a.emit(isa.movz(19, 5), isa.cmp_imm(19, 5))
    _sys(a, GETPID)
    a.b_cond(Cond.EQ, "equal")
    a.emit(isa.movz(20, 1))
    a.label("equal")
    a.emit(isa.cmp_imm(19, 9))
    _sys(a, GETTID)
    a.b_cond(Cond.LT, "less")
    a.emit(isa.movz(20, 2))
    a.label("less")
    _keep(a, 0, 20)


def _test_bits(a):
    a.emit(isa.movz(19, 0b1010))
    a.to(isa.tbz(19, 1, 0), "skip")
    _sys(a, GETPID)
    a.label("skip")
    a.to(isa.tbnz(19, 2, 0), "skip2")
    _sys(a, GETTID)
    _keep(a, 0)
    a.label("skip2")


def _stack_frame(a):
    a.emit(isa.movz(19, 11), isa.movz(20, 22))
    a.emit(isa.stp_pre(19, 20, SP, -32), isa.str_(21, SP, 16))
    _sys(a, GETPID)
    a.emit(isa.str_(0, SP, 24), isa.ldp_post(22, 23, SP, 16), isa.ldp_post(24, 25, SP, 16))
    _keep(a, 0, 25)


def _wrapper_calls(a):
    a.emit(isa.stp_pre(29, 30, SP, -16))
    a.emit(isa.movz(0, 7))
    a.bl("wrap")
    _keep(a, 0)
    a.emit(isa.movz(0, 8))
    a.bl("wrap")
    _keep(a, 8)
    a.emit(isa.ldp_post(29, 30, SP, 16))
    a.b("out")
    a.label("wrap")
    a.emit(isa.mov_reg(1, 0), isa.movz(X8, GETTID), isa.svc(0), isa.ret())
    a.label("out")


def _orr_assign(a):
    a.emit(isa.movz(0, 1), isa.add_imm(1, 21, 0x200), isa.movz(2, 4))
    a.emit(isa.orr_imm(X8, isa.XZR, WRITE), isa.svc(0))
    _keep(a, 0)


def _mov_reg_assign(a):
    a.emit(isa.movz(9, GETTID), isa.movz(0, 1), isa.mov_reg(X8, 9), isa.svc(0))
    _keep(a, 0)


def _load_assign(a):
    a.emit(isa.movz(9, GETPPID), isa.str_(9, 21, 0x300))
    a.emit(isa.ldr(X8, 21, 0x300), isa.movz(0, 2), isa.svc(0))
    _keep(a, 0)


def _distant_assign(a):
    a.emit(isa.movz(X8, GETPID))
    for r in range(10, 18):
        a.emit(isa.movz(r, r))
    a.emit(isa.svc(0))
    _keep(a, 0)


def _w_assign(a):
    a.emit(isa.movz(X8, GETTID, sf=False), isa.svc(0))
    _keep(a, 0)


def _read_buffer(a):
    a.emit(isa.movz(0, 3), isa.add_imm(1, 21, 0x400), isa.movz(2, 64))
    _sys(a, READ)
    a.emit(isa.ldr(19, 21, 0x408))
    _keep(a, 0, 19)


def _enosys_branch(a):
    _sys(a, 451)
    a.emit(isa.add_imm(19, 0, 38, setflags=True))
    a.b_cond(Cond.NE, "odd")
    _sys(a, GETPID)
    a.label("odd")
    _keep(a, 0)


def _x8_read_between(a):
    a.emit(isa.movz(X8, GETPID), isa.add_imm(19, X8, 0), isa.svc(0))
    _keep(a, 0, 19)


def _nested_loops(a):
    a.emit(isa.movz(19, 10))
    a.label("outer")
    a.emit(isa.movz(20, 10))
    a.label("inner")
    a.emit(isa.mov_reg(0, 20), isa.movz(X8, GETTID), isa.svc(0))
    a.emit(isa.sub_imm(20, 20, 1))
    a.cbnz(20, "inner")
    a.emit(isa.mov_reg(0, 19), isa.movz(X8, GETPPID), isa.svc(0))
    a.emit(isa.sub_imm(19, 19, 1))
    a.cbnz(19, "outer")
    _keep(a, 0)


def _indirect_call(a):
    # ordinary BLR to the function entry, which is outside the interval
    a.emit(isa.stp_pre(29, 30, SP, -16))
    a.addr_of(9, "fn")
    a.emit(isa.blr(9))
    _keep(a, 0)
    a.emit(isa.ldp_post(29, 30, SP, 16))
    a.b("out")
    a.label("fn")
    a.emit(isa.movz(X8, GETPID), isa.svc(0), isa.ret())
    a.label("out")


_CORE = [
    ("getpid", _getpid, "single zero-argument call"),
    ("zero_args", _zero_args, "three zero-argument calls"),
    ("write_three_args", _write_three, "write(fd, buf, n)"),
    ("six_args", _six_args, "six arguments, unknown numbers"),
    ("loop_1000_getpid", _counted_loop(1000, GETPID), "10^3 calls in a loop"),
    ("loop_1000_write", _counted_loop(1000, WRITE), "10^3 writes with varying length"),
    ("back_to_back", _back_to_back, "adjacent call sites"),
    ("svc_svc", _svc_svc, "two SVCs sharing one x8 assignment"),
    ("branch_around", _branch_around, "conditional branches around sites"),
    ("branch_into", _branch_into, "direct branch onto an SVC"),
    ("branch_into_loop", _branch_into_loop, "loop re-entering a site's interval"),
    ("flags_across", _flags_across, "NZCV live across a site"),
    ("test_bits", _test_bits, "tbz/tbnz around sites"),
    ("stack_frame", _stack_frame, "stack data live across a site"),
    ("wrapper_calls", _wrapper_calls, "libc-style wrapper called twice"),
    ("orr_assign", _orr_assign, "x8 set by orr immediate"),
    ("mov_reg_assign", _mov_reg_assign, "x8 copied from another register"),
    ("load_assign", _load_assign, "x8 loaded from memory"),
    ("distant_assign", _distant_assign, "x8 set eight instructions before the SVC"),
    ("w_assign", _w_assign, "32-bit x8 assignment"),
    ("read_buffer", _read_buffer, "kernel writes into guest memory"),
    ("enosys_branch", _enosys_branch, "branch on an error return"),
    ("x8_read_between", _x8_read_between, "x8 read between assign and SVC"),
    ("nested_loops", _nested_loops, "10x10 nested loop, two sites"),
    ("indirect_call", _indirect_call, "BLR to a wrapper's entry"),
]


def equivalence_fixtures() -> list:
    """Programs expected to compare equal under the x8 mask after rewriting."""
    out = [Fixture(name, _program(body), desc) for name, body, desc in _CORE]
    out.append(Fixture("adrp_only", _program(_back_to_back), "every site via ADRP",
                       cfg=PlannerConfig(max_mov_trampolines=0)))
    out.append(Fixture("udf_demotion", _program(_branch_into), "demotion through UDF",
                       cfg=PlannerConfig(demotion_instr="udf")))
    return out


def _exit_group(a):
    _sys(a, GETPID)
    a.emit(isa.movz(0, 3))
    _sys(a, EXIT_GROUP)


def extra_fixtures() -> list:
    """Programs whose final x8 is not a trampoline artefact."""
    return [
        Fixture("exit_group", _program(_exit_group, tail_getpid=False),
                "ends inside the kernel via exit_group", expect="equivalent"),
        strategy2_fixture(),
    ]


def all_fixtures() -> list:
    return equivalence_fixtures() + extra_fixtures() + [strategy3_fixture()]


# --- completeness fixtures ---------------------------------------------------

def strategy2_fixture() -> Fixture:
    """A direct branch lands on the SVC word itself."""
    a = Assembler(CODE_BASE)
    a.emit(isa.movz(X8, GETTID))
    a.b("svc")
    a.emit(isa.movz(X8, GETPID))
    a.label("svc")
    a.emit(isa.svc(0), isa.ret())
    return Fixture("strategy2", _image(a), "direct branch onto an SVC", expect="equivalent")


def strategy3_fixture() -> Fixture:
    """A BLR enters a wrapper at its SVC with x8 set by the caller.

    Linear sweep cannot see the indirect target, so the first rewritten run
    jumps to the system-call number.
    """
    a = Assembler(CODE_BASE)
    a.emit(isa.mov_reg(28, X30))
    a.emit(isa.movz(X8, GETPID))
    a.addr_of(9, "entry")
    a.emit(isa.blr(9))
    a.emit(isa.mov_reg(19, 0))
    a.bl("wrapper")
    a.emit(isa.ret(28))
    a.label("wrapper")
    a.emit(isa.movz(X8, GETTID))
    a.label("entry")
    a.emit(isa.svc(0), isa.ret())
    return Fixture("strategy3", _image(a, source="/fixtures/libindirect.so"),
                   "indirect BLR into a site's interval", expect="equivalent")


def null_deref_fixture() -> Fixture:
    a = Assembler(CODE_BASE)
    a.emit(isa.movz(X8, 0), isa.movz(1, 0), isa.ldr(0, 1, 0), isa.ret())
    return Fixture("null_deref", _image(a), "load through a null pointer", expect="fault")


def wild_jump_fixture() -> Fixture:
    a = Assembler(CODE_BASE)
    a.emit(isa.movz(X8, GETPID), isa.movz(9, 100), isa.br(9), isa.ret())
    return Fixture("wild_jump", _image(a), "jump to a small address not equal to x8",
                   expect="fault")


def loop_bound_fixture() -> Fixture:
    """Faults like a rewriter fault at a number no site assigns."""
    a = Assembler(CODE_BASE)
    a.emit(isa.movz(X8, 63), isa.movz(9, 0))
    a.cbnz(9, "site")
    a.emit(isa.br(X8))
    a.label("site")
    a.emit(isa.movz(X8, 64), isa.svc(0), isa.ret())
    return Fixture("loop_bound", _image(a), "unfixable rewriter-shaped fault", expect="fault")


def misplanned_fixture() -> Fixture:
    """The strategy-2 program, to be planned with jump-target demotion disabled."""
    fx = strategy2_fixture()
    fx.name, fx.expect = "misplanned", "divergent"
    return fx


# --- glibc-like corpus -------------------------------------------------------

GLIBC_OBJECTS = (
    ("/lib/aarch64-linux-gnu/ld-linux-aarch64.so.1", 0x10_0000_0000, 31),
    ("/lib/aarch64-linux-gnu/libc.so.6", 0x10_0010_0000, 853),
    ("/lib/aarch64-linux-gnu/libpthread.so.0", 0x10_0030_0000, 45),
)
GLIBC_JTB = 7
GLIBC_NO_ASSIGN = 2
GLIBC_TOTAL = 929
GLIBC_EXPECTED = {
    "Clean": GLIBC_TOTAL - GLIBC_JTB - GLIBC_NO_ASSIGN,
    "JumpTargetBetween": GLIBC_JTB,
    "NoAssignInWindow": GLIBC_NO_ASSIGN,
}


def _clean_wrapper(a: Assembler, rng: random.Random, name: str) -> None:
    sysno = rng.randrange(0, 450)
    a.label(name)
    nargs = rng.randrange(0, 7)
    before = [isa.mov_reg(r, 9 + r) for r in range(nargs)]
    split = rng.randrange(0, len(before) + 1)
    a.emit(*before[:split], isa.movz(X8, sysno), *before[split:], isa.svc(0))
    a.emit(isa.cmp_imm(0, 4095))
    a.b_cond(Cond.HI, "__syscall_error")
    a.emit(isa.ret())


def _loop_wrapper(a: Assembler, rng: random.Random, name: str) -> None:
    # restart-on-EINTR loop that re-enters between the assign and the SVC
    a.label(name)
    a.emit(isa.movz(X8, rng.randrange(0, 450)))
    a.label(name + ".retry")
    a.emit(isa.mov_reg(0, 19), isa.svc(0), isa.add_imm(isa.XZR, 0, 4, setflags=True))
    a.b_cond(Cond.EQ, name + ".retry")
    a.emit(isa.ret())


def _raw_entry(a: Assembler, name: str) -> None:
    # syscall(2)-style entry point: x8 arrives from the caller
    for _ in range(24):
        a.emit(isa.nop())
    a.label(name)
    a.emit(isa.svc(0), isa.ret())


def glibc_like(seed: int = 929) -> MemoryImage:
    """Three objects with 929 SVC patterns shaped like a libc build.

    Category counts are :data:`GLIBC_EXPECTED`; the jump-target and
    no-assignment cases all live in libc.
    """
    rng = random.Random(seed)
    segments = []
    for path, base, n_svc in GLIBC_OBJECTS:
        a = Assembler(base)
        a.label("__syscall_error")
        a.emit(isa.movz(0, 0), isa.sub_imm(0, 0, 1), isa.ret())
        specials = []
        if "libc.so" in path:
            specials = ["jtb"] * GLIBC_JTB + ["raw"] * GLIBC_NO_ASSIGN
        kinds = ["clean"] * (n_svc - len(specials)) + specials
        rng.shuffle(kinds)
        for n, kind in enumerate(kinds):
            name = f"f{n}"
            if kind == "clean":
                _clean_wrapper(a, rng, name)
            elif kind == "jtb":
                _loop_wrapper(a, rng, name)
            else:
                _raw_entry(a, name)
        # callers, so the text has ordinary direct branches to wrapper entries
        for n in rng.sample(range(len(kinds)), min(40, len(kinds))):
            a.bl(f"f{n}")
        a.emit(isa.ret())
        segments.append(Segment(base, bytearray(a.assemble()), Perm.R | Perm.X, path))
    return MemoryImage(segments, GLIBC_OBJECTS[1][1])
