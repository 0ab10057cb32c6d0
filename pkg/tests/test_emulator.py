from dataclasses import replace

import pytest
from hypothesis import given, settings, strategies as st

from asch import isa
from asch.completeness import ConfigEntry
from asch.emulator import (CostModel, FuelExhausted, Interception, Machine,
                           SyscallModel, TrapKind, diff_run, interception_profile,
                           measure_interception_cost, run)
from asch.image import Perm, Segment
from asch.isa import Cond, Mode, SP, X8
from asch.planner import PlannerConfig, apply, plan_image
from asch.scanner import Screen, scan
from asch.trampoline import HookOrigin

from conftest import BASE, code_image

MASK = (1 << 64) - 1


def machine(*instrs, **kw):
    return Machine(code_image(*instrs), **kw)


def test_branch_into_l1_page():
    img = code_image(isa.movz(X8, 4096), isa.br(X8))
    img.add(Segment(0x1000, bytearray(16), Perm.R | Perm.X, "l1"))
    m = Machine(img)
    assert m.step() is None and m.step() is None
    assert m.pc == 4096


def test_branch_to_small_number_segfaults():
    m = machine(isa.movz(X8, 64), isa.br(X8))
    m.step(), m.step()
    trap = m.step()
    assert (trap.kind, trap.addr) == (TrapKind.SEGV, 64)


def test_branch_misaligned_bus_error():
    img = code_image(isa.movz(X8, 2), isa.movk(X8, 1, 16), isa.br(X8))
    img.add(Segment(0x10000, bytearray(16), Perm.R | Perm.X, "l1"))
    m = Machine(img)
    for _ in range(3):
        assert m.step() is None
    trap = m.step()
    assert (trap.kind, trap.addr) == (TrapKind.BUS, 0x10002)


def test_non_executable_fetch_faults():
    img = code_image(isa.b(0x100 // 4))
    img.add(Segment(BASE + 0x100, bytearray(16), Perm.R | Perm.W, "data"))
    m = Machine(img)
    m.step()
    assert m.step().kind is TrapKind.SEGV


def test_traps_for_special_words():
    assert machine(isa.svc(3)).step().kind is TrapKind.SVC
    assert machine(isa.brk(0xF5C)).step().imm == 0xF5C
    assert machine(isa.udf(0)).step().kind is TrapKind.UDF
    assert machine(0x9B027C20).step().kind is TrapKind.UDF      # opaque


def test_getpid_runs():
    res = run(machine(isa.movz(X8, 172), isa.svc(0), isa.ret()))
    assert res.status == "exit" and res.regs[0] == 4242
    assert res.trace == [(172, (0, 0, 0, 0, 0, 0))]


def test_rewritten_getpid():
    img = code_image(isa.movz(X8, 172), isa.svc(0), isa.ret())
    plan = plan_image(img)
    out = apply(plan, img)
    res = run(Machine(out, hook_gate=plan.hook_gate_addr), intercept=Interception.for_plan(plan))
    assert res.regs[0] == 4242
    assert [e.origin for e in res.events] == [HookOrigin.TRAMPOLINE]
    consulted = []
    model = SyscallModel({172: lambda a, m: consulted.append(a) or 1})
    res = run(Machine(out, hook_gate=plan.hook_gate_addr), syscalls=model,
              hook=lambda e: 7, intercept=Interception.for_plan(plan))
    assert res.regs[0] == 7 and consulted == [] and len(res.events) == 1


def test_adrp_depends_on_pc():
    # the derived check behind the PcRelativeAssign screen
    a = run(Machine(code_image(isa.adrp(X8, 1), isa.ret())))
    b = run(Machine(code_image(isa.adrp(X8, 1), isa.ret(), base=0x812000)))
    assert a.regs[8] == 0x401000 and b.regs[8] == 0x813000


@pytest.mark.parametrize("demotion, origin", [("brk", HookOrigin.SIGNAL_BRK),
                                              ("udf", HookOrigin.SIGNAL_UDF)])
def test_signal_paths(demotion, origin):
    img = code_image(isa.movz(X8, 172), isa.svc(0), isa.ret())
    cfg = PlannerConfig(demotion_instr=demotion)
    plan = plan_image(img, cfg, [ConfigEntry(demotion, vaddr=BASE + 4)])
    res = run(Machine(apply(plan, img), hook_gate=plan.hook_gate_addr),
              intercept=Interception.for_plan(plan))
    assert res.regs[0] == 4242
    assert [e.origin for e in res.events] == [origin]
    assert res.events[0].return_addr == BASE + 8


def test_unhandled_brk_stops():
    res = run(machine(isa.brk(1), isa.ret()))
    assert res.status == "trap" and res.trap.kind is TrapKind.BRK


def test_fuel():
    with pytest.raises(FuelExhausted) as exc:
        run(machine(isa.b(0)), fuel=50)
    assert exc.value.result.status == "fuel" and exc.value.result.retired == 50
    with pytest.raises(ValueError):
        run(machine(isa.ret()), fuel=0)


def test_syscall_model():
    model = SyscallModel.from_json({"172": {"return": 5}, "0x40": "echo-arg0", "63": "enosys"})
    m = machine(isa.ret())
    assert model.handle(172, (0,) * 6, m) == 5
    assert model.handle(64, (9,) + (0,) * 5, m) == 9
    assert model.handle(63, (0,) * 6, m) == -38
    assert model.handle(500, (0,) * 6, m) == -38
    assert SyscallModel(unknown="trap").handle(500, (0,) * 6, m) is None
    with pytest.raises(ValueError):
        SyscallModel.from_json({"1": "nonsense"})


def test_exit_group_code():
    res = run(machine(isa.movz(0, 3), isa.movz(X8, 94), isa.svc(0), isa.b(0)))
    assert res.status == "exit" and res.exit_code == 3


def test_memory_writeback():
    res = run(machine(
        isa.movz(1, 0x1234),
        isa.str_(1, SP, -16, Mode.PRE),
        isa.ldr(2, SP, 16, Mode.POST),
        isa.stp_pre(1, 2, SP, -32),
        isa.ldp_post(3, 4, SP, 32),
        isa.ret()))
    assert res.regs[2:5] == (0x1234, 0x1234, 0x1234)
    assert res.sp == 0x7FFF_FFFF_0000


def test_misaligned_sp_base():
    res = run(machine(isa.sub_imm(SP, SP, 8), isa.str_(1, SP, 0), isa.ret()))
    assert res.status == "fault" and res.fault.fault_kind == "BusError"


def test_w_register_zero_extends():
    res = run(machine(isa.movz(1, 0xFFFF), isa.movk(1, 0xFFFF, 16),
                      isa.movk(1, 0xFFFF, 32), isa.add_imm(2, 1, 1, sf=False), isa.ret()))
    assert res.regs[2] == 0


# --- flags and conditions, against a direct Python model ---------------------------

def flags_of(a, b, carry_in, width):
    mask = (1 << width) - 1
    unsigned = a + b + carry_in
    result = unsigned & mask
    sa = a - (1 << width) if a >> (width - 1) else a
    sb = b - (1 << width) if b >> (width - 1) else b
    signed = sa + sb + carry_in
    n = result >> (width - 1)
    z = int(result == 0)
    c = int(unsigned > mask)
    v = int(signed != (result - (1 << width) if n else result))
    return result, (n << 3) | (z << 2) | (c << 1) | v


@settings(max_examples=400, deadline=None)
@given(st.integers(0, MASK), st.integers(0, 4095), st.sampled_from([0, 12]),
       st.booleans(), st.booleans())
def test_add_sub_flags(x, imm, shift, subtract, sf):
    width = 64 if sf else 32
    x &= (1 << width) - 1
    op = isa.sub_imm if subtract else isa.add_imm
    res = run(machine(op(0, 1, imm, shift, sf=sf, setflags=True), isa.mrs_nzcv(2), isa.ret(),
                      regs={1: x}))
    operand = imm << shift
    if subtract:
        value, nzcv = flags_of(x, (~operand) & ((1 << width) - 1), 1, width)
    else:
        value, nzcv = flags_of(x, operand, 0, width)
    assert res.regs[0] == value
    assert res.regs[2] == nzcv << 28


def cond_holds(cond, nzcv):
    n, z, c, v = (nzcv >> 3) & 1, (nzcv >> 2) & 1, (nzcv >> 1) & 1, nzcv & 1
    table = {
        Cond.EQ: z, Cond.NE: not z, Cond.CS: c, Cond.CC: not c, Cond.MI: n, Cond.PL: not n,
        Cond.VS: v, Cond.VC: not v, Cond.HI: c and not z, Cond.LS: not (c and not z),
        Cond.GE: n == v, Cond.LT: n != v, Cond.GT: not z and n == v,
        Cond.LE: not (not z and n == v), Cond.AL: True,
    }
    return bool(table[Cond(cond)])


@given(st.integers(0, 14), st.integers(0, 15))
def test_conditions(cond, nzcv):
    res = run(machine(isa.msr_nzcv(1), isa.movz(0, 0), isa.b_cond(cond, 2), isa.movz(0, 1),
                      isa.ret(), regs={1: nzcv << 28}))
    assert res.regs[0] == (0 if cond_holds(cond, nzcv) else 1)


@given(st.integers(0, MASK), st.integers(0, 63))
def test_test_bit_branches(value, bit):
    res = run(machine(isa.movz(0, 0), isa.tbz(1, bit, 2), isa.movz(0, 1), isa.ret(),
                      regs={1: value}))
    assert res.regs[0] == (value >> bit) & 1


# --- diff_run -------------------------------------------------------------------

def test_diff_run_labels():
    img = code_image(isa.movz(X8, 172), isa.svc(0), isa.ret())
    plan = plan_image(img)
    assert diff_run(img, apply(plan, img), plan).label == "equivalent-with-x8-mask"
    v = diff_run(img, apply(plan, img), plan, mask_x8=False)
    assert v.label == "divergent" and "x8" in v.first_divergence


def test_diff_run_detects_wild_jump():
    img = code_image(isa.movz(X8, 178), isa.b(2), isa.movz(X8, 172), isa.svc(0), isa.ret())
    report = scan(img)
    forced = replace(report, sites=tuple(replace(s, screen=Screen.CLEAN) for s in report.sites))
    plan = plan_image(img, report=forced)
    v = diff_run(img, apply(plan, img), plan)
    assert v.label == "divergent"
    assert v.rewritten.fault is not None and v.rewritten.fault.pc == 178


# --- cost model -------------------------------------------------------------------

def test_cost_ordering():
    base, tramp, sig = (measure_interception_cost(m, 200) for m in
                        ("baseline", "trampoline", "signal"))
    assert base < tramp < sig
    assert sig / tramp >= 5
    assert interception_profile("trampoline", 200).instructions <= 150


def test_cost_is_per_call_and_model_driven():
    assert measure_interception_cost("trampoline", 1) == measure_interception_cost("trampoline", 300)
    cheap = CostModel(signal_delivery=10)
    assert measure_interception_cost("signal", 10, cheap) < measure_interception_cost("signal", 10)
    with pytest.raises(ValueError):
        measure_interception_cost("ptrace")
