import pytest
from hypothesis import given, settings, strategies as st

from asch import isa, trampoline as tr
from asch.emulator import Machine, diff_run, run, Interception
from asch.isa import Kind, Mode, SP, X8
from asch.planner import PlannerConfig, apply, plan_image
from asch.scanner import Screen, SvcSite

from conftest import BASE, code_image


def test_l1_slices_address():
    assert tr.gen_l1(0x0000_7000_0000) == [
        isa.movz(X8, 0), isa.movk(X8, 0x7000, 16), isa.movk(X8, 0, 32), isa.br(X8)]
    assert tr.gen_l1(0x10000) == [
        isa.movz(X8, 0), isa.movk(X8, 1, 16), isa.movk(X8, 0, 32), isa.br(X8)]
    with pytest.raises(isa.OutOfRange):
        tr.gen_l1(1 << 48)
    assert len(tr.assemble(tr.gen_l1(0x1234_5678_9ABC))) == tr.L1_SIZE


def test_l2_shape():
    assign = isa.movz(X8, 172).at(0x400004)
    site = SvcSite(0x400008, 0x400004, assign, Screen.CLEAN, 172)
    block = tr.gen_l2(site, l3_addr=0x900010, self_addr=0x900400)
    assert len(block) == 6 and len(tr.assemble(block)) == tr.L2_SIZE
    assert block[:3] == [isa.movz(X8, 0x000C), isa.movk(X8, 0x40, 16), isa.movk(X8, 0, 32)]
    assert block[3] == isa.str_(X8, SP, -16, Mode.PRE)
    assert block[4] == assign
    assert isa.branch_target(block[5]) == 0x900010


def test_l2_keeps_original_word():
    # a 32-bit orr with a redundant immr bit must be copied bit for bit
    word = 0x32340008
    assign = isa.decode(word, 0x400000)
    site = SvcSite(0x400004, 0x400000, assign, Screen.CLEAN)
    block = tr.gen_l2(site, 0x900010, 0x900400)
    assert tr.assemble(block)[16:20] == word.to_bytes(4, "little")


def test_l2_errors():
    site = SvcSite(0x400004, 0x400000, isa.adrp(X8, 1), Screen.PC_RELATIVE_ASSIGN)
    with pytest.raises(tr.NotRelocatable):
        tr.gen_l2(site, 0x900010, 0x900400)
    site = SvcSite(0x400004, 0x400000, isa.movz(X8, 1), Screen.CLEAN)
    with pytest.raises(tr.Unreachable):
        tr.gen_l2(site, 0x900010 + (1 << 28), 0x900400)


def test_l3_is_plain_subset():
    block = tr.gen_l3(0x900000, 0x900010)
    words = tr.assemble(block)
    for n in range(len(block)):
        w = int.from_bytes(words[4 * n:4 * n + 4], "little")
        assert isa.decode(w, 0).kind is not Kind.OPAQUE
    assert sum(1 for i in block if i.kind is Kind.SVC) == 1
    assert block[-1] == isa.br(X8)


def test_frame_offsets():
    assert tr.reg_offset(0) == 16 and tr.reg_offset(30) == 256
    assert (tr.CLAIM_OFFSET, tr.NZCV_OFFSET, tr.RET_OFFSET) == (0, 264, 272)


def test_layout_symbols():
    plan = plan_image(code_image(isa.movz(X8, 172), isa.svc(0), isa.ret()))
    syms = plan.layout.symbols()
    assert syms["l1_0"] == "0x1000"
    assert syms["hook_gate"] == f"{plan.region_base:#x}"
    assert int(syms["l3"], 16) == plan.l3_addr


def _getpid():
    return code_image(isa.movz(X8, 172), isa.svc(0), isa.ret())


def test_claimed_call_skips_svc():
    img = _getpid()
    plan = plan_image(img)
    m = Machine(apply(plan, img), hook_gate=plan.hook_gate_addr)
    res = run(m, hook=lambda e: 7, intercept=Interception.for_plan(plan))
    assert res.status == "exit" and res.regs[0] == 7
    assert res.trace == [] and len(res.events) == 1


def test_unclaimed_call_reaches_kernel():
    img = _getpid()
    plan = plan_image(img)
    m = Machine(apply(plan, img), hook_gate=plan.hook_gate_addr,
                regs={1: 11, 2: 22, 3: 33, 4: 44, 5: 55})
    res = run(m, intercept=Interception.for_plan(plan))
    assert res.regs[0] == 4242
    assert res.trace == [(172, (0, 11, 22, 33, 44, 55))]
    ev = res.events[0]
    assert ev.origin is tr.HookOrigin.TRAMPOLINE
    assert (ev.sysno, ev.return_addr) == (172, BASE + 8)
    assert ev.sp == res.sp


# --- pass-through: everything but x8 survives a round trip through L1/L2/L3 ------

@settings(max_examples=150, deadline=None)
@given(regs=st.lists(st.integers(0, (1 << 64) - 1), min_size=31, max_size=31),
       nzcv=st.integers(0, 15), sysno=st.integers(0, 599), adrp=st.booleans())
def test_pass_through_equivalence(regs, nzcv, sysno, adrp):
    # msr nzcv from x20, then the site, then return
    img = code_image(isa.msr_nzcv(20),
                     isa.movz(X8, sysno), isa.svc(0), isa.ret(29))
    inputs = {r: v for r, v in enumerate(regs) if r not in (8, 30)}
    inputs[20] = nzcv << 28
    inputs[29] = 0x7FFF_DEAD_0000
    cfg = PlannerConfig(max_mov_trampolines=0 if adrp else None)
    plan = plan_image(img, cfg)
    verdict = diff_run(img, apply(plan, img), plan, inputs=inputs)
    assert verdict.label == "equivalent-with-x8-mask", verdict.divergences
