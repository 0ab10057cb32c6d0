import time

import pytest
from hypothesis import given, settings, strategies as st

from asch import isa
from asch.completeness import ConfigEntry
from asch.image import WriteProtected
from asch.isa import Kind, X8
from asch.planner import (AddressSpaceExhausted, PlannerConfig, StaleImage, Strategy,
                          allocate, apply, classify, plan_image)
from asch.scanner import ScanReport, Screen, SvcSite, scan

from conftest import BASE, code_image

L1_LIMIT = 3840          # (65536 - 4096) / 16


def clean_report(n):
    movz = isa.movz(X8, 172)
    sites = tuple(SvcSite(0x100000 + 8 * k + 4, 0x100000 + 8 * k, movz, Screen.CLEAN, 172)
                  for k in range(n))
    return ScanReport(sites)


def expected_l1(index):
    return 4096 + 16 * index if index < L1_LIMIT else None


def check_capacity(n):
    plan = allocate(classify(clean_report(n), PlannerConfig()), PlannerConfig())
    for k, sp in enumerate(plan.site_plans):
        if k < L1_LIMIT:
            assert sp.strategy is Strategy.MOV_BR
            assert sp.l1_addr == expected_l1(k)
        else:
            assert sp.strategy is Strategy.ADRP_BR
            assert sp.l1_addr is None
            assert sp.l2_addr % 4096 == 0
    return plan


def test_capacity_boundaries():
    plan = check_capacity(4000)
    sps = plan.site_plans
    assert sps[0].l1_addr == 4096
    assert sps[3839].l1_addr == 65520 and sps[3839].l1_addr + 16 == 65536
    assert sps[3840].strategy is Strategy.ADRP_BR
    assert len({sp.l2_addr for sp in sps}) == 4000


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4000))
def test_capacity_property(n):
    check_capacity(n)


def test_capacity_is_fast():
    t = time.perf_counter()
    check_capacity(4000)
    assert time.perf_counter() - t < 1.0


def test_default_capacity_is_3840():
    assert PlannerConfig().max_mov_trampolines == 3840
    with pytest.raises(ValueError):
        PlannerConfig(max_mov_trampolines=3841)
    with pytest.raises(ValueError):
        PlannerConfig(l1_base=0)
    with pytest.raises(ValueError):
        PlannerConfig(demotion_instr="hlt")


def test_too_many_l1_slots():
    cls = classify(clean_report(3), PlannerConfig(max_mov_trampolines=3))
    with pytest.raises(AddressSpaceExhausted):
        allocate(cls, PlannerConfig(l1_base=65536 - 32, max_mov_trampolines=2))


def test_classify_examples():
    assert {c.strategy for c in classify(clean_report(929), PlannerConfig())} == {Strategy.MOV_BR}
    out = classify(clean_report(3841), PlannerConfig())
    assert [c.strategy for c in out].count(Strategy.ADRP_BR) == 1
    bad = ScanReport((SvcSite(0x1000, screen=Screen.NO_ASSIGN_IN_WINDOW),))
    assert classify(bad, PlannerConfig())[0].strategy is Strategy.SIGNAL


def test_config_entries_force_signal():
    report = clean_report(3)
    entries = [ConfigEntry("udf", vaddr=0x100004), ConfigEntry("brk", sysno=999)]
    out = classify(report, PlannerConfig(), entries)
    assert out[0].strategy is Strategy.SIGNAL and out[0].trap == "udf"
    assert out[0].site.screen is Screen.CONFIG_DEMOTED
    assert [c.strategy for c in out[1:]] == [Strategy.MOV_BR] * 2


def test_lib_entry_matches_by_offset():
    img = code_image(isa.movz(X8, 1), isa.svc(0), source="/lib/libx.so")
    entry = ConfigEntry("brk", lib="/lib/libx.so", offset=4)
    plan = plan_image(img, user_config=[entry])
    assert plan.site_plans[0].strategy is Strategy.SIGNAL


def _pair_image(n=1, demote=False):
    body = []
    for _ in range(n):
        body += [isa.movz(X8, 172), isa.svc(0)]
    if demote:
        body += [isa.movz(X8, 20), isa.b(2), isa.svc(0)]
    return code_image(*body, isa.ret())


def test_emit_movbr_words():
    img = _pair_image()
    plan = plan_image(img)
    p_assign, p_svc = plan.site_plans[0].patches
    assert (p_assign.addr, p_assign.new) == (BASE, 0xD2820008)
    assert (p_svc.addr, p_svc.new) == (BASE + 4, 0xD61F0100)
    assert p_assign.old == isa.encode(isa.movz(X8, 172)) and p_svc.old == 0xD4000001


def test_emit_adrp_word():
    img = _pair_image(2)
    plan = plan_image(img, PlannerConfig(max_mov_trampolines=1))
    sp = plan.site_plans[1]
    assert sp.strategy is Strategy.ADRP_BR
    adrp = isa.decode(sp.patches[0].new, sp.site.assign_addr)
    assert adrp.kind is Kind.ADRP and adrp.rd == X8
    assert ((sp.site.assign_addr >> 12) + adrp.imm) << 12 == sp.l2_addr


@pytest.mark.parametrize("demotion, word", [("brk", 0xD421EB80), ("udf", 0x00000000)])
def test_emit_signal_word(demotion, word):
    img = _pair_image(1, demote=True)
    plan = plan_image(img, PlannerConfig(demotion_instr=demotion))
    sp = plan.site_plans[1]
    assert sp.strategy is Strategy.SIGNAL
    assert len(sp.patches) == 1 and sp.patches[0].new == word
    assert word == isa.encode(isa.brk(0xF5C) if demotion == "brk" else isa.udf(0))


def test_apply_replaces_every_site():
    img = _pair_image(3, demote=True)
    plan = plan_image(img)
    out = apply(plan, img)
    for sp in plan.site_plans:
        assert isa.decode(out.read_word(sp.site.svc_addr), 0).kind is not Kind.SVC
    assert scan(out).sites == ()
    assert img.read_word(BASE + 4) == 0xD4000001      # input untouched


def test_apply_stale_and_protected():
    img = _pair_image()
    plan = plan_image(img)
    with pytest.raises(StaleImage):
        apply(plan, apply(plan, img))
    with pytest.raises(WriteProtected):
        apply(plan, img, rewrite=False)


def test_region_layout():
    img = _pair_image(4)
    plan = plan_image(img, PlannerConfig(max_mov_trampolines=2))
    assert plan.region_base % 4096 == 0
    assert plan.region_base >= img.max_end()
    out = apply(plan, img)
    for seg in plan.segments():
        assert seg.executable and not seg.writable
    assert len(out.segments) == len(img.segments) + 2
    addrs = [p.addr for p in plan.patches()]
    assert len(addrs) == len(set(addrs))


def test_plan_json_is_deterministic():
    img = _pair_image(5, demote=True)
    assert plan_image(img).to_json() == plan_image(img).to_json()
