import pytest
from hypothesis import given, strategies as st

from asch import isa
from asch.completeness import (ConfigEntry, FaultContext, LoopBound, MalformedEntry,
                               NotOurFault, analyze_fault, append_config, is_rewriter_fault,
                               parse_config, rerun_loop, write_config)
from asch.emulator import Interception, Machine, run
from asch.fixtures import loop_bound_fixture, strategy3_fixture
from asch.image import MemoryImage, Perm, Segment
from asch.isa import X8
from asch.planner import PlannerConfig, Strategy

from conftest import code_image


def regs(**kw):
    out = [0] * 31
    for name, value in kw.items():
        out[int(name[1:])] = value
    return tuple(out)


def test_parse_examples(tmp_path):
    path = tmp_path / "asch.conf"
    path.write_text("# header\n\nsysno 64 brk # from fault-analyzer\n"
                    "lib /lib/libc-2.31.so +0x9f2c4 brk\nvaddr 0x400008 udf\n")
    a, b, c = parse_config(path)
    assert (a.sysno, a.replacement, a.note) == (64, "brk", "from fault-analyzer")
    assert (b.lib, b.offset, b.replacement) == ("/lib/libc-2.31.so", 0x9F2C4, "brk")
    assert (c.vaddr, c.replacement) == (0x400008, "udf")


@pytest.mark.parametrize("line", [
    "sysno 64", "sysno x brk", "vaddr 0x10 hlt", "lib /x 0x10 brk", "frob 1 brk",
])
def test_malformed(tmp_path, line):
    path = tmp_path / "c"
    path.write_text("sysno 1 brk\n" + line + "\n")
    with pytest.raises(MalformedEntry) as exc:
        parse_config(path)
    assert exc.value.lineno == 2


def test_missing_config_is_empty(tmp_path):
    assert parse_config(tmp_path / "nope") == []


def test_entry_needs_one_selector():
    with pytest.raises(ValueError):
        ConfigEntry("brk")
    with pytest.raises(ValueError):
        ConfigEntry("brk", vaddr=1, sysno=2)


entries = st.one_of(
    st.builds(ConfigEntry, st.sampled_from(["brk", "udf"]), vaddr=st.integers(0, (1 << 48) - 1)),
    st.builds(ConfigEntry, st.sampled_from(["brk", "udf"]), sysno=st.integers(0, 599)),
    st.builds(ConfigEntry, st.sampled_from(["brk", "udf"]),
              lib=st.from_regex(r"/[a-z0-9_./-]{1,30}", fullmatch=True),
              offset=st.integers(0, 1 << 32)),
)


@given(st.lists(entries, max_size=8))
def test_config_round_trip(tmp_path_factory, items):
    path = tmp_path_factory.mktemp("cfg") / "asch.conf"
    write_config(items, path)
    assert parse_config(path) == items


def test_append(tmp_path):
    path = tmp_path / "c"
    append_config(ConfigEntry("brk", sysno=1), path)
    append_config(ConfigEntry("udf", vaddr=0x10, note="x"), path)
    assert [e.selector() for e in parse_config(path)] == [(None, 1, None, None),
                                                          (0x10, None, None, None)]


@pytest.mark.parametrize("pc, x8, ours", [
    (64, 64, True), (0, 0x7FFF1234, False), (64, 65, False), (600, 600, False), (599, 599, True),
])
def test_discrimination(pc, x8, ours):
    assert is_rewriter_fault(FaultContext(pc, regs(x8=x8))) is ours


def _lib_image():
    # object based at 0x7f000000; a getpid-like pair at +0x9f2c0
    seg = bytearray(0x1000)
    for off, ins in ((0x2C0, isa.movz(X8, 64)), (0x2C4, isa.svc(0)), (0x2C8, isa.ret()),
                     (0x300, isa.blr(9))):
        seg[off:off + 4] = isa.encode(ins).to_bytes(4, "little")
    return MemoryImage([Segment(0x7F09F000, seg, Perm.R | Perm.X, "/lib/libc-2.31.so")])


def test_analyze_lib_offset():
    img = _lib_image()
    ctx = FaultContext(64, regs(x8=64, x9=0x12345678, x30=0x7F09F304),
                       mappings=((0x7F000000, "/lib/libc-2.31.so"),))
    entry = analyze_fault(ctx, img)
    assert (entry.lib, entry.offset, entry.replacement) == ("/lib/libc-2.31.so", 0x9F2C4, "brk")


def test_analyze_blr_chain():
    img = _lib_image()
    # x9 (the BLR target) points at the svc; the hint would also work
    ctx = FaultContext(64, regs(x8=64, x9=0x7F09F2C4, x30=0x7F09F304))
    assert analyze_fault(ctx, img).sysno == 64      # no mapping, so falls back to sysno form
    ctx = FaultContext(64, regs(x8=64, x9=0x7F09F2C4, x30=0x7F09F304),
                       mappings=((0x7F09F000, "/lib/x.so"),))
    assert analyze_fault(ctx, img).offset == 0x2C4


def test_analyze_ambiguous_falls_back_to_sysno():
    img = code_image(isa.movz(X8, 64), isa.svc(0), isa.movz(X8, 64), isa.svc(0), isa.ret())
    entry = analyze_fault(FaultContext(64, regs(x8=64)), img)
    assert entry.sysno == 64 and entry.lib is None


def test_analyze_not_ours():
    with pytest.raises(NotOurFault):
        analyze_fault(FaultContext(0, regs(x8=0x7FFF1234)), code_image(isa.ret()))


def emu(image, plan):
    m = Machine(image, hook_gate=plan.hook_gate_addr)
    return run(m, intercept=Interception.for_plan(plan))


def test_loop_strategy3(tmp_path):
    fx = strategy3_fixture()
    conf = tmp_path / "asch.conf"
    out = rerun_loop(fx.image, None, conf, emu)
    assert out.runs == 2 and len(out.entries) == 1
    assert parse_config(conf) == out.entries
    assert out.result.status == "exit" and out.result.fault is None
    assert any(sp.strategy is Strategy.SIGNAL for sp in out.plans[-1].site_plans)


def test_loop_without_indirect_entries(tmp_path):
    img = code_image(isa.movz(X8, 172), isa.svc(0), isa.ret())
    conf = tmp_path / "asch.conf"
    out = rerun_loop(img, PlannerConfig(), conf, emu)
    assert out.runs == 1 and not conf.exists()


def test_loop_bound(tmp_path):
    fx = loop_bound_fixture()
    with pytest.raises(LoopBound) as exc:
        rerun_loop(fx.image, None, tmp_path / "c", emu)
    assert exc.value.runs == 16
