import pytest
from hypothesis import given, settings, strategies as st

from asch import isa
from asch.image import MemoryImage, Perm, Segment, SYNTH_PREFIX
from asch.isa import Cond, X8
from asch.scanner import NoExecutableSegments, Screen, find_x8_assign, scan
from asch.fixtures import GLIBC_EXPECTED, GLIBC_TOTAL, glibc_like

from conftest import BASE, code_image

SVC = isa.svc(0)
NOP = isa.nop()


def only_site(img):
    sites = scan(img).sites
    assert len(sites) == 1
    return sites[0]


def test_adjacent_pair():
    site = only_site(code_image(isa.movz(X8, 172), SVC, isa.ret()))
    assert site.svc_addr == BASE + 4
    assert site.assign_addr == BASE
    assert site.screen is Screen.CLEAN
    assert site.sysno_hint == 172


def test_no_assign_in_window():
    site = only_site(code_image(*[NOP] * 20, SVC))
    assert site.screen is Screen.NO_ASSIGN_IN_WINDOW
    assert site.assign_addr is None


def test_window_edge():
    at_edge = code_image(isa.movz(X8, 1), *[NOP] * 19, SVC)
    assert only_site(at_edge).screen is Screen.CLEAN
    past_edge = code_image(isa.movz(X8, 1), *[NOP] * 20, SVC)
    assert only_site(past_edge).screen is Screen.NO_ASSIGN_IN_WINDOW
    assert scan(past_edge, window=21).sites[0].screen is Screen.CLEAN


def test_assign_two_back():
    img = code_image(isa.movz(X8, 64), isa.movz(0, 1), SVC)
    found, screen = find_x8_assign(img, BASE + 8)
    assert found[0] == BASE and screen is Screen.CLEAN


def test_pc_relative_assign():
    assert only_site(code_image(isa.adrp(X8, 1), SVC)).screen is Screen.PC_RELATIVE_ASSIGN


def test_branch_between():
    img = code_image(isa.movz(X8, 64), isa.b(2), SVC)
    assert only_site(img).screen is Screen.BRANCH_BETWEEN


def test_opaque_between():
    img = code_image(isa.movz(X8, 64), 0x9B027C20, SVC)     # mul x0, x1, x2
    assert only_site(img).screen is Screen.OPAQUE_BETWEEN


def test_jump_target_on_svc():
    # b.ne to the svc word from further down
    img = code_image(isa.movz(X8, 64), SVC, isa.b_cond(Cond.NE, -1), isa.ret())
    assert only_site(img).screen is Screen.JUMP_TARGET_BETWEEN


def test_jump_target_on_assign_stays_clean():
    img = code_image(isa.movz(X8, 64), SVC, isa.b_cond(Cond.NE, -2), isa.ret())
    assert only_site(img).screen is Screen.CLEAN


def test_jump_elsewhere_stays_clean():
    img = code_image(isa.bl(3), isa.movz(X8, 64), SVC, isa.ret())
    assert only_site(img).screen is Screen.CLEAN


def test_jump_between_wider_interval():
    img = code_image(isa.movz(X8, 64), isa.movz(0, 1), SVC, isa.cbz(3, -2))
    assert only_site(img).screen is Screen.JUMP_TARGET_BETWEEN


def test_x8_read_between():
    img = code_image(isa.movz(X8, 64), isa.add_imm(0, X8, 0), SVC)
    assert only_site(img).screen is Screen.X8_READ_BETWEEN


def test_assign_not_replayable():
    # x8 = x1, then x1 changes before the svc
    img = code_image(isa.mov_reg(X8, 1), isa.movz(1, 5), SVC)
    assert only_site(img).screen is Screen.ASSIGN_NOT_REPLAYABLE
    # x8 computed from itself
    img = code_image(isa.add_imm(X8, X8, 1), SVC)
    assert only_site(img).screen is Screen.ASSIGN_NOT_REPLAYABLE


def test_shared_assignment():
    sites = scan(code_image(isa.movz(X8, 64), SVC, SVC, isa.ret())).sites
    assert [s.screen for s in sites] == [Screen.X8_LIVE_AFTER, Screen.NO_ASSIGN_IN_WINDOW]


def test_x8_live_after_stops_at_write():
    img = code_image(isa.movz(X8, 64), SVC, isa.movz(X8, 65), SVC)
    assert [s.screen for s in scan(img).sites] == [Screen.CLEAN, Screen.CLEAN]


def test_walk_stays_in_segment():
    img = code_image(isa.movz(X8, 64), base=0x10000)
    img.add(Segment(0x10004, bytearray(SVC_WORD.to_bytes(4, "little")), Perm.R | Perm.X, "b"))
    assert only_site(img).screen is Screen.NO_ASSIGN_IN_WINDOW


SVC_WORD = isa.encode(isa.svc(0))


def test_synthesized_segments_skipped():
    img = code_image(isa.movz(X8, 64), SVC)
    img.add(Segment(0x900000, bytearray(SVC_WORD.to_bytes(4, "little")), Perm.R | Perm.X,
                    SYNTH_PREFIX + "trampoline"))
    assert len(scan(img).sites) == 1
    assert len(scan(img, include_synthesized=True).sites) == 2


def test_no_executable_segments():
    img = MemoryImage([Segment(0x1000, bytearray(16), Perm.R | Perm.W)])
    with pytest.raises(NoExecutableSegments):
        scan(img)


def test_report_json():
    doc = scan(code_image(isa.movz(X8, 172), SVC)).to_json()
    assert doc["total"] == 1
    assert doc["sites"][0]["svc_addr"] == "0x400004"
    assert doc["counts"] == {"Clean": 1}


def test_glibc_like_counts():
    report = scan(glibc_like())
    assert len(report.sites) == GLIBC_TOTAL == 929
    counts = {k: v for k, v in report.counts.items() if v}
    assert counts == GLIBC_EXPECTED
    assert counts["JumpTargetBetween"] >= 7 and counts["NoAssignInWindow"] >= 2


# --- property: every SVC is reported once and Clean sites are well formed ---------

simple = st.one_of(
    st.builds(isa.movz, st.integers(0, 30), st.integers(0, 600)),
    st.builds(isa.mov_reg, st.integers(0, 30), st.integers(0, 30)),
    st.builds(isa.add_imm, st.integers(0, 30), st.integers(0, 30), st.integers(0, 4095)),
    st.builds(isa.b, st.integers(-8, 8)),
    st.builds(isa.cbz, st.integers(0, 30), st.integers(-8, 8)),
    st.just(isa.nop()), st.just(isa.svc(0)), st.just(isa.ret()),
    st.just(0x9B027C20),
)


def _is_svc_word(w):
    return (w & 0xFFE0001F) == 0xD4000001


@settings(max_examples=300, deadline=None)
@given(st.lists(simple, min_size=1, max_size=60), st.integers(1, 24))
def test_scan_properties(prog, window):
    img = code_image(*prog)
    words = [img.read_word(BASE + 4 * n) for n in range(len(prog))]
    expected = [BASE + 4 * n for n, w in enumerate(words) if _is_svc_word(w)]
    if not expected:
        assert scan(img, window).sites == ()
        return
    report = scan(img, window)
    assert [s.svc_addr for s in report.sites] == expected
    for site in report.sites:
        if site.screen is not Screen.CLEAN:
            continue
        gap = (site.svc_addr - site.assign_addr) // 4
        assert 1 <= gap <= window
        assert isa.writes_register(site.assign_instr, X8) is True
        between = [isa.decode(img.read_word(a), a)
                   for a in range(site.assign_addr + 4, site.svc_addr, 4)]
        assert all(isa.writes_register(i, X8) is False for i in between)
        assert not any(isa.is_branch(i) for i in between)
        assert not any(site.interval_contains(t) for t in report.direct_branch_targets)
