"""Every fixture program, original vs rewritten."""

import pytest

from asch.emulator import Machine, diff_run, run
from asch.fixtures import (CODE_BASE, all_fixtures, equivalence_fixtures, extra_fixtures,
                           glibc_like, null_deref_fixture, wild_jump_fixture)
from asch.planner import PlannerConfig, apply, plan_image

FIXTURES = equivalence_fixtures() + extra_fixtures()


@pytest.mark.parametrize("fx", FIXTURES, ids=lambda f: f.name)
def test_fixture_equivalence(fx):
    plan = plan_image(fx.image, fx.cfg or PlannerConfig())
    verdict = diff_run(fx.image, apply(plan, fx.image), plan, inputs=fx.inputs)
    assert verdict.label == fx.expect, verdict.divergences
    orig, new = verdict.original, verdict.rewritten
    assert orig.status == "exit"
    assert orig.trace == new.trace
    assert len(new.events) == len(orig.svc_sites)


def test_fixture_names_unique():
    names = [f.name for f in all_fixtures()]
    assert len(names) == len(set(names)) and len(equivalence_fixtures()) >= 20


def test_loops_make_a_thousand_calls():
    fx = {f.name: f for f in FIXTURES}["loop_1000_getpid"]
    assert len(run(Machine(fx.image)).trace) == 1001


@pytest.mark.parametrize("make", [null_deref_fixture, wild_jump_fixture])
def test_fault_fixtures_fault(make):
    res = run(Machine(make().image))
    assert res.status == "fault"


def test_glibc_like_is_deterministic():
    a, b = glibc_like(), glibc_like()
    assert [bytes(s.data) for s in a.segments] == [bytes(s.data) for s in b.segments]
    assert [bytes(s.data) for s in glibc_like(1).segments] != [bytes(s.data) for s in a.segments]


def test_code_base():
    assert all(f.image.entry == CODE_BASE for f in FIXTURES)
