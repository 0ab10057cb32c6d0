"""Linear-sweep discovery of SVC sites and their x8 assignments."""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Optional

from . import isa
from .image import MemoryImage
from .isa import Instr, Kind

__all__ = [
    "Screen", "SvcSite", "ScanReport", "NoExecutableSegments",
    "scan", "find_x8_assign", "mark_jump_targets", "DEFAULT_WINDOW",
]

DEFAULT_WINDOW = 20


class NoExecutableSegments(Exception):
    pass


class Screen(enum.Enum):
    CLEAN = "Clean"
    NO_ASSIGN_IN_WINDOW = "NoAssignInWindow"
    OPAQUE_BETWEEN = "OpaqueBetween"
    BRANCH_BETWEEN = "BranchBetween"
    JUMP_TARGET_BETWEEN = "JumpTargetBetween"
    PC_RELATIVE_ASSIGN = "PcRelativeAssign"
    # The assign reads x8 or sp, or a register changed between it and the SVC,
    # so re-executing it inside the trampoline would compute something else.
    ASSIGN_NOT_REPLAYABLE = "AssignNotReplayable"
    # An instruction between the pair reads x8, which holds the trampoline
    # address after rewriting.
    X8_READ_BETWEEN = "X8ReadBetween"
    # x8 is read again after the SVC (e.g. a second SVC reusing the number);
    # a trampoline returns with x8 holding the return address instead.
    X8_LIVE_AFTER = "X8LiveAfter"
    CONFIG_DEMOTED = "ConfigDemoted"


@dataclass(frozen=True)
class SvcSite:
    svc_addr: int
    assign_addr: Optional[int] = None
    assign_instr: Optional[Instr] = None
    screen: Screen = Screen.CLEAN
    sysno_hint: Optional[int] = None

    def interval_contains(self, addr: int) -> bool:
        """True when ``addr`` lies in (assign_addr, svc_addr]."""
        return self.assign_addr is not None and self.assign_addr < addr <= self.svc_addr

    def to_json(self) -> dict:
        return {
            "svc_addr": f"{self.svc_addr:#x}",
            "assign_addr": None if self.assign_addr is None else f"{self.assign_addr:#x}",
            "assign": None if self.assign_instr is None else str(self.assign_instr),
            "screen": self.screen.value,
            "sysno_hint": self.sysno_hint,
        }


@dataclass(frozen=True)
class ScanReport:
    sites: tuple
    direct_branch_targets: frozenset = field(default_factory=frozenset)
    window: int = DEFAULT_WINDOW

    @property
    def counts(self) -> dict:
        c = Counter(s.screen for s in self.sites)
        return {screen.value: c.get(screen, 0) for screen in Screen}

    def site_at(self, svc_addr: int) -> Optional[SvcSite]:
        for s in self.sites:
            if s.svc_addr == svc_addr:
                return s
        return None

    def to_json(self) -> dict:
        return {
            "schema_version": 1,
            "window": self.window,
            "total": len(self.sites),
            "counts": {k: v for k, v in self.counts.items() if v},
            "direct_branch_targets": len(self.direct_branch_targets),
            "sites": [s.to_json() for s in self.sites],
        }


def _sysno_hint(instr: Instr) -> Optional[int]:
    if instr.kind is Kind.MOVZ and instr.shift == 0:
        return instr.imm
    return None


def _source_regs(instr: Instr) -> list:
    return [r for r in range(32) if isa.reads_register(instr, r)]


def _decode_segment(seg) -> dict:
    return {addr: isa.decode(word, addr) for addr, word in seg.words()}


def find_x8_assign(image: MemoryImage, svc_addr: int, window: int = DEFAULT_WINDOW,
                   claimed: frozenset = frozenset(), _decoded: Optional[dict] = None):
    """Walk back from an SVC looking for the instruction that sets x8.

    Returns ``((addr, instr) | None, screen)``.  The walk stays inside the
    SVC's segment, looks at most ``window`` instructions back and stops at any
    address in ``claimed`` (other SVCs).
    """
    seg = image.segment_for(svc_addr, 4)
    decoded = _decoded

    def at(addr):
        if decoded is not None and addr in decoded:
            return decoded[addr]
        return isa.decode(image.read_word(addr), addr)

    between = []
    found = None
    addr = svc_addr - 4
    for _ in range(window):
        if addr < seg.vaddr or addr in claimed:
            break
        instr = at(addr)
        if isa.writes_register(instr, isa.X8):
            found = (addr, instr)
            break
        between.append(instr)
        addr -= 4

    if found is None:
        return None, Screen.NO_ASSIGN_IN_WINDOW

    assign = found[1]
    if any(isa.is_branch(i) for i in between):
        return found, Screen.BRANCH_BETWEEN
    if any(isa.writes_register(i, isa.X8) is None for i in between):
        return found, Screen.OPAQUE_BETWEEN
    if isa.is_pc_relative(assign):
        return found, Screen.PC_RELATIVE_ASSIGN
    sources = _source_regs(assign)
    if (isa.X8 in sources or isa.SP in sources
            or any(isa.writes_register(i, r) for i in between for r in sources)
            or (assign.kind is Kind.LDR_IMM
                and any(i.kind in (Kind.STR_IMM, Kind.STP_PRE) for i in between))):
        return found, Screen.ASSIGN_NOT_REPLAYABLE
    if any(isa.reads_register(i, isa.X8) for i in between):
        return found, Screen.X8_READ_BETWEEN
    if _x8_live_after(at, svc_addr, seg, window):
        return found, Screen.X8_LIVE_AFTER
    return found, Screen.CLEAN


def _x8_live_after(at, svc_addr: int, seg, window: int) -> bool:
    """Straight-line look past the SVC for a read of x8 before it is rewritten.

    Best effort: stops at the first branch or undecoded word.  x8 is
    call-clobbered, so compiled code does not carry it across calls.
    """
    addr = svc_addr + 4
    for _ in range(window):
        if addr + 4 > seg.end:
            return False
        instr = at(addr)
        if instr.kind in (Kind.SVC, Kind.BRK):
            return True
        reads = isa.reads_register(instr, isa.X8)
        if reads:
            return True
        if reads is None or isa.is_branch(instr) or isa.writes_register(instr, isa.X8):
            return False
        addr += 4
    return False


def mark_jump_targets(report: ScanReport) -> ScanReport:
    """Flag sites whose (assign, svc] interval is the target of a direct branch."""
    targets = report.direct_branch_targets
    if not targets:
        return report
    sites = []
    for site in report.sites:
        if site.assign_addr is not None and any(
                a in targets for a in range(site.assign_addr + 4, site.svc_addr + 4, 4)):
            site = replace(site, screen=Screen.JUMP_TARGET_BETWEEN)
        sites.append(site)
    return replace(report, sites=tuple(sites))


def scan(image: MemoryImage, window: int = DEFAULT_WINDOW,
         include_synthesized: bool = False) -> ScanReport:
    """Sweep every executable segment; returns sites sorted by SVC address.

    Trampoline segments added by a previous rewrite are skipped unless
    ``include_synthesized`` is set.
    """
    segments = [s for s in image.executable_segments()
                if len(s.data) and (include_synthesized or not s.synthesized)]
    if not segments:
        raise NoExecutableSegments("image has no executable code")

    decoded: dict = {}
    for seg in segments:
        decoded.update(_decode_segment(seg))

    svcs = sorted(a for a, i in decoded.items() if i.kind is Kind.SVC)
    targets = frozenset(
        isa.branch_target(i) for i in decoded.values() if isa.is_direct_branch(i))
    claimed = frozenset(svcs)

    sites = []
    for svc_addr in svcs:
        found, screen = find_x8_assign(image, svc_addr, window, claimed, decoded)
        if found is None:
            sites.append(SvcSite(svc_addr, screen=screen))
        else:
            addr, instr = found
            sites.append(SvcSite(svc_addr, addr, instr, screen, _sysno_hint(instr)))
    return mark_jump_targets(ScanReport(tuple(sites), targets, window))
