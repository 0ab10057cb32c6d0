"""Signal-path fallbacks: the demotion config file and the fault analyzer.

A site whose (assign, svc] interval is entered by an indirect jump executes
only the rewritten ``br x8`` while x8 still holds the system-call number, so
it faults at a tiny address equal to x8.  The analyzer recognises that
signature, works out which site was entered and records a config entry that
demotes the site to a trap instruction on the next run.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional

from . import isa
from .image import ImageError, MemoryImage, parse_addr
from .isa import Kind
from .planner import PlannerConfig, RewritePlan, Strategy, apply, plan_image
from .scanner import ScanReport, scan

__all__ = [
    "ConfigEntry", "FaultContext", "MalformedEntry", "NotOurFault", "LoopBound",
    "parse_config", "write_config", "append_config", "default_config_path",
    "is_rewriter_fault", "analyze_fault", "rerun_loop", "LoopOutcome",
]

log = logging.getLogger(__name__)

CONFIG_ENV = "ASCH_CONFIG"
DEFAULT_CONFIG = "asch.conf"
DEFAULT_BOUND = 16


class MalformedEntry(ValueError):
    def __init__(self, lineno: int, line: str, why: str):
        super().__init__(f"line {lineno}: {why}: {line.strip()!r}")
        self.lineno = lineno


class NotOurFault(Exception):
    pass


class LoopBound(Exception):
    def __init__(self, runs: int, last=None):
        super().__init__(f"re-run loop did not converge after {runs} runs")
        self.runs = runs
        self.last = last


@dataclass(frozen=True)
class ConfigEntry:
    """One demotion record; exactly one of vaddr, sysno or (lib, offset) is set."""

    replacement: str = "brk"
    vaddr: Optional[int] = None
    sysno: Optional[int] = None
    lib: Optional[str] = None
    offset: Optional[int] = None
    note: str = ""

    def __post_init__(self):
        forms = [self.vaddr is not None, self.sysno is not None,
                 self.lib is not None or self.offset is not None]
        if sum(forms) != 1:
            raise ValueError("config entry needs exactly one selector")
        if (self.lib is None) != (self.offset is None):
            raise ValueError("lib selector needs both path and offset")
        if self.replacement not in ("brk", "udf"):
            raise ValueError(f"replacement must be brk or udf, not {self.replacement!r}")

    def matches(self, site, objects: Iterable = ()) -> bool:
        if self.vaddr is not None:
            return site.svc_addr == self.vaddr
        if self.sysno is not None:
            return site.sysno_hint == self.sysno
        for base, path in objects:
            if path == self.lib and site.svc_addr - base == self.offset:
                return True
        return False

    def selector(self) -> tuple:
        return (self.vaddr, self.sysno, self.lib, self.offset)

    def format(self) -> str:
        if self.vaddr is not None:
            text = f"vaddr {self.vaddr:#x} {self.replacement}"
        elif self.sysno is not None:
            text = f"sysno {self.sysno} {self.replacement}"
        else:
            text = f"lib {self.lib} +{self.offset:#x} {self.replacement}"
        return f"{text} # {self.note}" if self.note else text


def default_config_path() -> Path:
    return Path(os.environ.get(CONFIG_ENV, DEFAULT_CONFIG))


def _parse_line(lineno: int, line: str) -> Optional[ConfigEntry]:
    body, _, note = line.partition("#")
    words = body.split()
    if not words:
        return None
    note = note.strip()
    try:
        if words[0] == "sysno" and len(words) == 3:
            return ConfigEntry(words[2], sysno=int(words[1], 0), note=note)
        if words[0] == "vaddr" and len(words) == 3:
            return ConfigEntry(words[2], vaddr=parse_addr(words[1]), note=note)
        if words[0] == "lib" and len(words) == 4:
            if not words[2].startswith("+"):
                raise ValueError("offset must be written +0x...")
            return ConfigEntry(words[3], lib=words[1], offset=int(words[2][1:], 16), note=note)
    except ValueError as exc:
        raise MalformedEntry(lineno, line, str(exc)) from None
    raise MalformedEntry(lineno, line, "unrecognised entry")


def parse_config(path) -> list:
    """Entries in file order; a missing file is an empty config."""
    path = Path(path)
    if not path.exists():
        return []
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        entry = _parse_line(lineno, line)
        if entry is not None:
            entries.append(entry)
    return entries


def write_config(entries: Iterable[ConfigEntry], path) -> None:
    text = "".join(e.format() + "\n" for e in entries)
    Path(path).write_text(text, encoding="utf-8")


def append_config(entry: ConfigEntry, path) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(entry.format() + "\n")


@dataclass(frozen=True)
class FaultContext:
    pc: int
    regs: tuple                      # x0..x30
    mappings: tuple = ()             # (base, path) of loaded objects
    fault_kind: str = "SegFault"     # or "BusError"
    addr: Optional[int] = None       # faulting data address, if any
    sp: int = 0

    def to_json(self) -> dict:
        return {
            "pc": f"{self.pc:#x}",
            "regs": [f"{r:#x}" for r in self.regs],
            "mappings": [[f"{b:#x}", p] for b, p in self.mappings],
            "fault_kind": self.fault_kind,
            "addr": None if self.addr is None else f"{self.addr:#x}",
            "sp": f"{self.sp:#x}",
        }

    @classmethod
    def from_json(cls, doc: dict) -> "FaultContext":
        return cls(
            pc=parse_addr(doc["pc"]),
            regs=tuple(parse_addr(r) for r in doc["regs"]),
            mappings=tuple((parse_addr(b), p) for b, p in doc.get("mappings", [])),
            fault_kind=doc.get("fault_kind", "SegFault"),
            addr=None if doc.get("addr") is None else parse_addr(doc["addr"]),
            sp=parse_addr(doc.get("sp", 0)),
        )


def is_rewriter_fault(ctx: FaultContext, cfg: Optional[PlannerConfig] = None) -> bool:
    """The rewritten ``br x8`` ran without its assign: pc == x8 < max syscall."""
    limit = (cfg or PlannerConfig()).max_syscall_no
    return ctx.pc < limit and ctx.pc == ctx.regs[isa.X8]


def _blr_target(ctx: FaultContext, image: MemoryImage) -> Optional[int]:
    """Value of the register used by the BLR just before x30, if there is one."""
    x30 = ctx.regs[isa.X30]
    try:
        instr = isa.decode(image.read_word(x30 - 4), x30 - 4)
    except ImageError:
        return None
    if instr.kind is not Kind.BLR or instr.rn == 31:
        return None
    return ctx.regs[instr.rn]


def _object_for(addr: int, mappings) -> Optional[tuple]:
    best = None
    for base, path in mappings:
        if base <= addr and (best is None or base > best[0]):
            best = (base, path)
    return best


def analyze_fault(ctx: FaultContext, image: MemoryImage,
                  cfg: Optional[PlannerConfig] = None,
                  report: Optional[ScanReport] = None,
                  exclude: Iterable[int] = ()) -> ConfigEntry:
    """Turn a rewriter fault into a demotion entry for the site that was entered.

    ``image`` is the pre-rewrite image.  The site is located through the BLR
    preceding x30 when its target register still points into a site's
    interval; otherwise by matching the system-call number against the
    sites' x8 assignments.  ``exclude`` lists SVC addresses already demoted.
    """
    cfg = cfg or PlannerConfig()
    if not is_rewriter_fault(ctx, cfg):
        raise NotOurFault(f"pc={ctx.pc:#x} x8={ctx.regs[isa.X8]:#x}")
    report = report or scan(image, cfg.window)
    excluded = set(exclude)
    candidates = [s for s in report.sites if s.svc_addr not in excluded]
    note = f"fault pc={ctx.pc:#x} x30={ctx.regs[isa.X30]:#x}"

    site = None
    target = _blr_target(ctx, image)
    if target is not None:
        hits = [s for s in candidates if s.interval_contains(target)]
        if len(hits) == 1:
            site = hits[0]
    if site is None:
        hits = [s for s in candidates if s.sysno_hint == ctx.pc]
        if len(hits) == 1:
            site = hits[0]
        elif len(hits) > 1:
            log.warning("%d sites assign x8=%d; falling back to a sysno entry", len(hits), ctx.pc)

    if site is not None:
        obj = _object_for(site.svc_addr, ctx.mappings)
        if obj is not None:
            base, path = obj
            return ConfigEntry(cfg.demotion_instr, lib=path, offset=site.svc_addr - base,
                               note=note)
    return ConfigEntry(cfg.demotion_instr, sysno=ctx.pc, note=note)


@dataclass
class LoopOutcome:
    result: object
    runs: int
    plans: list = field(default_factory=list)
    entries: list = field(default_factory=list)


def rerun_loop(image: MemoryImage, cfg: Optional[PlannerConfig], config_path,
               run: Callable, bound: int = DEFAULT_BOUND) -> LoopOutcome:
    """Rewrite, run, and on a rewriter fault demote the culprit and go again.

    ``run(rewritten_image, plan)`` must return an object whose ``fault``
    attribute is a FaultContext or None.
    """
    cfg = cfg or PlannerConfig()
    report = scan(image, cfg.window)
    outcome = LoopOutcome(None, 0)
    for _ in range(bound):
        entries = parse_config(config_path)
        plan = plan_image(image, cfg, entries, report=report)
        result = run(apply(plan, image), plan)
        outcome.runs += 1
        outcome.result = result
        outcome.plans.append(plan)
        fault = getattr(result, "fault", None)
        if fault is None or not is_rewriter_fault(fault, cfg):
            return outcome
        entry = analyze_fault(fault, image, cfg, report, exclude=demoted_sites(plan))
        log.info("rewriter fault at pc=%#x; appending %s", fault.pc, entry.format())
        append_config(entry, config_path)
        outcome.entries.append(entry)
    raise LoopBound(outcome.runs, outcome)


def demoted_sites(plan: RewritePlan) -> list:
    return [sp.site.svc_addr for sp in plan.by_strategy(Strategy.SIGNAL)]
