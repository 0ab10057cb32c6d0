"""Replacement strategy selection, trampoline placement and patch emission."""

from __future__ import annotations

import enum
import logging
from dataclasses import asdict, dataclass, replace
from typing import Iterable, NamedTuple, Optional

from . import isa, trampoline
from .image import MemoryImage, Perm, Segment, SYNTH_PREFIX, OverlappingSegments
from .scanner import ScanReport, Screen, SvcSite, scan

__all__ = [
    "Strategy", "PlannerConfig", "Patch", "SitePlan", "RewritePlan",
    "Classified", "PlanError", "AddressSpaceExhausted", "StaleImage",
    "classify", "allocate", "emit_patches", "apply", "plan_image",
]

log = logging.getLogger(__name__)

PAGE = 4096
L1_SOURCE = SYNTH_PREFIX + "l1"
REGION_SOURCE = SYNTH_PREFIX + "trampoline"


class PlanError(Exception):
    pass


class AddressSpaceExhausted(PlanError):
    pass


class StaleImage(PlanError):
    pass


class Strategy(enum.Enum):
    MOV_BR = "MovBr"
    ADRP_BR = "AdrpBr"
    SIGNAL = "Signal"


@dataclass(frozen=True)
class PlannerConfig:
    l1_base: int = 4096
    l1_slot_size: int = trampoline.L1_SIZE
    max_mov_trampolines: Optional[int] = None   # None: fill [l1_base, mov_addr_limit)
    mov_addr_limit: int = 1 << 16
    max_syscall_no: int = 600
    window: int = 20
    demotion_instr: str = "brk"
    brk_imm: int = 0xF5C
    region_base: Optional[int] = None

    def __post_init__(self):
        if self.l1_base < PAGE:
            raise ValueError(f"l1_base {self.l1_base:#x} would map page zero")
        if self.l1_base % self.l1_slot_size:
            raise ValueError("l1_base must be slot aligned")
        room = (self.mov_addr_limit - self.l1_base) // self.l1_slot_size
        if self.max_mov_trampolines is None:
            object.__setattr__(self, "max_mov_trampolines", max(room, 0))
        elif self.max_mov_trampolines > room:
            raise ValueError(
                f"{self.max_mov_trampolines} L1 slots do not fit below {self.mov_addr_limit:#x}")
        if self.demotion_instr not in ("brk", "udf"):
            raise ValueError(f"demotion must be brk or udf, not {self.demotion_instr!r}")
        if not 0 <= self.brk_imm < 1 << 16:
            raise ValueError("brk_imm must fit 16 bits")

    def to_json(self) -> dict:
        return asdict(self)


class Patch(NamedTuple):
    addr: int
    old: int
    new: int


@dataclass(frozen=True)
class SitePlan:
    site: SvcSite
    strategy: Strategy
    l1_addr: Optional[int] = None
    l2_addr: Optional[int] = None
    patches: tuple = ()
    trap: str = "brk"

    def to_json(self) -> dict:
        hx = lambda v: None if v is None else f"{v:#x}"  # noqa: E731
        out = {
            "svc_addr": hx(self.site.svc_addr),
            "assign_addr": hx(self.site.assign_addr),
            "screen": self.site.screen.value,
            "sysno_hint": self.site.sysno_hint,
            "strategy": self.strategy.value,
            "l1_addr": hx(self.l1_addr),
            "l2_addr": hx(self.l2_addr),
            "patches": [[hx(p.addr), f"{p.old:#010x}", f"{p.new:#010x}"] for p in self.patches],
        }
        if self.strategy is Strategy.SIGNAL:
            out["trap"] = self.trap
        return out


@dataclass
class RewritePlan:
    site_plans: list
    cfg: PlannerConfig
    layout: Optional[trampoline.TrampolineLayout] = None
    trampoline_region: Optional[Segment] = None
    l1_region: Optional[Segment] = None
    region_base: int = 0
    region_end: int = 0

    @property
    def l3_addr(self) -> int:
        return self.layout.l3_addr

    @property
    def hook_gate_addr(self) -> int:
        return self.layout.hook_gate_addr

    def patches(self) -> list:
        return [p for sp in self.site_plans for p in sp.patches]

    def by_strategy(self, strategy: Strategy) -> list:
        return [sp for sp in self.site_plans if sp.strategy is strategy]

    def udf_sites(self) -> frozenset:
        return frozenset(sp.site.svc_addr for sp in self.site_plans
                         if sp.strategy is Strategy.SIGNAL and sp.trap == "udf")

    def segments(self) -> list:
        return [s for s in (self.l1_region, self.trampoline_region) if s is not None]

    def to_json(self) -> dict:
        counts = {s.value: len(self.by_strategy(s)) for s in Strategy}
        return {
            "schema_version": 1,
            "config": self.cfg.to_json(),
            "counts": counts,
            "hook_gate": f"{self.hook_gate_addr:#x}",
            "l3_addr": f"{self.l3_addr:#x}",
            "regions": [{"vaddr": f"{s.vaddr:#x}", "size": len(s.data), "source": s.source}
                        for s in self.segments()],
            "sites": [sp.to_json() for sp in self.site_plans],
        }


class Classified(NamedTuple):
    site: SvcSite
    strategy: Strategy
    trap: str


def classify(report: ScanReport, cfg: PlannerConfig, user_config: Iterable = (),
             image: Optional[MemoryImage] = None) -> list:
    """Pick a strategy per site; config entries force the signal path."""
    entries = list(user_config)
    objects = image.objects() if image is not None else []
    out = []
    mov_used = 0
    for site in sorted(report.sites, key=lambda s: s.svc_addr):
        match = next((e for e in entries if e.matches(site, objects)), None)
        if match is not None:
            site = replace(site, screen=Screen.CONFIG_DEMOTED)
            out.append(Classified(site, Strategy.SIGNAL, match.replacement))
        elif site.screen is not Screen.CLEAN:
            out.append(Classified(site, Strategy.SIGNAL, cfg.demotion_instr))
        elif mov_used < cfg.max_mov_trampolines:
            mov_used += 1
            out.append(Classified(site, Strategy.MOV_BR, cfg.demotion_instr))
        else:
            out.append(Classified(site, Strategy.ADRP_BR, cfg.demotion_instr))
    return out


def _align(value: int, to: int) -> int:
    return (value + to - 1) // to * to


def allocate(classified: list, cfg: PlannerConfig,
             image: Optional[MemoryImage] = None) -> RewritePlan:
    """Assign L1 slots and L2/L3 addresses; patches are filled in later."""
    n_mov = sum(1 for c in classified if c.strategy is Strategy.MOV_BR)
    if cfg.l1_base + n_mov * cfg.l1_slot_size > cfg.mov_addr_limit:
        raise AddressSpaceExhausted(f"{n_mov} L1 slots exceed {cfg.mov_addr_limit:#x}")

    base = cfg.region_base
    if base is None:
        top = image.max_end() if image is not None else 0
        base = _align(max(top, cfg.mov_addr_limit), 1 << 20) + (1 << 20)
    if base % PAGE:
        raise PlanError(f"trampoline region base {base:#x} is not page aligned")

    gate_addr = base
    l3_addr = base + 16
    l3_len = 4 * len(trampoline.gen_l3(0))
    cursor = _align(l3_addr + l3_len, 16)

    plans = []
    mov_index = 0
    adrp_sites = []
    for c in classified:
        if c.strategy is Strategy.MOV_BR:
            l1 = cfg.l1_base + cfg.l1_slot_size * mov_index
            mov_index += 1
            plans.append(SitePlan(c.site, c.strategy, l1_addr=l1, l2_addr=cursor))
            cursor += trampoline.L2_SIZE
        elif c.strategy is Strategy.ADRP_BR:
            adrp_sites.append(len(plans))
            plans.append(SitePlan(c.site, c.strategy))
        else:
            plans.append(SitePlan(c.site, c.strategy, trap=c.trap))
    cursor = _align(cursor, PAGE)
    for idx in adrp_sites:
        plans[idx] = replace(plans[idx], l2_addr=cursor)
        cursor += PAGE

    if cursor > trampoline.ADDR_LIMIT:
        raise AddressSpaceExhausted(f"trampoline region ends at {cursor:#x}")

    layout = trampoline.TrampolineLayout(
        l1_blocks=[], l2_blocks=[],
        l3_block=(l3_addr, trampoline.gen_l3(gate_addr, l3_addr)),
        hook_gate_addr=gate_addr,
        gate_block=(gate_addr, trampoline.gen_gate_stub(gate_addr)))
    return RewritePlan(plans, cfg, layout, region_base=base, region_end=cursor)


def _page_delta(target: int, pc: int) -> int:
    return (target >> 12) - (pc >> 12)


def emit_patches(plan: RewritePlan, image: MemoryImage) -> RewritePlan:
    """Fill in patch words and synthesize the trampoline segments."""
    cfg = plan.cfg
    layout = plan.layout
    l3_addr = layout.l3_addr
    br_x8 = isa.encode(isa.br(isa.X8))
    out = []
    l1_blocks, l2_blocks = [], []
    for sp in plan.site_plans:
        site = sp.site
        old_svc = image.read_word(site.svc_addr)
        if sp.strategy is Strategy.SIGNAL:
            trap = isa.brk(cfg.brk_imm) if sp.trap == "brk" else isa.udf(0)
            patches = (Patch(site.svc_addr, old_svc, isa.encode(trap)),)
        else:
            old_assign = image.read_word(site.assign_addr)
            if sp.strategy is Strategy.MOV_BR:
                first = isa.movz(isa.X8, sp.l1_addr)
                l1_blocks.append((sp.l1_addr, trampoline.gen_l1(sp.l2_addr, sp.l1_addr)))
            else:
                first = isa.adrp(isa.X8, _page_delta(sp.l2_addr, site.assign_addr))
            patches = (Patch(site.assign_addr, old_assign, isa.encode(first)),
                       Patch(site.svc_addr, old_svc, br_x8))
            l2_blocks.append((sp.l2_addr, trampoline.gen_l2(site, l3_addr, sp.l2_addr)))
        out.append(replace(sp, patches=patches))

    addrs = [p.addr for s in out for p in s.patches]
    if len(addrs) != len(set(addrs)):
        raise PlanError("two patches target the same address")

    layout = replace(layout, l1_blocks=l1_blocks, l2_blocks=l2_blocks)

    base = plan.region_base
    region = bytearray(_align(max(plan.region_end, base + PAGE) - base, PAGE))
    blocks = [layout.gate_block, layout.l3_block] + l2_blocks
    for addr, instrs in blocks:
        code = trampoline.assemble(instrs)
        region[addr - base:addr - base + len(code)] = code
    trampolines = Segment(base, region, Perm.R | Perm.X, REGION_SOURCE)

    l1_region = None
    if l1_blocks:
        size = _align(len(l1_blocks) * cfg.l1_slot_size, PAGE)
        data = bytearray(size)
        for addr, instrs in l1_blocks:
            code = trampoline.assemble(instrs)
            data[addr - cfg.l1_base:addr - cfg.l1_base + len(code)] = code
        l1_region = Segment(cfg.l1_base, data, Perm.R | Perm.X, L1_SOURCE)

    for seg in (trampolines, l1_region):
        if seg is None:
            continue
        for p in addrs:
            if seg.contains(p, 4):
                raise PlanError(f"patch {p:#x} collides with {seg.source}")
        for other in image.segments:
            if seg.vaddr < other.end and other.vaddr < seg.end:
                raise OverlappingSegments(
                    f"{seg.source} [{seg.vaddr:#x}, {seg.end:#x}) overlaps {other.source or 'image'}")
    return RewritePlan(out, cfg, layout, trampolines, l1_region, base, plan.region_end)


def apply(plan: RewritePlan, image: MemoryImage, rewrite: bool = True) -> MemoryImage:
    """Return a patched copy of ``image`` with the trampoline segments mapped."""
    out = image.copy()
    for p in plan.patches():
        current = out.read_word(p.addr)
        if current != p.old:
            raise StaleImage(f"word at {p.addr:#x} is {current:#010x}, plan expected {p.old:#010x}")
        out.write_word(p.addr, p.new, rewrite=rewrite)
    for seg in plan.segments():
        out.add(seg.copy())
    return out


def plan_image(image: MemoryImage, cfg: Optional[PlannerConfig] = None,
               user_config: Iterable = (), report: Optional[ScanReport] = None) -> RewritePlan:
    """Scan, classify, allocate and emit in one go."""
    cfg = cfg or PlannerConfig()
    if report is None:
        report = scan(image, cfg.window)
    classified = classify(report, cfg, user_config, image)
    skeleton = allocate(classified, cfg, image)
    plan = emit_patches(skeleton, image)
    log.debug("planned %d sites: %s", len(plan.site_plans),
              {s.value: len(plan.by_strategy(s)) for s in Strategy})
    return plan
