"""Live attach: rewrite the running process's own SVC sites.

Only active on AArch64 Linux.  Elsewhere the module imports fine, dry runs
produce a plan report, and a real attach raises :class:`NotSupportedPlatform`.

Flow: snapshot ``/proc/self/maps`` and the executable file mappings, scan and
plan over that view, load the hook library into a fresh linker namespace,
map the L1 page at 4096 and the L2/L3 region, patch text under a temporary
``mprotect`` and install the native signal handler exported by the hook
library for the BRK/UDF and fault paths.

The hook library must export ``asch_hook(frame*)``; the frame layout is the
one documented in :mod:`asch.trampoline`.  Signal-path support additionally
needs ``asch_signal`` (an ``SA_SIGINFO`` handler) and ``asch_set_fault_fd``.
A reference implementation ships as ``native/asch_hook.c``.
"""

from __future__ import annotations

import ctypes
import ctypes.util
import json
import logging
import os
import platform
import re
import sys
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from . import trampoline
from .completeness import FaultContext, analyze_fault, append_config, parse_config
from .image import MemoryImage, Perm, Segment
from .planner import PlannerConfig, RewritePlan, StaleImage, Strategy, apply, plan_image

__all__ = [
    "AttachConfig", "AttachReport", "Mapping", "LiveError", "FixedMapUnavailable",
    "HookLoadFailed", "NotSupportedPlatform", "attach", "preload_entry",
    "parse_maps", "image_from_maps", "is_supported_platform", "check_fixed_map",
    "read_fault_log", "relocate_fault", "native_source", "HOOK_SYMBOL",
]

log = logging.getLogger(__name__)

HOOK_SYMBOL = "asch_hook"
SIGNAL_SYMBOL = "asch_signal"
FAULT_FD_SYMBOL = "asch_set_fault_fd"
MMAP_MIN_ADDR = Path("/proc/sys/vm/mmap_min_addr")
LM_ID_NEWLM = -1
RTLD_NOW = 2
PROT_READ, PROT_WRITE, PROT_EXEC = 1, 2, 4
MAP_PRIVATE, MAP_ANONYMOUS, MAP_FIXED_NOREPLACE = 0x02, 0x20, 0x100000
MAP_FAILED = ctypes.c_void_p(-1).value
SIGILL, SIGTRAP, SIGBUS, SIGSEGV = 4, 5, 7, 11
SA_SIGINFO, SA_ONSTACK = 0x4, 0x08000000


class LiveError(Exception):
    pass


class FixedMapUnavailable(LiveError):
    pass


class HookLoadFailed(LiveError):
    pass


class NotSupportedPlatform(LiveError):
    pass


def is_supported_platform() -> bool:
    return sys.platform.startswith("linux") and platform.machine() in ("aarch64", "arm64")


@dataclass(frozen=True)
class AttachConfig:
    hook_library: Optional[str] = None
    config_path: str = "asch.conf"
    demotion: str = "brk"
    dry_run: bool = False
    report: bool = False
    fault_log: Optional[str] = None      # default: <config_path>.faults

    def __post_init__(self):
        if self.demotion not in ("brk", "udf"):
            raise ValueError(f"demotion must be brk or udf, not {self.demotion!r}")

    @classmethod
    def from_env(cls, env=None) -> "AttachConfig":
        env = os.environ if env is None else env
        return cls(
            hook_library=env.get("ASCH_HOOK_LIB") or None,
            config_path=env.get("ASCH_CONFIG", "asch.conf"),
            demotion=env.get("ASCH_DEMOTION", "brk"),
            dry_run=env.get("ASCH_DRY_RUN", "") not in ("", "0"),
            report=env.get("ASCH_REPORT", "") not in ("", "0"),
        )

    @property
    def fault_log_path(self) -> str:
        return self.fault_log or self.config_path + ".faults"


@dataclass(frozen=True)
class Mapping:
    start: int
    end: int
    perms: str
    offset: int
    path: str

    @property
    def executable(self) -> bool:
        return "x" in self.perms

    @property
    def file_backed(self) -> bool:
        return self.path.startswith("/")


_MAPS_LINE = re.compile(
    r"^([0-9a-f]+)-([0-9a-f]+)\s+([rwxsp-]{4})\s+([0-9a-f]+)\s+\S+\s+\d+\s*(.*)$")


def parse_maps(text: str) -> list:
    out = []
    for line in text.splitlines():
        m = _MAPS_LINE.match(line)
        if m is None:
            continue
        out.append(Mapping(int(m[1], 16), int(m[2], 16), m[3], int(m[4], 16), m[5].strip()))
    return out


def image_from_maps(maps: list, read=None) -> MemoryImage:
    """Executable, file-backed mappings as an image; ``read(addr, n)`` supplies bytes.

    Anonymous and special mappings ([vdso], [vsyscall], JIT pages) are left
    out: they are either unhookable or not ours to patch.
    """
    read = read or (lambda addr, n: ctypes.string_at(addr, n))
    segments = []
    for m in maps:
        if not (m.executable and m.file_backed and "r" in m.perms):
            continue
        segments.append(Segment(m.start, bytearray(read(m.start, m.end - m.start)),
                                Perm.parse(m.perms[:3]), m.path))
    return MemoryImage(segments)


def object_bases(maps: list) -> list:
    """(load base, path) per file-backed object: its lowest mapping."""
    bases: dict = {}
    for m in maps:
        if m.file_backed:
            bases[m.path] = min(bases.get(m.path, m.start), m.start)
    return sorted((b, p) for p, b in bases.items())


def pick_region_base(maps: list, size: int, align: int = 1 << 20) -> int:
    """Aligned base of a free gap for the L2/L3 region, nearest the text.

    Closeness keeps ADRP sites (±4 GiB) and the L2-to-L3 branch in range.
    """
    text = [m for m in maps if m.executable] or maps
    anchor = max((m.end for m in text), default=1 << 32) // align * align
    best = None
    prev_end = 1 << 16
    for start, end in sorted((m.start, m.end) for m in maps) + [(trampoline.ADDR_LIMIT, 0)]:
        lo = -(-prev_end // align) * align
        hi = (start - size) // align * align
        if lo <= hi:
            cand = min(max(anchor, lo), hi)
            if best is None or abs(cand - anchor) < abs(best - anchor):
                best = cand
        prev_end = max(prev_end, end)
    if best is None:
        raise FixedMapUnavailable(f"no free {size:#x}-byte gap for the trampoline region")
    return best


def check_fixed_map(addr: int = 4096, min_addr_path: Path = MMAP_MIN_ADDR) -> None:
    """Raise FixedMapUnavailable when the kernel refuses mappings at ``addr``."""
    try:
        floor = int(Path(min_addr_path).read_text().strip())
    except (OSError, ValueError):
        return
    if addr < floor:
        raise FixedMapUnavailable(
            f"vm.mmap_min_addr is {floor}; the L1 page at {addr:#x} cannot be mapped")


@dataclass
class AttachReport:
    platform_supported: bool
    dry_run: bool
    sites: int = 0
    counts: dict = field(default_factory=dict)
    patched: int = 0
    l1_base: Optional[int] = None
    region: Optional[tuple] = None
    hook_library: Optional[str] = None
    notes: list = field(default_factory=list)
    plan: Optional[RewritePlan] = None
    symbols: dict = field(default_factory=dict)   # hook library exports, by name

    def to_json(self) -> dict:
        return {
            "schema_version": 1,
            "platform_supported": self.platform_supported,
            "dry_run": self.dry_run,
            "sites": self.sites,
            "counts": self.counts,
            "patched": self.patched,
            "l1_base": None if self.l1_base is None else f"{self.l1_base:#x}",
            "region": None if self.region is None else [f"{a:#x}" for a in self.region],
            "hook_library": self.hook_library,
            "notes": self.notes,
        }


# --- fault log: written by the native handler, analysed on the next start ---

def read_fault_log(path) -> list:
    """Fault contexts recorded by the native handler.

    Format: ``map <base> <path>`` lines describing the run, then one
    ``fault <pc> <sp> <x0> ... <x30>`` line (hex) per rewriter fault.
    """
    path = Path(path)
    if not path.exists():
        return []
    maps, faults = [], []
    for line in path.read_text().splitlines():
        words = line.split()
        if not words:
            continue
        if words[0] == "map" and len(words) >= 3:
            maps.append((int(words[1], 16), " ".join(words[2:])))
        elif words[0] == "fault" and len(words) == 34:
            vals = [int(w, 16) for w in words[1:]]
            faults.append(FaultContext(pc=vals[0], sp=vals[1], regs=tuple(vals[2:]),
                                       mappings=tuple(maps)))
    return faults


def relocate_fault(ctx: FaultContext, now: list) -> FaultContext:
    """Move register values from the faulting run's load bases to ``now``'s."""
    current = dict((p, b) for b, p in now)
    then = sorted(ctx.mappings)

    def move(value):
        owner = None
        for base, path in then:
            if base <= value:
                owner = (base, path)
        if owner is None or owner[1] not in current:
            return value
        return value - owner[0] + current[owner[1]]

    return replace(ctx, regs=tuple(move(r) for r in ctx.regs),
                   mappings=tuple((current.get(p, b), p) for b, p in then))


def _absorb_faults(cfg: AttachConfig, image: MemoryImage, maps: list,
                   pcfg: PlannerConfig) -> list:
    entries = []
    for ctx in read_fault_log(cfg.fault_log_path):
        ctx = relocate_fault(ctx, object_bases(maps))
        entry = analyze_fault(ctx, image, pcfg)
        append_config(entry, cfg.config_path)
        entries.append(entry)
    if entries:
        Path(cfg.fault_log_path).unlink()
    return entries


# --- libc plumbing -------------------------------------------------------------

class _Sigaction(ctypes.Structure):
    # struct sigaction as glibc lays it out on aarch64
    _fields_ = [("handler", ctypes.c_void_p), ("mask", ctypes.c_uint64 * 16),
                ("flags", ctypes.c_int), ("restorer", ctypes.c_void_p)]


class _Libc:
    def __init__(self):
        self.lib = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6", use_errno=True)
        self.lib.mmap.restype = ctypes.c_void_p
        self.lib.mmap.argtypes = [ctypes.c_void_p, ctypes.c_size_t, ctypes.c_int,
                                  ctypes.c_int, ctypes.c_int, ctypes.c_long]
        self.lib.mprotect.argtypes = [ctypes.c_void_p, ctypes.c_size_t, ctypes.c_int]
        self.lib.dlmopen.restype = ctypes.c_void_p
        self.lib.dlmopen.argtypes = [ctypes.c_long, ctypes.c_char_p, ctypes.c_int]
        self.lib.dlsym.restype = ctypes.c_void_p
        self.lib.dlsym.argtypes = [ctypes.c_void_p, ctypes.c_char_p]
        self.lib.dlerror.restype = ctypes.c_char_p

    def map_fixed(self, addr: int, size: int) -> None:
        got = self.lib.mmap(addr, size, PROT_READ | PROT_WRITE,
                            MAP_PRIVATE | MAP_ANONYMOUS | MAP_FIXED_NOREPLACE, -1, 0)
        if got in (None, MAP_FAILED) or got != addr:
            err = ctypes.get_errno()
            raise FixedMapUnavailable(f"mmap at {addr:#x} failed: {os.strerror(err)}")

    def protect(self, addr: int, size: int, prot: int) -> None:
        page = addr & ~0xFFF
        if self.lib.mprotect(page, (addr + size - page + 0xFFF) & ~0xFFF, prot) != 0:
            raise LiveError(f"mprotect {addr:#x}: {os.strerror(ctypes.get_errno())}")

    def load_hook(self, path: str):
        handle = self.lib.dlmopen(LM_ID_NEWLM, path.encode(), RTLD_NOW)
        if not handle:
            raise HookLoadFailed(f"{path}: {(self.lib.dlerror() or b'').decode()}")
        return handle

    def symbol(self, handle, name: str) -> Optional[int]:
        return self.lib.dlsym(handle, name.encode()) or None


def _clear_icache(start: int, end: int) -> None:
    try:
        fn = ctypes.CDLL("libgcc_s.so.1").__clear_cache
    except (OSError, AttributeError):
        log.warning("no __clear_cache; relying on mprotect to synchronise caches")
        return
    fn.argtypes = [ctypes.c_void_p, ctypes.c_void_p]
    fn(start, end)


def _perm_bits(perms: Perm) -> int:
    return ((PROT_READ if perms & Perm.R else 0) | (PROT_WRITE if perms & Perm.W else 0)
            | (PROT_EXEC if perms & Perm.X else 0))


class _StackT(ctypes.Structure):
    _fields_ = [("sp", ctypes.c_void_p), ("flags", ctypes.c_int), ("size", ctypes.c_size_t)]


ALT_STACK_SIZE = 64 * 1024
_alt_stack = None    # kept alive for the life of the process


def _install_handlers(libc: _Libc, handler: int) -> None:
    global _alt_stack
    if _alt_stack is None:
        _alt_stack = ctypes.create_string_buffer(ALT_STACK_SIZE)
        ss = _StackT(ctypes.addressof(_alt_stack), 0, ALT_STACK_SIZE)
        if libc.lib.sigaltstack(ctypes.byref(ss), None) != 0:
            raise LiveError("sigaltstack failed")
    for sig in (SIGILL, SIGTRAP, SIGSEGV, SIGBUS):
        act = _Sigaction(handler=handler, flags=SA_SIGINFO | SA_ONSTACK)
        if libc.lib.sigaction(sig, ctypes.byref(act), None) != 0:
            raise LiveError(f"sigaction({sig}) failed")


def _open_fault_log(cfg: AttachConfig, maps: list) -> int:
    fd = os.open(cfg.fault_log_path, os.O_WRONLY | os.O_CREAT | os.O_APPEND, 0o644)
    header = "".join(f"map {b:x} {p}\n" for b, p in object_bases(maps))
    os.write(fd, header.encode())
    return fd


# --- attach ----------------------------------------------------------------------

def attach(cfg: Optional[AttachConfig] = None, image: Optional[MemoryImage] = None,
           maps_text: Optional[str] = None) -> AttachReport:
    """Rewrite this process (or just plan, when ``cfg.dry_run``).

    ``image``/``maps_text`` substitute a prepared view of the address space;
    both are for dry runs and tests.
    """
    cfg = cfg or AttachConfig.from_env()
    supported = is_supported_platform()
    report = AttachReport(supported, cfg.dry_run, hook_library=cfg.hook_library)

    if not supported and image is None:
        if not cfg.dry_run:
            raise NotSupportedPlatform(
                f"live attach needs AArch64 Linux, not {sys.platform}/{platform.machine()}")
        msg = f"{sys.platform}/{platform.machine()} is not AArch64 Linux; nothing to attach"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        report.notes.append(msg)
        return _finish(cfg, report)

    if image is None:
        if maps_text is None:
            maps_text = Path("/proc/self/maps").read_text()
        maps = parse_maps(maps_text)
        image = image_from_maps(maps)
    else:
        maps = parse_maps(maps_text) if maps_text is not None else []
    pcfg = PlannerConfig(demotion_instr=cfg.demotion)
    if not cfg.dry_run:
        report.notes += [f"absorbed: {e.format()}" for e in _absorb_faults(cfg, image, maps, pcfg)]
    entries = parse_config(cfg.config_path)
    plan = plan_image(image, pcfg, entries)
    if maps:
        base = pick_region_base(maps, plan.region_end - plan.region_base)
        if base != plan.region_base:
            plan = plan_image(image, replace(pcfg, region_base=base), entries)
    report.plan = plan
    report.sites = len(plan.site_plans)
    report.counts = {s.value: len(plan.by_strategy(s)) for s in Strategy}
    report.l1_base = plan.l1_region.vaddr if plan.l1_region is not None else None
    report.region = (plan.region_base, plan.trampoline_region.end)
    if cfg.dry_run:
        return _finish(cfg, report)

    if not supported:
        raise NotSupportedPlatform("cannot patch a foreign-architecture image in place")
    if cfg.hook_library is None:
        raise HookLoadFailed("no hook library given (ASCH_HOOK_LIB)")
    check_fixed_map(pcfg.l1_base)
    libc = _Libc()

    # the hook library and its private libc are loaded after the snapshot,
    # so their own SVCs stay untouched
    handle = libc.load_hook(cfg.hook_library)
    hook = libc.symbol(handle, HOOK_SYMBOL)
    if hook is None:
        raise HookLoadFailed(f"{cfg.hook_library} does not export {HOOK_SYMBOL}")
    # the library lives in its own namespace; callers reach it through these
    for name in (HOOK_SYMBOL, SIGNAL_SYMBOL, "asch_hook_count", "asch_hook_calls"):
        addr = libc.symbol(handle, name)
        if addr is not None:
            report.symbols[name] = addr
    _map_trampolines(libc, plan, hook)
    report.patched = _patch_text(libc, plan, image)

    signal_fn = libc.symbol(handle, SIGNAL_SYMBOL)
    if signal_fn is not None:
        set_fd = libc.symbol(handle, FAULT_FD_SYMBOL)
        if set_fd is not None:
            ctypes.CFUNCTYPE(None, ctypes.c_int)(set_fd)(_open_fault_log(cfg, maps))
        _install_handlers(libc, signal_fn)
    elif plan.by_strategy(Strategy.SIGNAL):
        report.notes.append(f"{cfg.hook_library} has no {SIGNAL_SYMBOL}; "
                            "demoted sites will raise unhandled signals")
    return _finish(cfg, report)


def _map_trampolines(libc: _Libc, plan: RewritePlan, hook_addr: int) -> None:
    """Map L1 and L2/L3, with L3 calling the hook library directly."""
    l3_addr = plan.layout.l3_addr
    l3 = trampoline.assemble(trampoline.gen_l3(hook_addr, l3_addr))
    for seg in plan.segments():
        data = bytearray(seg.data)
        if seg is plan.trampoline_region:
            off = l3_addr - seg.vaddr
            data[off:off + len(l3)] = l3
        libc.map_fixed(seg.vaddr, len(data))
        ctypes.memmove(seg.vaddr, bytes(data), len(data))
        libc.protect(seg.vaddr, len(data), PROT_READ | PROT_EXEC)
        _clear_icache(seg.vaddr, seg.vaddr + len(data))


def _patch_text(libc: _Libc, plan: RewritePlan, image: MemoryImage) -> int:
    apply(plan, image)     # raises StaleImage if the snapshot disagrees with the plan
    patched = 0
    for p in sorted(plan.patches()):
        seg = image.segment_for(p.addr, 4)
        live = int.from_bytes(ctypes.string_at(p.addr, 4), "little")
        if live != p.old:
            raise StaleImage(f"live word at {p.addr:#x} is {live:#010x}, expected {p.old:#010x}")
        libc.protect(p.addr, 4, _perm_bits(seg.perms) | PROT_WRITE)
        ctypes.memmove(p.addr, p.new.to_bytes(4, "little"), 4)
        libc.protect(p.addr, 4, _perm_bits(seg.perms))
        _clear_icache(p.addr, p.addr + 4)
        patched += 1
    return patched


def _finish(cfg: AttachConfig, report: AttachReport) -> AttachReport:
    if cfg.report:
        print(json.dumps(report.to_json()), file=sys.stderr)
    return report


def preload_entry() -> Optional[AttachReport]:
    """Attach from a startup hook (e.g. ``sitecustomize``) when ASCH_HOOK_LIB is set."""
    cfg = AttachConfig.from_env()
    if cfg.hook_library is None and not cfg.dry_run:
        return None
    try:
        return attach(cfg)
    except LiveError as exc:
        print(f"asch: attach failed: {exc}", file=sys.stderr)
        raise


def native_source() -> Path:
    """Path of the reference hook library source."""
    return Path(__file__).with_name("native") / "asch_hook.c"

