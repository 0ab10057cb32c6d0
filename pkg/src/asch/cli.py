"""``asch``: scan, plan, rewrite, run, analyze-fault, bench.

Exit codes: 0 ok, 2 bad input, 3 the guest stopped on a fault or ran out of
fuel, 4 an internal invariant failed.  JSON output carries ``schema_version``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional

from . import __version__, fixtures
from .completeness import (FaultContext, MalformedEntry, NotOurFault,
                           analyze_fault, append_config, parse_config)
from .emulator import (FuelExhausted, Interception, Machine, MECHANISMS, CostModel,
                       SyscallModel, interception_profile, run)
from .image import ImageError, load_elf, load_manifest, parse_addr, write_manifest
from .isa import OutOfRange
from .planner import PlanError, PlannerConfig, apply, plan_image
from .scanner import NoExecutableSegments, scan
from .trampoline import TrampolineError

log = logging.getLogger("asch")

EXIT_OK, EXIT_INPUT, EXIT_FAULT, EXIT_INVARIANT = 0, 2, 3, 4
SCHEMA_VERSION = 1


class InputError(Exception):
    pass


class GuestFault(Exception):
    def __init__(self, doc: dict):
        super().__init__(doc.get("status", "fault"))
        self.doc = doc


# --- helpers -----------------------------------------------------------------

def _load_image(args) -> tuple:
    """(image, manifest metadata) from --input/--manifest."""
    path = Path(args.input or args.manifest)
    if not path.exists():
        raise InputError(f"{path}: no such file")
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == b"\x7fELF":
        return load_elf(path), {}
    image = load_manifest(path)
    doc = json.loads(path.read_text())
    meta = {k: v for k, v in doc.items() if k not in ("segments", "entry")} \
        if isinstance(doc, dict) else {}
    return image, meta


def _planner_config(args) -> PlannerConfig:
    kw = {"window": args.window, "demotion_instr": args.demotion, "l1_base": args.l1_base}
    if getattr(args, "max_mov", None) is not None:
        kw["max_mov_trampolines"] = args.max_mov
    try:
        return PlannerConfig(**kw)
    except ValueError as exc:
        raise InputError(str(exc)) from None


def _config_entries(args) -> list:
    return parse_config(args.config) if args.config else []


def _emit(args, doc: dict, text: Optional[str] = None) -> None:
    doc.setdefault("schema_version", SCHEMA_VERSION)
    if args.format == "text" and text is not None:
        out = text
    else:
        out = json.dumps(doc, indent=2, sort_keys=False)
    if getattr(args, "out_file", None):
        Path(args.out_file).write_text(out + "\n")
    else:
        print(out)


# --- subcommands -------------------------------------------------------------

def cmd_scan(args) -> int:
    image, _ = _load_image(args)
    report = scan(image, args.window)
    counts = {k: v for k, v in report.counts.items() if v}
    text = f"{len(report.sites)} SVC sites: " + ", ".join(f"{k}={v}" for k, v in counts.items())
    _emit(args, report.to_json(), text)
    return EXIT_OK


def cmd_plan(args) -> int:
    image, _ = _load_image(args)
    plan = plan_image(image, _planner_config(args), _config_entries(args))
    doc = plan.to_json()
    _emit(args, doc, ", ".join(f"{k}={v}" for k, v in doc["counts"].items()))
    return EXIT_OK


def cmd_rewrite(args) -> int:
    image, _ = _load_image(args)
    plan = plan_image(image, _planner_config(args), _config_entries(args))
    rewritten = apply(plan, image)
    out = Path(args.out)
    extra = {
        "rewritten": True,
        "hook_gate": f"{plan.hook_gate_addr:#x}",
        "brk_imm": f"{plan.cfg.brk_imm:#x}",
        "udf_sites": [f"{a:#x}" for a in sorted(plan.udf_sites())],
        "trampoline_region": [f"{plan.region_base:#x}", f"{plan.trampoline_region.end:#x}"],
    }
    write_manifest(rewritten, out, extra=extra)
    plan_doc = plan.to_json()
    (out / "plan.json").write_text(json.dumps(plan_doc, indent=2) + "\n")
    if args.emit_trampolines:
        (out / "trampolines.bin").write_bytes(bytes(plan.trampoline_region.data))
        if plan.l1_region is not None:
            (out / "l1.bin").write_bytes(bytes(plan.l1_region.data))
        symbols = {"schema_version": SCHEMA_VERSION, **plan.layout.symbols()}
        (out / "symbols.json").write_text(json.dumps(symbols, indent=2) + "\n")
    doc = {"out": str(out), "counts": plan_doc["counts"],
           "patches": len(plan.patches())}
    _emit(args, doc, f"wrote {out}: " + ", ".join(f"{k}={v}" for k, v in doc["counts"].items()))
    return EXIT_OK


def _hook(spec: str):
    if spec in ("none", "count", "log"):
        if spec == "log":
            return lambda e: log.info("hook %s", e.to_json()) or None
        return None
    if spec.startswith("claim-constant:"):
        value = int(spec.split(":", 1)[1], 0)
        return lambda e: value
    raise InputError(f"unknown hook {spec!r}; use count, log or claim-constant:N")


def _syscalls(args) -> SyscallModel:
    if not args.syscalls:
        return SyscallModel()
    try:
        return SyscallModel.from_json(json.loads(Path(args.syscalls).read_text()))
    except (OSError, ValueError) as exc:
        raise InputError(f"{args.syscalls}: {exc}") from None


def cmd_run(args) -> int:
    image, meta = _load_image(args)
    hook = _hook(args.hook)
    gate = parse_addr(meta["hook_gate"]) if "hook_gate" in meta else None
    intercept = None
    if meta.get("rewritten"):
        intercept = Interception(parse_addr(meta.get("brk_imm", "0xf5c")),
                                 frozenset(parse_addr(a) for a in meta.get("udf_sites", [])))
    entry = parse_addr(args.entry) if args.entry else None
    machine = Machine(image, entry, hook_gate=gate)
    try:
        result = run(machine, _syscalls(args), hook, intercept, args.fuel)
    except FuelExhausted as exc:
        raise GuestFault(exc.result.to_json()) from None
    doc = result.to_json()
    if result.status != "exit":
        raise GuestFault(doc)
    _emit(args, doc, f"exit {result.exit_code} x0={result.regs[0]:#x} "
                     f"events={len(result.events)} instr_count={result.instr_count}")
    return EXIT_OK


def cmd_analyze_fault(args) -> int:
    image, _ = _load_image(args)
    try:
        doc = json.loads(Path(args.fault).read_text())
    except (OSError, ValueError) as exc:
        raise InputError(f"{args.fault}: {exc}") from None
    if isinstance(doc, dict) and "fault" in doc:
        doc = doc["fault"]
    if not doc:
        raise InputError(f"{args.fault}: no fault context")
    try:
        ctx = FaultContext.from_json(doc)
    except (KeyError, ValueError) as exc:
        raise InputError(f"{args.fault}: bad fault context: {exc}") from None
    cfg = _planner_config(args)
    try:
        entry = analyze_fault(ctx, image, cfg)
    except NotOurFault as exc:
        _emit(args, {"ours": False, "reason": str(exc)}, f"not a rewriter fault: {exc}")
        return EXIT_FAULT
    if args.config:
        append_config(entry, args.config)
    _emit(args, {"ours": True, "entry": entry.format(),
                 "appended_to": args.config}, entry.format())
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.iterations <= 0:
        raise InputError("iterations must be positive")
    costs = CostModel()
    rows = {m: interception_profile(m, args.iterations, costs) for m in MECHANISMS}
    doc = {
        "model": {"svc_kernel": costs.svc_kernel, "signal_delivery": costs.signal_delivery,
                  "synthetic": True},
        "iterations": args.iterations,
        "mechanisms": [r.to_json() for r in rows.values()],
        "ratios": {
            "trampoline/baseline": rows["trampoline"].cycles / rows["baseline"].cycles,
            "signal/trampoline": rows["signal"].cycles / rows["trampoline"].cycles,
        },
    }
    text = "\n".join(f"{m:10s} {r.cycles:10.2f} cycles/interception" for m, r in rows.items())
    _emit(args, doc, text)
    return EXIT_OK


def _fixture_images() -> dict:
    found = {"glibc-like": fixtures.glibc_like}
    for f in fixtures.all_fixtures() + [fixtures.null_deref_fixture(),
                                        fixtures.wild_jump_fixture()]:
        found[f.name.replace("_", "-")] = lambda f=f: f.image
    return found


def cmd_fixture(args) -> int:
    known = _fixture_images()
    if args.name == "list":
        _emit(args, {"fixtures": sorted(known)}, "\n".join(sorted(known)))
        return EXIT_OK
    make = known.get(args.name)
    if make is None:
        raise InputError(f"unknown fixture {args.name!r}; try 'list'")
    path = write_manifest(make(), args.out)
    _emit(args, {"manifest": str(path)}, str(path))
    return EXIT_OK


# --- entry point -------------------------------------------------------------

def _add_input(p) -> None:
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", "-i", help="ELF file or manifest")
    src.add_argument("--manifest", help="segment manifest (JSON)")


def _add_planner(p) -> None:
    p.add_argument("--config", help="demotion config file")
    p.add_argument("--demotion", choices=("brk", "udf"), default="brk")
    p.add_argument("--l1-base", type=lambda s: int(s, 0), default=4096,
                   help="first L1 slot (default 4096, at least 4096)")
    p.add_argument("--max-mov", type=int, default=None,
                   help="cap on MOV-reachable trampolines")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--format", choices=("json", "text"), default="json")
    common.add_argument("--window", type=int, default=20,
                        help="instructions searched back from each SVC")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="asch", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"asch {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scan", parents=[common], help="list SVC sites")
    _add_input(p)
    p.add_argument("--out", dest="out_file")
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("plan", parents=[common], help="show the rewrite plan")
    _add_input(p)
    _add_planner(p)
    p.add_argument("--out", dest="out_file")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("rewrite", parents=[common], help="write a rewritten image")
    _add_input(p)
    _add_planner(p)
    p.add_argument("--out", "-o", required=True, help="output directory")
    p.add_argument("--emit-trampolines", action="store_true",
                   help="also write trampolines.bin and symbols.json")
    p.set_defaults(func=cmd_rewrite)

    p = sub.add_parser("run", parents=[common], help="execute an image in the emulator")
    _add_input(p)
    p.add_argument("--hook", default="count", help="count | log | claim-constant:N")
    p.add_argument("--syscalls", help="JSON syscall table")
    p.add_argument("--fuel", type=int, default=10_000_000)
    p.add_argument("--entry")
    p.add_argument("--out", dest="out_file")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("analyze-fault", parents=[common],
                       help="turn a fault context into a demotion entry")
    _add_input(p)
    p.add_argument("--fault", required=True, help="run output or fault context JSON")
    _add_planner(p)
    p.add_argument("--out", dest="out_file")
    p.set_defaults(func=cmd_analyze_fault)

    p = sub.add_parser("bench", parents=[common], help="modeled interception costs")
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--out", dest="out_file")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("fixture", parents=[common], help="write a built-in test program")
    p.add_argument("name", help="fixture name, or 'list'")
    p.add_argument("--out", "-o", default=".", help="output directory")
    p.set_defaults(func=cmd_fixture)
    return parser


def _fail(args, code: int, kind: str, message: str, extra: Optional[dict] = None) -> int:
    doc = {"schema_version": SCHEMA_VERSION, "error": kind, "message": message}
    if extra:
        doc.update(extra)
    if getattr(args, "format", "json") == "text":
        print(f"asch: {kind}: {message}", file=sys.stderr)
    else:
        print(json.dumps(doc, indent=2), file=sys.stderr if code != EXIT_FAULT else sys.stdout)
    return code


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except GuestFault as exc:
        if args.format == "text":
            print(json.dumps(exc.doc.get("fault"), indent=2))
            return EXIT_FAULT
        print(json.dumps(exc.doc, indent=2))
        return EXIT_FAULT
    except (InputError, ImageError, NoExecutableSegments, MalformedEntry, OSError) as exc:
        return _fail(args, EXIT_INPUT, type(exc).__name__, str(exc))
    except (PlanError, TrampolineError, OutOfRange) as exc:
        return _fail(args, EXIT_INVARIANT, type(exc).__name__, str(exc))
    except ValueError as exc:
        return _fail(args, EXIT_INPUT, type(exc).__name__, str(exc))


if __name__ == "__main__":
    sys.exit(main())
