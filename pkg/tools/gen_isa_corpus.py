#!/usr/bin/env python3
"""Build the decoder differential corpus with clang as the reference assembler.

Each line of assembly is generated from random operands, and the operands are
recorded next to it as the expected decode.  clang assembles, lld links at a
fixed address (so ADRP and branches resolve without relocations), and the
words are read back out of ``.text``.

    python3 tools/gen_isa_corpus.py [-o tests/data/isa_corpus.json] [--seed N]
"""

from __future__ import annotations

import argparse
import json
import random
import shutil
import struct
import subprocess
import sys
import tempfile
from pathlib import Path

TEXT_BASE = 0x400000
PER_KIND = 44
CONDS = ["eq", "ne", "cs", "cc", "mi", "pl", "vs", "vc", "hi", "ls", "ge", "lt", "gt", "le", "al"]


def xr(n: int, sf: bool = True, sp: bool = False) -> str:
    if n == 31:
        return ("sp" if sf else "wsp") if sp else ("xzr" if sf else "wzr")
    return f"{'x' if sf else 'w'}{n}"


def bitmask(rng: random.Random, sf: bool) -> int:
    """A random valid logical immediate, built from (element, ones, rotation)."""
    width = 64 if sf else 32
    esize = rng.choice([e for e in (2, 4, 8, 16, 32, 64) if e <= width])
    ones = rng.randrange(1, esize)
    rot = rng.randrange(esize)
    elem = (1 << ones) - 1
    elem = ((elem >> rot) | (elem << (esize - rot))) & ((1 << esize) - 1)
    value = 0
    for i in range(0, width, esize):
        value |= elem << i
    return value


def gen_kind(kind: str, rng: random.Random) -> tuple:
    """(asm, expected fields) for one random instance of ``kind``."""
    reg = lambda: rng.randrange(31)            # noqa: E731
    sf = rng.random() < 0.7
    if kind in ("svc", "brk", "udf"):
        imm = rng.randrange(1 << 16)
        return f"{kind} #{imm:#x}", {"imm": imm}
    if kind in ("movz", "movk"):
        rd, imm = reg(), rng.randrange(1 << 16)
        shift = rng.choice([0, 16, 32, 48] if sf else [0, 16])
        return (f"{kind} {xr(rd, sf)}, #{imm:#x}, lsl #{shift}",
                {"rd": rd, "imm": imm, "shift": shift, "sf": sf})
    if kind == "mov_reg":
        rd, rm = reg(), rng.randrange(32)
        return f"mov {xr(rd, sf)}, {xr(rm, sf)}", {"rd": rd, "rm": rm, "sf": sf}
    if kind == "orr_imm":
        rd, rn, imm = reg(), rng.randrange(32), bitmask(rng, sf)
        return (f"orr {xr(rd, sf, sp=True)}, {xr(rn, sf)}, #{imm:#x}",
                {"rd": rd, "rn": rn, "imm": imm, "sf": sf})
    if kind == "adrp":
        rd, pages = reg(), rng.randrange(-1000, 1 << 18)
        return f"adrp {xr(rd)}, .+{pages * 4096}", {"rd": rd, "imm": pages}
    if kind in ("add_imm", "sub_imm"):
        setflags = rng.random() < 0.35
        imm, shift = rng.randrange(1 << 12), rng.choice([0, 12])
        rn = rng.randrange(32)
        op = kind[:3]
        if setflags:
            rd = rng.randrange(32)
            src = xr(rn, sf, sp=True)
            if rd == 31:
                alias = "cmn" if op == "add" else "cmp"
                text = f"{alias} {src}, #{imm}, lsl #{shift}"
            else:
                text = f"{op}s {xr(rd, sf)}, {src}, #{imm}, lsl #{shift}"
        else:
            rd = rng.randrange(32)
            text = f"{op} {xr(rd, sf, sp=True)}, {xr(rn, sf, sp=True)}, #{imm}, lsl #{shift}"
        return text, {"rd": rd, "rn": rn, "imm": imm, "shift": shift, "sf": sf,
                      "setflags": setflags}
    if kind in ("b", "bl"):
        off = rng.randrange(-(1 << 18), 1 << 20)
        return f"{kind} .+{off * 4}", {"imm": off}
    if kind == "b_cond":
        cond, off = rng.randrange(15), rng.randrange(-(1 << 18), 1 << 18)
        return f"b.{CONDS[cond]} .+{off * 4}", {"cond": cond, "imm": off}
    if kind in ("cbz", "cbnz"):
        rt, off = rng.randrange(32), rng.randrange(-(1 << 18), 1 << 18)
        return f"{kind} {xr(rt, sf)}, .+{off * 4}", {"rt": rt, "imm": off, "sf": sf}
    if kind in ("tbz", "tbnz"):
        rt, bit, off = rng.randrange(32), rng.randrange(64), rng.randrange(-(1 << 13), 1 << 13)
        return (f"{kind} {xr(rt, bit >= 32)}, #{bit}, .+{off * 4}",
                {"rt": rt, "bit": bit, "imm": off})
    if kind in ("br", "blr"):
        rn = reg()
        return f"{kind} {xr(rn)}", {"rn": rn}
    if kind == "ret":
        rn = rng.choice([30, reg()])
        return ("ret" if rn == 30 else f"ret {xr(rn)}"), {"rn": rn}
    if kind in ("ldr_imm", "str_imm"):
        op = kind[:3]
        rn = rng.randrange(32)
        rt = rng.choice([r for r in range(32) if r != rn])
        mode = rng.choice(["offset", "pre", "post"])
        base = xr(rn, sp=True)
        if mode == "offset":
            imm = 8 * rng.randrange(4096)
            text = f"{op} {xr(rt)}, [{base}, #{imm}]"
        else:
            imm = rng.randrange(-256, 256)
            text = (f"{op} {xr(rt)}, [{base}, #{imm}]!" if mode == "pre"
                    else f"{op} {xr(rt)}, [{base}], #{imm}")
        return text, {"rt": rt, "rn": rn, "imm": imm, "mode": mode}
    if kind in ("stp_pre", "ldp_post"):
        rn = rng.randrange(32)
        pool = [r for r in range(32) if r != rn]
        rt = rng.choice(pool)
        rt2 = rng.choice([r for r in pool if kind == "stp_pre" or r != rt])
        imm = 8 * rng.randrange(-64, 64)
        base = xr(rn, sp=True)
        text = (f"stp {xr(rt)}, {xr(rt2)}, [{base}, #{imm}]!" if kind == "stp_pre"
                else f"ldp {xr(rt)}, {xr(rt2)}, [{base}], #{imm}")
        return text, {"rt": rt, "rt2": rt2, "rn": rn, "imm": imm}
    if kind == "mrs_nzcv":
        rt = rng.randrange(32)
        return f"mrs {xr(rt)}, nzcv", {"rt": rt}
    if kind == "msr_nzcv":
        rt = rng.randrange(32)
        return f"msr nzcv, {xr(rt)}", {"rt": rt}
    if kind == "nop":
        return "nop", {}
    raise ValueError(kind)


KINDS = ["svc", "brk", "udf", "movz", "movk", "mov_reg", "orr_imm", "adrp", "add_imm",
         "sub_imm", "b", "bl", "b_cond", "cbz", "cbnz", "tbz", "tbnz", "br", "blr", "ret",
         "ldr_imm", "str_imm", "stp_pre", "ldp_post", "mrs_nzcv", "msr_nzcv", "nop"]

# Outside the subset: must decode as opaque
OPAQUE = [
    "mul x0, x1, x2", "add x0, x1, x2", "orr x0, x1, x2", "orr x3, x4, x5, lsl #3",
    "movn x0, #5", "ldr w0, [x1]", "ldrb w0, [x1, #3]", "str w0, [x1]",
    "ldr x0, [x1, x2]", "ldur x0, [x1, #-8]", "stur x3, [sp, #-16]",
    "stp x0, x1, [sp, #16]", "ldp x0, x1, [sp, #16]!", "ldp x0, x1, [sp, #16]",
    "stp x0, x1, [sp], #16", "eor x0, x1, #0xff", "and x2, x3, #0xf0",
    "csel x0, x1, x2, eq", "adr x0, .+8", "ldr x0, .+64", "hint #5", "yield",
    "dmb ish", "isb", "mrs x0, tpidr_el0", "msr tpidr_el0, x1", "sub x0, x1, x2",
    "lsl x0, x1, #3", "sxtw x0, w1", "madd x0, x1, x2, x3", "udiv x0, x1, x2",
    "fmov d0, x1", "ldxr x0, [x1]", "stxr w2, x0, [x1]", "ldar x0, [x1]",
    "cas x0, x1, [x2]", "eret", "hvc #0", "smc #0", "hlt #0",
    "dcps1", "wfi", "clrex", "braaz x1", "ldraa x0, [x1]", "ldr q0, [x1]",
]


def generate(seed: int = 2024) -> list:
    rng = random.Random(seed)
    lines = []
    for kind in KINDS:
        for _ in range(PER_KIND):
            text, expect = gen_kind(kind, rng)
            lines.append((text, dict(expect, kind=kind)))
    for text in OPAQUE:
        lines.append((text, {"kind": "opaque"}))
    return lines


def _text_section(elf: bytes) -> tuple:
    """(vaddr, bytes) of ``.text`` in a little-endian ELF64 file."""
    shoff, = struct.unpack_from("<Q", elf, 0x28)
    shentsize, shnum, shstrndx = struct.unpack_from("<HHH", elf, 0x3A)
    sections = [struct.unpack_from("<IIQQQQIIQQ", elf, shoff + i * shentsize)
                for i in range(shnum)]
    strtab = sections[shstrndx]
    names = elf[strtab[4]:strtab[4] + strtab[5]]
    for name, _type, _flags, addr, off, size, *_ in sections:
        if names[name:names.index(b"\0", name)] == b".text":
            return addr, elf[off:off + size]
    raise ValueError("no .text section")


def assemble(lines: list, clang: str = "clang", lld: str = "ld.lld") -> tuple:
    """Assemble and link ``lines``; returns (text base, code bytes)."""
    src = ".text\n.globl _start\n_start:\n" + "".join(f"    {t}\n" for t in lines)
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        (tmp / "c.s").write_text(src)
        subprocess.run([clang, "--target=aarch64-linux-gnu", "-march=armv8.3-a+lse", "-c",
                        str(tmp / "c.s"), "-o", str(tmp / "c.o")], check=True)
        subprocess.run([lld, "-m", "aarch64linux", f"--section-start=.text={TEXT_BASE:#x}",
                        "-e", "_start", str(tmp / "c.o"), "-o", str(tmp / "c")], check=True)
        return _text_section((tmp / "c").read_bytes())


def tool_version(clang: str = "clang") -> str:
    out = subprocess.run([clang, "--version"], capture_output=True, text=True, check=True)
    return out.stdout.splitlines()[0]


def build(seed: int = 2024) -> dict:
    lines = generate(seed)
    base, code = assemble([t for t, _ in lines])
    if len(code) != 4 * len(lines):
        raise RuntimeError(f"expected {len(lines)} words, got {len(code) // 4}")
    records = []
    for n, (text, expect) in enumerate(lines):
        word, = struct.unpack_from("<I", code, 4 * n)
        records.append({"asm": text, "address": f"{base + 4 * n:#x}",
                        "word": f"{word:#010x}", "expect": expect})
    return {"schema_version": 1, "seed": seed, "assembler": tool_version(),
            "count": len(records), "records": records}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("-o", "--out", default="tests/data/isa_corpus.json")
    ap.add_argument("--seed", type=int, default=2024)
    args = ap.parse_args(argv)
    if not (shutil.which("clang") and shutil.which("ld.lld")):
        print("clang and ld.lld are required", file=sys.stderr)
        return 2
    doc = build(args.seed)
    Path(args.out).write_text(json.dumps(doc, indent=1) + "\n")
    print(f"wrote {doc['count']} records to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
