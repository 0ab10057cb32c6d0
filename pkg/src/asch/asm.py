"""A tiny two-pass assembler over :mod:`asch.isa` instructions.

Enough to build fixture programs and trampoline blocks: labels, the direct
branches that target them, 48-bit address materialization and raw data.
"""

from __future__ import annotations

from dataclasses import replace
from typing import Callable, Union

from . import isa
from .isa import Instr, Kind

__all__ = ["Assembler"]

_LABEL_BRANCHES = {
    Kind.B: 26, Kind.BL: 26, Kind.B_COND: 19, Kind.CBZ: 19, Kind.CBNZ: 19,
    Kind.TBZ: 14, Kind.TBNZ: 14,
}


class Assembler:
    """Collects instructions at consecutive addresses starting at ``base``."""

    def __init__(self, base: int):
        if base % 4:
            raise ValueError(f"base {base:#x} is not 4-byte aligned")
        self.base = base
        self.labels: dict = {}
        self._items: list = []   # Instr | int (raw word) | callable(labels) -> Instr

    @property
    def here(self) -> int:
        return self.base + 4 * len(self._items)

    def label(self, name: str) -> int:
        if name in self.labels:
            raise ValueError(f"duplicate label {name!r}")
        self.labels[name] = self.here
        return self.here

    def emit(self, *items: Union[Instr, int, Callable]) -> int:
        addr = self.here
        self._items.extend(items)
        return addr

    def word(self, value: int) -> int:
        return self.emit(value & 0xFFFFFFFF)

    def quad(self, value: int) -> int:
        addr = self.word(value)
        self.word(value >> 32)
        return addr

    def to(self, instr: Instr, target: str) -> int:
        """Emit a direct branch whose offset is resolved against ``target``."""
        if instr.kind not in _LABEL_BRANCHES:
            raise ValueError(f"{instr.kind} has no label operand")
        addr = self.here

        def resolve(labels, _addr=addr, _instr=instr):
            return replace(_instr, imm=(labels[target] - _addr) // 4)
        return self.emit(resolve)

    def b(self, target: str) -> int:
        return self.to(isa.b(0), target)

    def bl(self, target: str) -> int:
        return self.to(isa.bl(0), target)

    def b_cond(self, cond: int, target: str) -> int:
        return self.to(isa.b_cond(cond, 0), target)

    def cbz(self, rt: int, target: str) -> int:
        return self.to(isa.cbz(rt, 0), target)

    def cbnz(self, rt: int, target: str) -> int:
        return self.to(isa.cbnz(rt, 0), target)

    def mov64(self, rd: int, value: int) -> int:
        """movz/movk x3: materialize a 48-bit value."""
        if not 0 <= value < 1 << 48:
            raise isa.OutOfRange(f"{value:#x} needs more than 48 bits")
        return self.emit(isa.movz(rd, value & 0xFFFF),
                         isa.movk(rd, (value >> 16) & 0xFFFF, 16),
                         isa.movk(rd, (value >> 32) & 0xFFFF, 32))

    def addr_of(self, rd: int, target: str) -> int:
        """Materialize the address of a label (resolved at assembly time)."""
        first = self.here
        for i, shift in enumerate((0, 16, 32)):
            maker = isa.movz if i == 0 else isa.movk

            def resolve(labels, _m=maker, _s=shift):
                return _m(rd, (labels[target] >> _s) & 0xFFFF, _s)
            self.emit(resolve)
        return first

    def instructions(self) -> list:
        """Resolved items as (address, Instr-or-raw-word) pairs."""
        out = []
        for i, item in enumerate(self._items):
            addr = self.base + 4 * i
            if callable(item):
                item = item(self.labels)
            if isinstance(item, Instr):
                item = item.at(addr)
            out.append((addr, item))
        return out

    def assemble(self) -> bytes:
        chunks = []
        for _addr, item in self.instructions():
            word = item if isinstance(item, int) else isa.encode(item)
            chunks.append(word.to_bytes(4, "little"))
        return b"".join(chunks)
