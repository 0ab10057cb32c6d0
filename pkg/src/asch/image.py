"""Memory images: ordered, non-overlapping segments with permissions.

Images are ingested from ELF64 program headers or from a JSON manifest of
raw blobs, and can be written back out in either form.
"""

from __future__ import annotations

import bisect
import enum
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional

__all__ = [
    "Perm", "Segment", "MemoryImage", "ImageError", "MalformedElf",
    "OverlappingSegments", "MissingFile", "Unmapped", "Misaligned",
    "WriteProtected", "load_elf", "write_elf", "load_manifest",
    "write_manifest", "parse_addr", "SYNTH_PREFIX",
]

SYNTH_PREFIX = "synthesized:"

EM_AARCH64 = 183
PT_LOAD = 1
PF_X, PF_W, PF_R = 1, 2, 4

_EHDR = struct.Struct("<16sHHIQQQIHHHHHH")
_PHDR = struct.Struct("<IIQQQQQQ")


class ImageError(Exception):
    pass


class MalformedElf(ImageError):
    pass


class OverlappingSegments(ImageError):
    pass


class MissingFile(ImageError):
    pass


class Unmapped(ImageError):
    def __init__(self, addr: int):
        super().__init__(f"address {addr:#x} is not mapped")
        self.addr = addr


class Misaligned(ImageError):
    def __init__(self, addr: int):
        super().__init__(f"address {addr:#x} is not 4-byte aligned")
        self.addr = addr


class WriteProtected(ImageError):
    def __init__(self, addr: int):
        super().__init__(f"address {addr:#x} lies in a non-writable segment")
        self.addr = addr


class Perm(enum.IntFlag):
    NONE = 0
    R = 4
    W = 2
    X = 1

    @classmethod
    def parse(cls, text: str) -> "Perm":
        perm = cls.NONE
        for ch in text.lower():
            if ch == "-":
                continue
            if ch not in "rwx":
                raise ValueError(f"bad permission character {ch!r} in {text!r}")
            perm |= {"r": cls.R, "w": cls.W, "x": cls.X}[ch]
        return perm

    def text(self) -> str:
        return "".join(c if self & p else "" for c, p in
                       (("r", Perm.R), ("w", Perm.W), ("x", Perm.X)))


@dataclass
class Segment:
    vaddr: int
    data: bytearray
    perms: Perm
    source: str = ""

    def __post_init__(self):
        self.data = bytearray(self.data)
        if self.perms & Perm.X and self.vaddr % 4:
            raise Misaligned(self.vaddr)

    @property
    def end(self) -> int:
        return self.vaddr + len(self.data)

    @property
    def executable(self) -> bool:
        return bool(self.perms & Perm.X)

    @property
    def writable(self) -> bool:
        return bool(self.perms & Perm.W)

    @property
    def synthesized(self) -> bool:
        return self.source.startswith(SYNTH_PREFIX)

    def contains(self, addr: int, size: int = 1) -> bool:
        return self.vaddr <= addr and addr + size <= self.end

    def words(self) -> Iterator[tuple]:
        """Yield (address, word) for every aligned word of the segment."""
        data = self.data
        start = (-self.vaddr) % 4
        for off in range(start, len(data) - 3, 4):
            yield self.vaddr + off, int.from_bytes(data[off:off + 4], "little")

    def copy(self) -> "Segment":
        return Segment(self.vaddr, bytearray(self.data), self.perms, self.source)


@dataclass
class MemoryImage:
    segments: list = field(default_factory=list)
    entry: Optional[int] = None

    def __post_init__(self):
        segs = sorted(self.segments, key=lambda s: s.vaddr)
        for prev, cur in zip(segs, segs[1:]):
            if cur.vaddr < prev.end:
                raise OverlappingSegments(
                    f"segment at {cur.vaddr:#x} overlaps [{prev.vaddr:#x}, {prev.end:#x})")
        self.segments = segs
        self._starts = [s.vaddr for s in segs]

    def add(self, seg: Segment) -> None:
        self.segments = self.segments + [seg]
        self.__post_init__()

    def copy(self) -> "MemoryImage":
        return MemoryImage([s.copy() for s in self.segments], self.entry)

    def find(self, addr: int, size: int = 1) -> Optional[Segment]:
        i = bisect.bisect_right(self._starts, addr) - 1
        if i >= 0 and self.segments[i].contains(addr, size):
            return self.segments[i]
        return None

    def segment_for(self, addr: int, size: int = 1) -> Segment:
        seg = self.find(addr, size)
        if seg is None:
            raise Unmapped(addr)
        return seg

    def executable_segments(self) -> list:
        return [s for s in self.segments if s.executable]

    def read(self, addr: int, size: int) -> bytes:
        seg = self.segment_for(addr, size)
        off = addr - seg.vaddr
        return bytes(seg.data[off:off + size])

    def read_word(self, addr: int) -> int:
        if addr % 4:
            raise Misaligned(addr)
        return int.from_bytes(self.read(addr, 4), "little")

    def write_word(self, addr: int, value: int, rewrite: bool = False) -> None:
        """Store a little-endian word in place.

        ``rewrite`` permits patching segments that are not writable, the way
        the live attach temporarily flips text pages writable.
        """
        if addr % 4:
            raise Misaligned(addr)
        seg = self.segment_for(addr, 4)
        if not (seg.writable or rewrite):
            raise WriteProtected(addr)
        off = addr - seg.vaddr
        seg.data[off:off + 4] = (value & 0xFFFFFFFF).to_bytes(4, "little")

    def with_word(self, addr: int, value: int, rewrite: bool = False) -> "MemoryImage":
        img = self.copy()
        img.write_word(addr, value, rewrite)
        return img

    def objects(self) -> list:
        """(load base, path) of every named, non-synthesized object."""
        bases: dict = {}
        for seg in self.segments:
            if seg.source and not seg.synthesized:
                bases[seg.source] = min(bases.get(seg.source, seg.vaddr), seg.vaddr)
        return sorted((base, path) for path, base in bases.items())

    def max_end(self) -> int:
        return max((s.end for s in self.segments), default=0)


# --- ELF -------------------------------------------------------------------

def load_elf(path) -> MemoryImage:
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise MissingFile(str(path)) from None
    if len(data) < _EHDR.size or data[:4] != b"\x7fELF":
        raise MalformedElf(f"{path}: bad ELF magic")
    (ident, _type, machine, _version, entry, phoff, _shoff, _flags, _ehsize,
     phentsize, phnum, *_rest) = _EHDR.unpack_from(data)
    if ident[4] != 2:
        raise MalformedElf(f"{path}: not ELF64")
    if ident[5] != 1:
        raise MalformedElf(f"{path}: not little-endian")
    if machine != EM_AARCH64:
        raise MalformedElf(f"{path}: machine {machine} is not AArch64")
    if phnum and phentsize < _PHDR.size:
        raise MalformedElf(f"{path}: program header entries too small")

    segments = []
    for i in range(phnum):
        off = phoff + i * phentsize
        if off + _PHDR.size > len(data):
            raise MalformedElf(f"{path}: truncated program headers")
        p_type, p_flags, p_offset, p_vaddr, _paddr, p_filesz, p_memsz, _align = \
            _PHDR.unpack_from(data, off)
        if p_type != PT_LOAD:
            continue
        if p_filesz > p_memsz or p_offset + p_filesz > len(data):
            raise MalformedElf(f"{path}: PT_LOAD {i} exceeds file")
        body = bytearray(data[p_offset:p_offset + p_filesz])
        body.extend(bytes(p_memsz - p_filesz))
        perms = Perm.NONE
        if p_flags & PF_R:
            perms |= Perm.R
        if p_flags & PF_W:
            perms |= Perm.W
        if p_flags & PF_X:
            perms |= Perm.X
        segments.append(Segment(p_vaddr, body, perms, str(path)))
    return MemoryImage(segments, entry)


def write_elf(image: MemoryImage, path) -> None:
    """Write a minimal static ELF64 executable with one PT_LOAD per segment."""
    phoff = _EHDR.size
    offset = phoff + _PHDR.size * len(image.segments)
    headers, blobs = [], []
    for seg in image.segments:
        flags = ((PF_R if seg.perms & Perm.R else 0)
                 | (PF_W if seg.perms & Perm.W else 0)
                 | (PF_X if seg.perms & Perm.X else 0))
        headers.append(_PHDR.pack(PT_LOAD, flags, offset, seg.vaddr, seg.vaddr,
                                  len(seg.data), len(seg.data), 4))
        blobs.append(bytes(seg.data))
        offset += len(seg.data)
    ident = b"\x7fELF" + bytes([2, 1, 1]) + bytes(9)
    ehdr = _EHDR.pack(ident, 2, EM_AARCH64, 1, image.entry or 0, phoff, 0, 0,
                      _EHDR.size, _PHDR.size, len(image.segments), 64, 0, 0)
    Path(path).write_bytes(ehdr + b"".join(headers) + b"".join(blobs))


# --- manifest --------------------------------------------------------------

def parse_addr(value) -> int:
    if isinstance(value, bool):
        raise ValueError(f"bad address {value!r}")
    if isinstance(value, int):
        return value
    text = str(value).strip().lower()
    return int(text, 16) if text.startswith("0x") else int(text, 10)


def load_manifest(path) -> MemoryImage:
    """Load a manifest: a JSON array of ``{vaddr, perms, file}`` records.

    The object form ``{"entry": ..., "segments": [...]}`` written by
    :func:`write_manifest` is accepted too.  Files are relative to the
    manifest's directory.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise MissingFile(str(path)) from None
    except json.JSONDecodeError as exc:
        raise ImageError(f"{path}: {exc}") from None
    entry = None
    records = doc
    if isinstance(doc, dict):
        records = doc.get("segments", [])
        if doc.get("entry") is not None:
            entry = parse_addr(doc["entry"])
    if not isinstance(records, list):
        raise ImageError(f"{path}: manifest must list segment records")
    segments = []
    for rec in records:
        if not isinstance(rec, dict) or "file" not in rec or "vaddr" not in rec:
            raise ImageError(f"{path}: segment record needs vaddr and file: {rec!r}")
        blob = path.parent / rec["file"]
        if not blob.is_file():
            raise MissingFile(str(blob))
        segments.append(Segment(parse_addr(rec["vaddr"]), blob.read_bytes(),
                                Perm.parse(rec.get("perms", "r")),
                                rec.get("source", str(blob))))
    return MemoryImage(segments, entry)


def write_manifest(image: MemoryImage, directory, name: str = "manifest.json",
                   extra: Optional[dict] = None) -> Path:
    """Write each segment as ``seg_<vaddr>.bin`` plus a manifest; returns its path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    records = []
    for seg in image.segments:
        fname = f"seg_{seg.vaddr:x}.bin"
        (directory / fname).write_bytes(bytes(seg.data))
        rec = {"vaddr": f"{seg.vaddr:#x}", "perms": seg.perms.text(), "file": fname}
        if seg.source:
            rec["source"] = seg.source
        records.append(rec)
    doc = {"schema_version": 1,
           "entry": None if image.entry is None else f"{image.entry:#x}",
           "segments": records}
    if extra:
        doc.update(extra)
    out = directory / name
    out.write_text(json.dumps(doc, indent=2) + "\n")
    return out


def image_from_blobs(blobs: Iterable[tuple], entry: Optional[int] = None) -> MemoryImage:
    """Build an image from ``(vaddr, bytes, perms-text, source)`` tuples."""
    return MemoryImage([Segment(v, bytearray(b), Perm.parse(p), src)
                        for v, b, p, src in blobs], entry)

