"""Binary ``.fkim`` checkpoint format.

Layout (little endian)::

    b"FKIM" | u8 version=1 | u32 count
    per tensor: u16 path_len | path utf-8 | u8 frozen | u8 rank | rank*u32 dims | f32 payload

Tensors are written in lexicographic path order, so saving the same tree
always yields the same bytes.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .params import ParamTree

MAGIC = b"FKIM"
VERSION = 1


class CheckpointFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def encode(tree: ParamTree) -> bytes:
    parts = [MAGIC, struct.pack("<BI", VERSION, len(tree))]
    for path, p in tree.items():
        raw = path.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"path too long: {path[:40]}...")
        shape = p.value.shape
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", int(p.frozen), len(shape)))
        parts.append(struct.pack(f"<{len(shape)}I", *shape))
        parts.append(np.ascontiguousarray(p.value, dtype="<f4").tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> ParamTree:
    pos = 0

    def need(n: int, what: str) -> None:
        if pos + n > len(buf):
            raise CheckpointFormatError(f"truncated while reading {what}", pos)

    need(4, "magic")
    if buf[:4] != MAGIC:
        raise CheckpointFormatError(f"bad magic {buf[:4]!r}", 0)
    pos = 4
    need(5, "header")
    version, count = struct.unpack_from("<BI", buf, pos)
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported version {version}", pos)
    pos += 5
    tree = ParamTree()
    for _ in range(count):
        start = pos
        need(2, "path length")
        (plen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        need(plen, "path")
        try:
            path = buf[pos:pos + plen].decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointFormatError("path is not valid utf-8", pos) from None
        pos += plen
        need(2, "flags")
        frozen, rank = struct.unpack_from("<BB", buf, pos)
        pos += 2
        need(4 * rank, "dims")
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        need(4 * n, f"payload of {path!r}")
        data = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).astype(np.float64)
        pos += 4 * n
        if path in tree:
            raise CheckpointFormatError(f"duplicate path {path!r}", start)
        tree.add(path, data.reshape(dims), frozen=bool(frozen))
    if pos != len(buf):
        raise CheckpointFormatError("trailing bytes after last tensor", pos)
    return tree


def save_checkpoint(tree: ParamTree, path) -> None:
    Path(path).write_bytes(encode(tree))


def load_checkpoint(path) -> ParamTree:
    return decode(Path(path).read_bytes())
