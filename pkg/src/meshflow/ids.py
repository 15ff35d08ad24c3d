"""128-bit global identifiers.

A gid packs (birth locality, per-locality sequence number, kind tag) into a
single int.  Layout, most significant first:

    bits 96..127  locality of birth (u32)
    bits 32..95   sequence number   (u64)
    bits  0..31   kind tag          (u32)

Sequence numbers are never reused within a run, so gids minted on distinct
localities can never collide.
"""

from __future__ import annotations

import itertools
import threading

KIND_OTHER = 0
KIND_TASK = 1
KIND_FUTURE = 2
KIND_DATAFLOW = 3
KIND_SEMAPHORE = 4
KIND_MUTEX = 5
KIND_FE = 6
KIND_GRID_BLOCK = 7

KIND_NAMES = {
    KIND_OTHER: "other",
    KIND_TASK: "task",
    KIND_FUTURE: "future",
    KIND_DATAFLOW: "dataflow",
    KIND_SEMAPHORE: "semaphore",
    KIND_MUTEX: "mutex",
    KIND_FE: "fe",
    KIND_GRID_BLOCK: "grid-block",
}

_U32 = (1 << 32) - 1
_U64 = (1 << 64) - 1

# gid 0 is the reserved "system" destination (handshake parcels and the like).
NULL_GID = 0


def make_gid(locality: int, sequence: int, kind: int) -> int:
    if not 0 <= locality <= _U32:
        raise ValueError(f"locality out of range: {locality}")
    if not 0 <= sequence <= _U64:
        raise ValueError(f"sequence out of range: {sequence}")
    if kind not in KIND_NAMES:
        raise ValueError(f"unknown kind tag: {kind}")
    return (locality << 96) | (sequence << 32) | kind


def gid_locality(gid: int) -> int:
    return (gid >> 96) & _U32


def gid_sequence(gid: int) -> int:
    return (gid >> 32) & _U64


def gid_kind(gid: int) -> int:
    return gid & _U32


def gid_bytes(gid: int) -> bytes:
    return gid.to_bytes(16, "big")


def gid_from_bytes(raw: bytes) -> int:
    if len(raw) != 16:
        raise ValueError(f"gid must be 16 bytes, got {len(raw)}")
    return int.from_bytes(raw, "big")


def format_gid(gid: int) -> str:
    kind = gid_kind(gid)
    return f"{gid_locality(gid)}:{gid_sequence(gid)}:{KIND_NAMES.get(kind, kind)}"


class GidAllocator:
    """Mints fresh gids for one locality.

    The sequence counter is shared across kinds; ``itertools.count`` is a
    single C-level call so allocation is safe under the GIL without a lock.
    """

    __slots__ = ("locality", "_seq", "_loc_part")

    def __init__(self, locality: int):
        self.locality = locality
        self._seq = itertools.count(1)
        self._loc_part = locality << 96

    def allocate(self, kind: int) -> int:
        return self._loc_part | (next(self._seq) << 32) | kind
