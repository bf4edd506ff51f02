"""Seeded random cache placement shared bit-exactly by client and server.

Both sides walk the catalog in canonical order and draw one SplitMix64 value
per symbol; a symbol is kept when the top 53 bits of the draw fall below
``floor(p * 2**53)``. The threshold is computed from the exact binary value
of ``p`` so no floating-point rounding enters the decision.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, FrozenSet, Iterable, Iterator, Tuple

import numpy as np

from .model import SymbolId

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB
ONE_53 = 1 << 53


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * MIX1) & MASK64
    z = ((z ^ (z >> 27)) * MIX2) & MASK64
    return z ^ (z >> 31)


def splitmix64_next(state: int) -> Tuple[int, int]:
    """Advance a SplitMix64 state; returns ``(new_state, output)``."""
    state = (state + GAMMA) & MASK64
    return state, _mix(state)


def splitmix64_block(seed: int, start: int, count: int) -> np.ndarray:
    """Draws ``start .. start+count-1`` of the stream seeded with ``seed``.

    Draw ``i`` (0-based) equals the output of the ``i+1``-th call to
    :func:`splitmix64_next` starting from ``seed``.
    """
    idx = np.arange(start + 1, start + count + 1, dtype=np.uint64)
    z = np.uint64(seed & MASK64) + idx * np.uint64(GAMMA)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX2)
    return z ^ (z >> np.uint64(31))


def placement_threshold(p: float) -> int:
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must be in [0, 1], got {p}")
    return int(Fraction(p) * ONE_53)  # floor; Fraction(float) is exact


def placement_decision(u: int, p: float) -> bool:
    return (u >> 11) < placement_threshold(p)


@dataclass(frozen=True)
class VideoInfo:
    video_id: str
    num_symbols: int
    file_length: int


class Catalog:
    """Videos in canonical order (byte-wise by UTF-8 encoded id)."""

    def __init__(self, videos: Iterable[VideoInfo]):
        vids = sorted(videos, key=lambda v: v.video_id.encode("utf-8"))
        ids = [v.video_id for v in vids]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate video ids in catalog")
        self.videos: Tuple[VideoInfo, ...] = tuple(vids)
        self._by_id = {v.video_id: v for v in vids}

    @classmethod
    def for_files(cls, lengths: Dict[str, int], symbol_size: int) -> "Catalog":
        return cls(VideoInfo(name, -(-n // symbol_size), n) for name, n in lengths.items())

    def __iter__(self) -> Iterator[VideoInfo]:
        return iter(self.videos)

    def __len__(self) -> int:
        return len(self.videos)

    def __contains__(self, video_id: object) -> bool:
        return video_id in self._by_id

    def __eq__(self, other):
        return isinstance(other, Catalog) and self.videos == other.videos

    def get(self, video_id: str) -> VideoInfo:
        try:
            return self._by_id[video_id]
        except KeyError:
            raise KeyError(f"unknown video {video_id!r}") from None

    @property
    def total_symbols(self) -> int:
        return sum(v.num_symbols for v in self.videos)

    def symbols(self) -> Iterator[SymbolId]:
        for v in self.videos:
            for seq in range(v.num_symbols):
                yield SymbolId(v.video_id, seq)

    def has_symbol(self, s: SymbolId) -> bool:
        v = self._by_id.get(s.video_id)
        return v is not None and 0 <= s.seq < v.num_symbols


@dataclass
class CacheContents:
    held: FrozenSet[SymbolId]
    payloads: Dict[SymbolId, bytes] = field(default_factory=dict)

    def __contains__(self, s: object) -> bool:
        return s in self.held

    def __len__(self) -> int:
        return len(self.held)


def placement_mask(seed: int, n: int, p: float) -> np.ndarray:
    """Boolean keep-mask for the first ``n`` draws of the seeded stream."""
    thresh = np.uint64(placement_threshold(p))
    if n == 0:
        return np.zeros(0, dtype=bool)
    return (splitmix64_block(seed, 0, n) >> np.uint64(11)) < thresh


def build_cache(seed: int, catalog: Catalog, p: float) -> CacheContents:
    keep = placement_mask(seed, catalog.total_symbols, p)
    held = []
    offset = 0
    for v in catalog:
        for seq in np.flatnonzero(keep[offset: offset + v.num_symbols]):
            held.append(SymbolId(v.video_id, int(seq)))
        offset += v.num_symbols
    return CacheContents(frozenset(held))


def build_cache_reference(seed: int, catalog: Catalog, p: float) -> CacheContents:
    """Scalar re-derivation of :func:`build_cache`, one draw at a time."""
    state = seed & MASK64
    held = []
    for s in catalog.symbols():
        state, u = splitmix64_next(state)
        if placement_decision(u, p):
            held.append(s)
    return CacheContents(frozenset(held))
