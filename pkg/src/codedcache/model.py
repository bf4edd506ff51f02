"""Request algebra for delay-constrained coded caching.

A raw request ``(k; S; t)`` says that cache ``k`` wants one symbol which is
stored at the caches in ``S`` and must be served by time ``t``. Requests whose
targets are covered by each other's availability can be served by a single
XOR-coded multicast, and are merged into ``(K1 | K2; S1 & S2; min(t1, t2))``.

Cache sets are bitmasks: cache id ``j`` (1-based) lives in bit ``j - 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Optional, Tuple, Union

MAX_CACHES = 64
DEFAULT_SYMBOL_SIZE = 10240

INFINITE = math.inf
Misfit = Union[int, float]  # finite int, or INFINITE


class CacheSet(int):
    """Immutable set of cache ids backed by an integer bitmask."""

    __slots__ = ()

    @classmethod
    def of(cls, *ids: int) -> "CacheSet":
        return cls.from_ids(ids)

    @classmethod
    def from_ids(cls, ids: Iterable[int]) -> "CacheSet":
        mask = 0
        for j in ids:
            if j < 1:
                raise ValueError(f"cache ids start at 1, got {j}")
            mask |= 1 << (j - 1)
        return cls(mask)

    def __iter__(self):
        mask = int(self)
        while mask:
            low = mask & -mask
            yield low.bit_length()
            mask ^= low

    def __len__(self) -> int:
        return bin(self).count("1")

    def __contains__(self, j: object) -> bool:
        return isinstance(j, int) and j >= 1 and bool(int(self) >> (j - 1) & 1)

    def __and__(self, other: int) -> "CacheSet":
        return CacheSet(int(self) & int(other))

    def __or__(self, other: int) -> "CacheSet":
        return CacheSet(int(self) | int(other))

    def __sub__(self, other: int) -> "CacheSet":
        return CacheSet(int(self) & ~int(other))

    def issubset(self, other: int) -> bool:
        return int(self) & ~int(other) == 0

    def max_id(self) -> int:
        return int(self).bit_length()

    def __repr__(self) -> str:
        return "{" + ", ".join(str(j) for j in self) + "}"

    __str__ = __repr__


def bit(cache_id: int) -> int:
    return 1 << (cache_id - 1)


@dataclass(frozen=True)
class SystemConfig:
    num_caches: int
    cache_prob: float
    symbol_size: int = DEFAULT_SYMBOL_SIZE

    def __post_init__(self):
        if not 1 <= self.num_caches <= MAX_CACHES:
            raise ValueError(f"num_caches must be in [1, {MAX_CACHES}], got {self.num_caches}")
        if not 0.0 <= self.cache_prob <= 1.0:
            raise ValueError(f"cache_prob must be in [0, 1], got {self.cache_prob}")
        if self.symbol_size < 1:
            raise ValueError("symbol_size must be positive")


class SymbolId(NamedTuple):
    video_id: str
    seq: int


@dataclass(frozen=True, slots=True)
class RawRequest:
    origin: int
    availability: CacheSet
    deadline: int
    symbol: Optional[SymbolId] = None

    def __post_init__(self):
        if self.origin < 1:
            raise ValueError(f"cache ids start at 1, got {self.origin}")
        if int(self.availability) >> (self.origin - 1) & 1:
            raise ValueError(
                f"origin {self.origin} is in its own availability set {CacheSet(self.availability)}"
            )


class Part(NamedTuple):
    """One constituent raw request of a merged request."""

    target: int
    symbol: Optional[SymbolId]
    availability: CacheSet


@dataclass(frozen=True, slots=True)
class MergedRequest:
    targets: CacheSet
    availability: CacheSet
    deadline: int
    parts: Tuple[Part, ...]

    def is_decodable(self) -> bool:
        """Every target holds the symbols of all other parts."""
        for i, a in enumerate(self.parts):
            for j, b in enumerate(self.parts):
                if i != j and not int(b.availability) >> (a.target - 1) & 1:
                    return False
        return True


def lift_raw(r: RawRequest) -> MergedRequest:
    if int(r.availability) >> (r.origin - 1) & 1:
        raise ValueError("origin must not belong to its availability set")
    avail = CacheSet(r.availability)
    return MergedRequest(
        targets=CacheSet(bit(r.origin)),
        availability=avail,
        deadline=r.deadline,
        parts=(Part(r.origin, r.symbol, avail),),
    )


def mergeable_masks(k1: int, s1: int, k2: int, s2: int) -> bool:
    return k1 & ~s2 == 0 and k2 & ~s1 == 0


def misfit_masks(k1: int, s1: int, k2: int, s2: int) -> Misfit:
    if k1 & ~s2 or k2 & ~s1:
        return INFINITE
    return bin(s1 & ~(s2 | k2)).count("1") + bin(s2 & ~(s1 | k1)).count("1")


def is_mergeable(a: MergedRequest, b: MergedRequest) -> bool:
    return mergeable_masks(a.targets, a.availability, b.targets, b.availability)


def misfit(a: MergedRequest, b: MergedRequest) -> Misfit:
    """Number of availability slots wasted by merging ``a`` and ``b``.

    ``INFINITE`` when the two requests cannot be merged at all.
    """
    return misfit_masks(a.targets, a.availability, b.targets, b.availability)


def merge(a: MergedRequest, b: MergedRequest) -> MergedRequest:
    if not is_mergeable(a, b):
        raise ValueError(f"requests are not mergeable: {a.targets};{a.availability} vs "
                         f"{b.targets};{b.availability}")
    return MergedRequest(
        targets=a.targets | b.targets,
        availability=a.availability & b.availability,
        deadline=min(a.deadline, b.deadline),
        parts=a.parts + b.parts,
    )
