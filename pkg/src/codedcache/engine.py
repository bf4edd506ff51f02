"""Deadline-ordered merge queue with sequential tau-fit insertion.

The queue holds merged requests sorted by ``(deadline, creation order)``. A new
raw request is merged into the *first* entry, in that order, whose misfit
against it is at most ``tau``; otherwise it becomes a new entry.

Three search strategies return the same index:

* a plain scan, one O(1) test per entry (any K);
* a chunked numpy scan over uint64 mirror columns (K <= 64);
* for ``tau == 0``, a bucket index keyed by ``(S | K, cache)``. Zero misfit
  between a raw request ``(k; S)`` and an entry ``(K_l; S_l)`` holds exactly
  when ``S_l | K_l == S | {k}`` and ``k in S_l``, so the first qualifying
  entry is the head of one bucket.
"""

from __future__ import annotations

import heapq
import itertools
from bisect import bisect_right
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from .model import MAX_CACHES, CacheSet, MergedRequest, Part, RawRequest

DEFAULT_GUARD_MS = 20

# below this many entries the plain scan beats numpy call overhead
_VECTOR_MIN_ENTRIES = 48
_FIRST_CHUNK = 64


@dataclass(frozen=True)
class EngineConfig:
    num_caches: int
    tau: Union[int, str, None] = "max"

    def __post_init__(self):
        if self.num_caches < 1:
            raise ValueError("num_caches must be positive")
        t = self.resolved_tau
        if t < 0 or t > self.max_tau:
            raise ValueError(f"tau must be in [0, {self.max_tau}], got {self.tau}")

    @property
    def max_tau(self) -> int:
        return max(self.num_caches - 2, 0)

    @property
    def resolved_tau(self) -> int:
        if self.tau is None or (isinstance(self.tau, str) and self.tau.lower() == "max"):
            return self.max_tau
        return int(self.tau)


@dataclass(frozen=True)
class InsertOutcome:
    merged_at: Optional[int]  # None when appended
    length: int

    @property
    def appended(self) -> bool:
        return self.merged_at is None


class _Entry:
    __slots__ = ("targets", "avail", "deadline", "seq", "parts", "alive")

    def __init__(self, targets, avail, deadline, seq, parts):
        self.targets = targets
        self.avail = avail
        self.deadline = deadline
        self.seq = seq
        self.parts = parts
        self.alive = True

    def key(self):
        return (self.deadline, self.seq)

    def freeze(self) -> MergedRequest:
        return MergedRequest(CacheSet(self.targets), CacheSet(self.avail),
                             self.deadline, tuple(self.parts))


class _Columns:
    """uint64 mirror of (targets, availability) in queue order."""

    def __init__(self, capacity: int = 1024):
        self.t = np.zeros(capacity, dtype=np.uint64)
        self.s = np.zeros(capacity, dtype=np.uint64)
        self.head = 0
        self.n = 0

    def _make_room(self):
        cap = len(self.t)
        if self.head + self.n < cap:
            return
        new_cap = cap * 2 if self.n > cap // 2 else cap
        t = np.zeros(new_cap, dtype=np.uint64)
        s = np.zeros(new_cap, dtype=np.uint64)
        t[: self.n] = self.t[self.head: self.head + self.n]
        s[: self.n] = self.s[self.head: self.head + self.n]
        self.t, self.s, self.head = t, s, 0

    def insert(self, pos: int, targets: int, avail: int):
        if pos == 0 and self.head > 0:
            self.head -= 1
        else:
            self._make_room()
            a = self.head + pos
            b = self.head + self.n
            if a < b:
                self.t[a + 1: b + 1] = self.t[a:b]
                self.s[a + 1: b + 1] = self.s[a:b]
        self.t[self.head + pos] = targets
        self.s[self.head + pos] = avail
        self.n += 1

    def delete(self, pos: int):
        if pos == 0:
            self.head += 1
        else:
            a = self.head + pos
            b = self.head + self.n
            self.t[a: b - 1] = self.t[a + 1: b]
            self.s[a: b - 1] = self.s[a + 1: b]
        self.n -= 1
        if self.n == 0:
            self.head = 0

    def set(self, pos: int, targets: int, avail: int):
        self.t[self.head + pos] = targets
        self.s[self.head + pos] = avail

    def find(self, kbit: int, avail: int, tau: int, max_tau: int) -> int:
        """Index of the first qualifying entry, or -1."""
        h, n = self.head, self.n
        kb = np.uint64(kbit)
        not_s = np.uint64(~avail & 0xFFFFFFFFFFFFFFFF)
        s_new = np.uint64(avail)
        not_u = np.uint64(~(avail | kbit) & 0xFFFFFFFFFFFFFFFF)
        zero = np.uint64(0)
        start, chunk = 0, _FIRST_CHUNK
        while start < n:
            end = min(n, start + chunk)
            tk = self.t[h + start: h + end]
            sk = self.s[h + start: h + end]
            ok = ((sk & kb) != zero) & ((tk & not_s) == zero)
            if tau < max_tau:
                rho = np.bitwise_count(s_new & ~(sk | tk)) + np.bitwise_count(sk & not_u)
                ok &= rho <= tau
            i = int(ok.argmax())
            if ok[i]:
                return start + i
            start = end
            chunk *= 4
        return -1


class MergeQueue:
    """Merged requests in deadline order, with tau-fit insertion.

    ``index=True`` maintains the zero-misfit bucket index used when
    inserting with ``tau == 0``. ``vectorize`` selects the numpy scan for
    K <= 64 (default: on when K allows it).
    """

    def __init__(self, num_caches: int, *, index: bool = False,
                 vectorize: Optional[bool] = None):
        if num_caches < 1:
            raise ValueError("num_caches must be positive")
        self.num_caches = num_caches
        self._entries: List[_Entry] = []
        self._keys: List[Tuple[int, int]] = []
        self._seq = itertools.count()
        self.raw_count = 0
        if vectorize is None:
            vectorize = num_caches <= MAX_CACHES
        if vectorize and num_caches > MAX_CACHES:
            raise ValueError("vectorized scan needs num_caches <= 64")
        self._cols: Optional[_Columns] = _Columns() if vectorize else None
        self._index: Optional[Dict[Tuple[int, int], list]] = {} if index else None
        self._push = itertools.count()
        self._index_items = 0

    # -- inspection -----------------------------------------------------

    def __len__(self) -> int:
        return len(self._entries)

    def stats(self) -> Tuple[int, int]:
        return len(self._entries), self.raw_count

    def entries(self) -> List[MergedRequest]:
        return [e.freeze() for e in self._entries]

    def peek_deadline(self) -> Optional[int]:
        return self._entries[0].deadline if self._entries else None

    # -- search ---------------------------------------------------------

    def find_linear(self, kbit: int, avail: int, tau: int) -> int:
        union = avail | kbit
        for i, e in enumerate(self._entries):
            if e.avail & kbit and not e.targets & ~avail:
                if tau >= self.num_caches - 2:
                    return i
                rho = bin(avail & ~(e.avail | e.targets)).count("1") \
                    + bin(e.avail & ~union).count("1")
                if rho <= tau:
                    return i
        return -1

    def _find_indexed(self, kbit: int, avail: int) -> int:
        union = avail | kbit
        heap = self._index.get((union, kbit))
        while heap:
            deadline, seq, _, e = heap[0]
            if (e.alive and e.deadline == deadline and e.avail & kbit
                    and (e.avail | e.targets) == union):
                return self._position(e)
            heapq.heappop(heap)
            self._index_items -= 1
        return -1

    def _find(self, kbit: int, avail: int, tau: int) -> int:
        if tau == 0 and self._index is not None:
            return self._find_indexed(kbit, avail)
        if self._cols is not None and len(self._entries) >= _VECTOR_MIN_ENTRIES:
            return self._cols.find(kbit, avail, tau, max(self.num_caches - 2, 0))
        return self.find_linear(kbit, avail, tau)

    # -- mutation -------------------------------------------------------

    def _position(self, e: _Entry) -> int:
        i = bisect_right(self._keys, e.key()) - 1
        assert self._entries[i] is e
        return i

    def _index_add(self, e: _Entry):
        union = e.avail | e.targets
        item_deadline, item_seq = e.deadline, e.seq
        mask = e.avail
        while mask:
            low = mask & -mask
            mask ^= low
            heapq.heappush(self._index.setdefault((union, low), []),
                           (item_deadline, item_seq, next(self._push), e))
            self._index_items += 1
        if self._index_items > 8 * max(4096, len(self._entries) * self.num_caches):
            self._rebuild_index()

    def _rebuild_index(self):
        self._index = {}
        self._index_items = 0
        for e in self._entries:
            self._index_add(e)

    def _place(self, e: _Entry) -> int:
        key = e.key()
        pos = bisect_right(self._keys, key)
        self._keys.insert(pos, key)
        self._entries.insert(pos, e)
        if self._cols is not None:
            self._cols.insert(pos, e.targets, e.avail)
        return pos

    def _remove_at(self, pos: int) -> _Entry:
        e = self._entries.pop(pos)
        del self._keys[pos]
        if self._cols is not None:
            self._cols.delete(pos)
        return e

    def insert(self, r: RawRequest, cfg: Union[EngineConfig, int]) -> InsertOutcome:
        tau = cfg.resolved_tau if isinstance(cfg, EngineConfig) else int(cfg)
        return self.insert_raw(r.origin, int(r.availability), r.deadline, r.symbol, tau)

    def insert_raw(self, origin: int, avail: int, deadline: int, symbol, tau: int) -> InsertOutcome:
        """:meth:`insert` on unpacked fields; ``tau`` already resolved."""
        kbit = 1 << (origin - 1)
        if avail & kbit:
            raise ValueError("origin must not belong to its availability set")
        if origin > self.num_caches or avail >> self.num_caches:
            raise ValueError("cache id out of range for this queue")
        part = Part(origin, symbol, CacheSet(avail))
        self.raw_count += 1

        i = self._find(kbit, avail, tau)
        if i < 0:
            e = _Entry(kbit, avail, deadline, next(self._seq), [part])
            self._place(e)
            if self._index is not None:
                self._index_add(e)
            return InsertOutcome(None, len(self._entries))

        e = self._entries[i]
        old_union = e.avail | e.targets
        e.targets |= kbit
        e.avail &= avail
        e.parts.append(part)
        if deadline < e.deadline:
            self._remove_at(i)
            e.deadline = deadline
            self._place(e)
            reindex = True
        else:
            if self._cols is not None:
                self._cols.set(i, e.targets, e.avail)
            reindex = (e.avail | e.targets) != old_union
        if self._index is not None and reindex:
            self._index_add(e)
        return InsertOutcome(i, len(self._entries))

    def pop_head(self) -> MergedRequest:
        if not self._entries:
            raise IndexError("pop from an empty merge queue")
        e = self._remove_at(0)
        e.alive = False
        self.raw_count -= len(e.parts)
        return e.freeze()

    def pop_head_size(self) -> int:
        """Remove the head entry and return only its part count."""
        if not self._entries:
            raise IndexError("pop from an empty merge queue")
        e = self._remove_at(0)
        e.alive = False
        n = len(e.parts)
        self.raw_count -= n
        return n

    def pop_due(self, now: int, guard: int = DEFAULT_GUARD_MS) -> List[MergedRequest]:
        out = []
        limit = now + guard
        while self._entries and self._entries[0].deadline <= limit:
            out.append(self.pop_head())
        return out
