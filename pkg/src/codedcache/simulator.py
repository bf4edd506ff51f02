"""Monte Carlo steady-state evaluation of tau-fit merging.

Raw requests arrive one at a time. Request ``r`` comes from a uniformly random
cache ``k`` and its symbol is stored at each other cache independently with
probability ``p``. Its deadline is ``r + L``, so deadline order equals
arrival order. Whenever more than ``L`` raw requests are pending, the
earliest-deadline entry departs as one coded transmission.

Random draws come from the same SplitMix64 stream used for cache placement.
Request ``r`` consumes draws ``r*K .. r*K + K - 1``: one for the origin, then
one per other cache in increasing id order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .engine import EngineConfig, MergeQueue
from .model import CacheSet, RawRequest, SymbolId
from .placement import placement_threshold, splitmix64_block, splitmix64_next

DEFAULT_BATCHES = 10
_BLOCK = 2048


def _origin_from_draw(u: int, num_caches: int) -> int:
    return (((u >> 11) * num_caches) >> 53) + 1


def sample_request(state: int, num_caches: int, p: float,
                   deadline: int = 0, symbol: Optional[SymbolId] = None
                   ) -> Tuple[int, RawRequest]:
    """Draw one raw request; returns ``(new_state, request)``."""
    thresh = placement_threshold(p)
    state, u = splitmix64_next(state)
    k = _origin_from_draw(u, num_caches)
    mask = 0
    for j in range(1, num_caches + 1):
        if j == k:
            continue
        state, u = splitmix64_next(state)
        if (u >> 11) < thresh:
            mask |= 1 << (j - 1)
    return state, RawRequest(k, CacheSet(mask), deadline, symbol)


def sample_block(seed: int, first: int, count: int, num_caches: int, p: float
                 ) -> Tuple[List[int], List[int]]:
    """Vectorized equivalent of ``count`` consecutive :func:`sample_request` calls.

    Returns ``(origins, availability_masks)`` for requests
    ``first .. first+count-1`` of the stream seeded with ``seed``.
    """
    K = num_caches
    if K > 2048:
        raise ValueError("vectorized sampling supports at most 2048 caches")
    draws = splitmix64_block(seed, first * K, count * K).reshape(count, K)
    k0 = (((draws[:, 0] >> np.uint64(11)) * np.uint64(K)) >> np.uint64(53)).astype(np.int64)
    origins = (k0 + 1).tolist()
    if K == 1:
        return origins, [0] * count
    dec = (draws[:, 1:] >> np.uint64(11)) < np.uint64(placement_threshold(p))
    z = np.arange(K)[None, :]
    col = np.clip(z - (z > k0[:, None]), 0, K - 2)
    bits = np.take_along_axis(dec, col, axis=1)
    bits[np.arange(count), k0] = False
    if K <= 64:
        weights = np.left_shift(np.uint64(1), np.arange(K, dtype=np.uint64))
        masks = (bits.astype(np.uint64) * weights).sum(axis=1, dtype=np.uint64).tolist()
    else:
        packed = np.packbits(bits, axis=1, bitorder="little")
        masks = [int.from_bytes(row.tobytes(), "little") for row in packed]
    return origins, masks


@dataclass(frozen=True)
class SimConfig:
    K: int
    p: float
    tau: Union[int, str] = "max"
    L: int = 100
    warmup: Optional[int] = None
    measured: Optional[int] = None
    rng_seed: int = 0
    count_mode: str = "raw"  # "raw": L caps pending raw requests; "entries": merged entries

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be positive")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("p must be in [0, 1]")
        if self.L < 1:
            raise ValueError("L must be at least 1")
        if self.measured is not None and self.measured < 1:
            raise ValueError("measured must be at least 1")
        if self.warmup is not None and self.warmup < 0:
            raise ValueError("warmup must be non-negative")
        if self.count_mode not in ("raw", "entries"):
            raise ValueError(f"unknown count_mode {self.count_mode!r}")
        EngineConfig(self.K, self.tau)  # validates tau

    @property
    def resolved_tau(self) -> int:
        return EngineConfig(self.K, self.tau).resolved_tau

    @property
    def warmup_count(self) -> int:
        return 10 * self.L if self.warmup is None else self.warmup

    @property
    def measured_count(self) -> int:
        return max(200_000, 20 * self.L) if self.measured is None else self.measured


@dataclass
class GainResult:
    gain: float
    transmissions: int
    served: int
    mean_entry_size: float  # mean raw requests per pending entry, sampled per arrival
    stderr: float = 0.0
    generated: int = 0
    pending: int = 0
    batch_gains: List[float] = field(default_factory=list)


def run_steady_state(cfg: SimConfig, batches: int = DEFAULT_BATCHES) -> GainResult:
    K, L = cfg.K, cfg.L
    tau = cfg.resolved_tau
    warmup, measured = cfg.warmup_count, cfg.measured_count
    total = warmup + measured
    q = MergeQueue(K, index=(tau == 0), vectorize=K <= 64)
    by_entries = cfg.count_mode == "entries"
    batches = max(1, min(batches, measured))
    batch_tx = [0] * batches
    batch_served = [0] * batches
    occupancy = 0.0
    occupancy_samples = 0

    r = 0
    while r < total:
        n = min(_BLOCK, total - r)
        origins, masks = sample_block(cfg.rng_seed, r, n, K, cfg.p)
        for k, mask in zip(origins, masks):
            q.insert_raw(k, mask, r + L, None, tau)
            measuring = r >= warmup
            while (len(q) if by_entries else q.raw_count) > L:
                size = q.pop_head_size()
                if measuring:
                    b = (r - warmup) * batches // measured
                    batch_tx[b] += 1
                    batch_served[b] += size
            if measuring and len(q):
                occupancy += q.raw_count / len(q)
                occupancy_samples += 1
            r += 1

    tx, served = sum(batch_tx), sum(batch_served)
    gains = [s / t for s, t in zip(batch_served, batch_tx) if t]
    if len(gains) > 1:
        stderr = float(np.std(gains, ddof=1) / math.sqrt(len(gains)))
    else:
        stderr = 0.0
    return GainResult(
        gain=served / tx if tx else 1.0,
        transmissions=tx,
        served=served,
        mean_entry_size=occupancy / occupancy_samples if occupancy_samples else 0.0,
        stderr=stderr,
        generated=total,
        pending=q.raw_count,
        batch_gains=gains,
    )


def asymptotic_gain(K: int, p: Union[float, Fraction]) -> Union[float, Fraction]:
    """Large-queue limit ``K p / (1 - (1 - p)**K)``.

    Exact when ``p`` is a :class:`~fractions.Fraction`. ``p == 0`` is 0/0 and
    rejected; the limit there is 1.
    """
    if K < 1:
        raise ValueError("K must be positive")
    if not 0 < p <= 1:
        raise ValueError(f"p must be in (0, 1], got {p} (the p -> 0 limit is 1)")
    return K * p / (1 - (1 - p) ** K)


def expected_queue_length(users: float, video_rate_bps: float, delay_s: float,
                          symbol_bytes: float) -> int:
    if min(users, video_rate_bps, delay_s, symbol_bytes) <= 0:
        raise ValueError("all inputs must be positive")
    return round(users * video_rate_bps * delay_s / (8 * symbol_bytes))


def scaling_law(L: float, p: float, c: float, slope: float = 0.5) -> float:
    return slope * math.log(L) / math.log(1 / p) + c


def fit_scaling_constant(points: Sequence[Tuple[float, float]], p: float,
                         slope: float = 0.5) -> float:
    """Least-squares intercept of ``gain ~ slope * log_{1/p}(L) + c``."""
    if not 0 < p < 1:
        raise ValueError("p must be strictly between 0 and 1")
    if len({L for L, _ in points}) < 2:
        raise ValueError("need at least two points with distinct L")
    return float(np.mean([g - slope * math.log(L) / math.log(1 / p) for L, g in points]))


def ewma_smooth(values: Sequence[float], window: int) -> List[float]:
    if window < 1:
        raise ValueError("window must be at least 1")
    alpha = 2.0 / (window + 1)
    out: List[float] = []
    s = 0.0
    for i, v in enumerate(values):
        s = float(v) if i == 0 else alpha * v + (1 - alpha) * s
        out.append(s)
    return out
