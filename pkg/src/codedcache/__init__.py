"""Coded caching for delay-sensitive content.

Request merging with the tau-fit threshold rule, a steady-state simulator,
and a TCP origin-server / edge-client prototype sending XOR-coded symbols.
"""

from .engine import EngineConfig, InsertOutcome, MergeQueue
from .model import (INFINITE, CacheSet, MergedRequest, Part, RawRequest, SymbolId, SystemConfig,
                    is_mergeable, lift_raw, merge, misfit)
from .placement import Catalog, CacheContents, VideoInfo, build_cache
from .simulator import (GainResult, SimConfig, asymptotic_gain, ewma_smooth,
                        expected_queue_length, fit_scaling_constant, run_steady_state)

__all__ = [
    "EngineConfig", "InsertOutcome", "MergeQueue",
    "INFINITE", "CacheSet", "MergedRequest", "Part", "RawRequest", "SymbolId", "SystemConfig",
    "is_mergeable", "lift_raw", "merge", "misfit",
    "Catalog", "CacheContents", "VideoInfo", "build_cache",
    "GainResult", "SimConfig", "asymptotic_gain", "ewma_smooth", "expected_queue_length",
    "fit_scaling_constant", "run_steady_state",
]

__version__ = "0.1.0"
