"""Experiment presets that write CSV tables of coding gain."""

from __future__ import annotations

import csv
import io
import math
import os
import random
import tempfile
import threading
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .simulator import (GainResult, SimConfig, asymptotic_gain, ewma_smooth,
                        fit_scaling_constant, run_steady_state, scaling_law)

PRESETS = ("fig2", "fig3", "asymptote", "trace")

FIG2_K = 10
FIG2_P = 0.5
FIG2_LS = (100, 200, 500, 1000, 2000, 5000, 10000, 20000, 50000)
FIG3_PS = (0.25, 0.5, 0.75)
FIG3_LS = (10, 20, 50, 100, 200, 400, 700, 1000)
FIG3_FIT_MIN_L = 100
# published intercepts for the fig3 preset, for the reference_model_gain column
FIG3_REFERENCE_C = {0.25: 0.55, 0.5: 0.35, 0.75: -1.25}
ASYMPTOTE_KS = (4, 6, 8, 10)
ASYMPTOTE_PS = (0.25, 0.5, 0.75)


def fig2_taus(K: int = FIG2_K) -> List[int]:
    return sorted({0, 2, 4, K - 2} & set(range(K - 1)))


@dataclass
class ExperimentPreset:
    name: str
    grid: Dict[str, Sequence] = field(default_factory=dict)
    seeds: Sequence[int] = tuple(range(10))
    output: Optional[str] = None
    warmup: Optional[int] = None
    measured: Optional[int] = None
    count_mode: str = "raw"
    jobs: int = 1

    def __post_init__(self):
        if self.name not in PRESETS:
            raise ValueError(f"unknown preset {self.name!r}; choose from {', '.join(PRESETS)}")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        for key, values in self.grid.items():
            if not values:
                raise ValueError(f"grid axis {key!r} is empty")


# -- running simulations ---------------------------------------------------------

def _run(cfg: SimConfig) -> GainResult:
    return run_steady_state(cfg)


def run_many(cfgs: Sequence[SimConfig], jobs: int = 1) -> List[GainResult]:
    """Run configurations, concurrently when ``jobs > 1``; results keep input order."""
    if jobs <= 1 or len(cfgs) <= 1:
        return [run_steady_state(c) for c in cfgs]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run, cfgs, chunksize=1))


def seed_mean(results: Sequence[GainResult]) -> tuple:
    gains = [r.gain for r in results]
    if len(gains) > 1:
        return float(np.mean(gains)), float(np.std(gains, ddof=1) / math.sqrt(len(gains)))
    return gains[0], results[0].stderr


def fig2_rows(preset: ExperimentPreset) -> List[dict]:
    K = int(preset.grid.get("K", [FIG2_K])[0])
    p = float(preset.grid.get("p", [FIG2_P])[0])
    taus = [int(t) for t in preset.grid.get("tau", fig2_taus(K))]
    Ls = [int(L) for L in preset.grid.get("L", FIG2_LS)]
    points = [(t, L) for t in taus for L in Ls]
    cfgs = [SimConfig(K, p, t, L, preset.warmup, preset.measured, s, preset.count_mode)
            for t, L in points for s in preset.seeds]
    results = run_many(cfgs, preset.jobs)
    n = len(preset.seeds)
    rows = []
    for i, (t, L) in enumerate(points):
        gain, err = seed_mean(results[i * n:(i + 1) * n])
        rows.append({"tau": t, "L": L, "K": K, "p": p, "gain": round(gain, 6),
                     "stderr": round(err, 6), "seeds": n})
    return rows


def fig3_rows(preset: ExperimentPreset) -> List[dict]:
    ps = [float(p) for p in preset.grid.get("p", FIG3_PS)]
    Ls = [int(L) for L in preset.grid.get("L", FIG3_LS)]
    fit_min = int(preset.grid.get("fit_min_L", [FIG3_FIT_MIN_L])[0])
    cfgs = [SimConfig(L, p, "max", L, preset.warmup, preset.measured, s, preset.count_mode)
            for p in ps for L in Ls for s in preset.seeds]
    results = run_many(cfgs, preset.jobs)
    n = len(preset.seeds)
    rows = []
    i = 0
    for p in ps:
        block = []
        for L in Ls:
            gain, err = seed_mean(results[i * n:(i + 1) * n])
            block.append((L, gain, err))
            i += 1
        fit_pts = [(L, g) for L, g, _ in block if L >= fit_min]
        if len({L for L, _ in fit_pts}) < 2:
            fit_pts = [(L, g) for L, g, _ in block]
        c = fit_scaling_constant(fit_pts, p)
        for L, g, err in block:
            rows.append({"p": p, "L": L, "K": L, "gain": round(g, 6), "stderr": round(err, 6),
                         "fitted_c": round(c, 6),
                         "model_gain": round(scaling_law(L, p, c), 6),
                         "reference_model_gain": round(scaling_law(L, p, FIG3_REFERENCE_C[p]), 6)
                         if p in FIG3_REFERENCE_C else "",
                         "seeds": n})
    return rows


def asymptote_rows(preset: ExperimentPreset) -> List[dict]:
    Ks = [int(k) for k in preset.grid.get("K", ASYMPTOTE_KS)]
    ps = [float(p) for p in preset.grid.get("p", ASYMPTOTE_PS)]
    L_given = preset.grid.get("L")
    points = []
    for K in Ks:
        for p in ps:
            L = int(L_given[0]) if L_given else min(50_000, 4 * K * 2 ** K)
            points.append((K, p, L))
    cfgs = [SimConfig(K, p, 0, L, preset.warmup, preset.measured, s, preset.count_mode)
            for K, p, L in points for s in preset.seeds]
    results = run_many(cfgs, preset.jobs)
    n = len(preset.seeds)
    rows = []
    for i, (K, p, L) in enumerate(points):
        gain, err = seed_mean(results[i * n:(i + 1) * n])
        limit = asymptotic_gain(K, p)
        rows.append({"K": K, "p": p, "asymptotic_gain": round(limit, 6), "L": L,
                     "simulated_gain": round(gain, 6), "stderr": round(err, 6),
                     "ratio": round(gain / limit, 6), "seeds": n})
    return rows


# -- prototype trace --------------------------------------------------------------

@dataclass
class TraceConfig:
    clients: int = 4
    p: float = 0.5
    tau: object = "max"
    file_bytes: int = 10 * 1024 * 1024
    symbol_size: int = 10240
    depth: int = 50
    ttl_ms: int = 20
    guard_ms: int = 5
    stagger_s: float = 0.0
    window: int = 40
    seed: int = 0


@dataclass
class TraceResult:
    rows: List[dict]
    outputs_match: Dict[int, bool]
    cumulative_gain: float
    steady_gain: float
    elapsed_s: float
    requests_sent: Dict[int, int]
    max_outstanding: Dict[int, int]
    uncoded_bytes: int
    coded_bytes: int


def steady_state(values: Sequence[float], lo: float = 0.25, hi: float = 0.75) -> float:
    """Mean over the central part of a series (all clients active)."""
    a, b = int(len(values) * lo), max(int(len(values) * hi), int(len(values) * lo) + 1)
    return float(np.mean(values[a:b]))


def write_synthetic_videos(root: Path, count: int, size: int, seed: int = 0) -> List[str]:
    names = []
    for i in range(1, count + 1):
        name = f"video{i}.flv"
        rng = random.Random(seed * 1000 + i)
        (root / name).write_bytes(rng.randbytes(size))
        names.append(name)
    return names


def run_trace(tc: TraceConfig, db: Optional[str] = None) -> TraceResult:
    """Local server plus ``tc.clients`` streaming clients; records the gain trace."""
    from .client import ClientConfig, EdgeClient
    from .content import ContentStore
    from .server import OriginServer, ServerState

    with tempfile.TemporaryDirectory() as tmp:
        root = Path(db) if db else Path(tmp)
        if db:
            names = sorted(p.name for p in root.iterdir() if p.is_file())[: tc.clients]
        else:
            names = write_synthetic_videos(root, tc.clients, tc.file_bytes, tc.seed)
        store = ContentStore(root, tc.symbol_size)
        state = ServerState(store, tc.clients, tc.p, tc.tau, guard_ms=tc.guard_ms)
        outputs: Dict[int, io.BytesIO] = {}
        clients: Dict[int, EdgeClient] = {}
        errors: List[BaseException] = []
        start_times: Dict[int, int] = {}
        end_times: Dict[int, int] = {}

        def stream(k: int, name: str):
            cfg = ClientConfig(("127.0.0.1", server.port), k, tc.seed * 7919 + k, tc.p, name,
                               str(root), tc.symbol_size, tc.depth, tc.ttl_ms)
            outputs[k] = io.BytesIO()
            clients[k] = EdgeClient(cfg, outputs[k])
            start_times[k] = state.clock()
            try:
                clients[k].run()
            except BaseException as exc:  # reported after join
                errors.append(exc)
            end_times[k] = state.clock()

        t0 = time.monotonic()
        with OriginServer(state) as server:
            threads = []
            for k, name in enumerate(names, start=1):
                th = threading.Thread(target=stream, args=(k, name), daemon=True)
                th.start()
                threads.append(th)
                if tc.stagger_s and k < len(names):
                    time.sleep(tc.stagger_s)
            for th in threads:
                th.join()
        elapsed = time.monotonic() - t0
        if errors:
            raise errors[0]

        smoothed = ewma_smooth(state.gain_trace, tc.window)
        rows = []
        served = 0
        for i, (tx, s) in enumerate(zip(state.transmissions, smoothed)):
            served += len(tx.headers)
            n_active = sum(1 for k in start_times
                           if start_times[k] <= tx.time_ms <= end_times.get(k, tx.time_ms))
            rows.append({"index": i, "time_ms": tx.time_ms, "parts": len(tx.headers),
                         "smoothed_gain": round(s, 6), "cumulative_gain": round(served / (i + 1), 6),
                         "active_clients": n_active})
        matches = {k: outputs[k].getvalue() == (root / names[k - 1]).read_bytes()
                   for k in outputs}
        # every symbol may come from the local cache (p = 1): no gain is defined then
        cumulative = state.gain_report(tc.window).cumulative if state.gain_trace else math.nan
        steady = steady_state(smoothed) if smoothed else math.nan
        return TraceResult(rows, matches, cumulative, steady, elapsed,
                           {k: c.requests_sent for k, c in clients.items()},
                           {k: c.max_outstanding for k, c in clients.items()},
                           state.uncoded_bytes, state.coded_bytes)


# -- CSV ------------------------------------------------------------------------------

def emit_csv(rows: Sequence[dict], path) -> Path:
    if not rows:
        raise ValueError("refusing to write an empty table")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0].keys()), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return path


def run_preset(preset: ExperimentPreset, trace: Optional[TraceConfig] = None) -> Path:
    if preset.name == "fig2":
        rows = fig2_rows(preset)
    elif preset.name == "fig3":
        rows = fig3_rows(preset)
    elif preset.name == "asymptote":
        rows = asymptote_rows(preset)
    else:
        rows = run_trace(trace or TraceConfig()).rows
    return emit_csv(rows, preset.output or f"{preset.name}.csv")


def default_jobs() -> int:
    return os.cpu_count() or 1
