"""Edge cache client: requests missing symbols, decodes, reorders, emits bytes."""

from __future__ import annotations

import logging
import socket
import sys
import threading
import time
from dataclasses import dataclass
from typing import BinaryIO, Dict, List, Optional, Tuple

from .content import ContentStore
from .model import DEFAULT_SYMBOL_SIZE, SymbolId
from .placement import CacheContents, Catalog, VideoInfo, build_cache
from .protocol import (CatalogReq, CatalogResp, Coded, DecodeError, Error, FrameDecoder, Hello,
                       Request, decode_coded, encode_message)

log = logging.getLogger(__name__)

DEFAULT_DEPTH = 50
DEFAULT_BITRATE = 700_000


class ClientError(RuntimeError):
    pass


@dataclass
class ClientConfig:
    server: Tuple[str, int]
    cache_id: int
    seed: int
    p: float
    video_id: str
    db: str
    symbol_size: int = DEFAULT_SYMBOL_SIZE
    pipeline_depth: int = DEFAULT_DEPTH
    ttl_ms: Optional[int] = None
    bitrate_bps: float = DEFAULT_BITRATE
    slack_ms: int = 10_000
    out: str = "-"

    def __post_init__(self):
        if self.pipeline_depth < 1:
            raise ValueError("pipeline_depth must be at least 1")

    @property
    def symbol_ttl_ms(self) -> int:
        """Deadline step per pipeline position: playback time of one symbol."""
        if self.ttl_ms is not None:
            return self.ttl_ms
        return max(1, round(8 * self.symbol_size / self.bitrate_bps * 1000))


class ReorderBuffer:
    def __init__(self, num_symbols: int, file_length: int, symbol_size: int,
                 prefill: Optional[Dict[int, bytes]] = None):
        self.num_symbols = num_symbols
        self.file_length = file_length
        self.symbol_size = symbol_size
        self.next_seq = 0
        self.pending: Dict[int, bytes] = dict(prefill or {})
        self.emitted_bytes = 0

    @property
    def done(self) -> bool:
        return self.next_seq >= self.num_symbols

    def push(self, seq: int, payload: bytes) -> List[bytes]:
        if seq >= self.next_seq:
            self.pending[seq] = payload
        return self.drain()

    def drain(self) -> List[bytes]:
        out = []
        while self.next_seq in self.pending:
            block = self.pending.pop(self.next_seq)
            if self.next_seq == self.num_symbols - 1:
                block = block[: self.file_length - self.next_seq * self.symbol_size]
            out.append(block)
            self.emitted_bytes += len(block)
            self.next_seq += 1
        return out


def plan_requests(cfg: ClientConfig, entry: VideoInfo, held) -> List[Tuple[SymbolId, int]]:
    """Missing symbols in order; the i-th gets ttl ``min(i+1, depth) * step``."""
    step = cfg.symbol_ttl_ms
    plan = []
    for seq in range(entry.num_symbols):
        s = SymbolId(entry.video_id, seq)
        if s in held:
            continue
        plan.append((s, min(len(plan) + 1, cfg.pipeline_depth) * step))
    return plan


def on_coded(cfg: ClientConfig, cache: CacheContents, buf: ReorderBuffer, c: Coded,
             requested) -> List[bytes]:
    """Decode ``c`` if it carries one of our outstanding symbols; emit what is in order."""
    missing = [h for h in c.headers if h not in cache.held]
    ours = [h for h in missing if h in requested]
    if not ours:
        return []  # overheard or duplicate
    if len(missing) != 1:
        raise DecodeError(f"coded symbol for {ours[0]} has {len(missing)} unknown constituents")
    sym, payload = decode_coded(c, cache)
    if sym.video_id != cfg.video_id:
        raise DecodeError(f"decoded {sym} does not belong to {cfg.video_id}")
    return buf.push(sym.seq, payload)


class EdgeClient:
    def __init__(self, cfg: ClientConfig, sink: BinaryIO):
        self.cfg = cfg
        self.sink = sink
        self.requests_sent = 0
        self.decoded = 0
        self.max_outstanding = 0
        self.catalog: Optional[Catalog] = None
        self._outstanding: Dict[SymbolId, float] = {}
        self._cond = threading.Condition()
        self._stop = threading.Event()
        self._sock: Optional[socket.socket] = None
        self._decoder = FrameDecoder()
        self._inbox: List = []

    def _send(self, msg) -> None:
        self._sock.sendall(encode_message(msg))

    def _recv(self, timeout: Optional[float]):
        self._sock.settimeout(timeout)
        while not self._inbox:
            data = self._sock.recv(1 << 16)
            if not data:
                raise ClientError("server closed the connection")
            self._inbox.extend(self._decoder.feed(data))
        return self._inbox.pop(0)

    def _handshake(self) -> Tuple[VideoInfo, CacheContents]:
        cfg = self.cfg
        self._send(Hello.with_p(cfg.cache_id, cfg.seed, cfg.p))
        self._send(CatalogReq())
        msg = self._recv(timeout=30)
        if isinstance(msg, Error):
            raise ClientError(f"server refused: {msg.reason}")
        if not isinstance(msg, CatalogResp):
            raise ClientError(f"expected catalog, got {type(msg).__name__}")
        self.catalog = Catalog(msg.entries)
        entry = self.catalog.get(cfg.video_id)
        store = ContentStore(cfg.db, cfg.symbol_size)
        if store.catalog != self.catalog:
            raise ClientError("local content database does not match the server catalog")
        cache = store.fill(build_cache(cfg.seed, self.catalog, cfg.p))
        return entry, cache

    def _sender(self, plan):
        try:
            for sym, ttl in plan:
                with self._cond:
                    while len(self._outstanding) >= self.cfg.pipeline_depth:
                        if self._stop.is_set():
                            return
                        self._cond.wait(0.2)
                    if self._stop.is_set():
                        return
                    self._outstanding[sym] = time.monotonic() + ttl / 1000
                    self.max_outstanding = max(self.max_outstanding, len(self._outstanding))
                self._send(Request(sym, ttl))
                self.requests_sent += 1
        except OSError as exc:
            if not self._stop.is_set():
                log.warning("request sender stopped: %s", exc)

    def run(self) -> int:
        cfg = self.cfg
        self._sock = socket.create_connection(cfg.server)
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        try:
            entry, cache = self._handshake()
            prefill = {s.seq: cache.payloads[s] for s in cache.held if s.video_id == entry.video_id}
            buf = ReorderBuffer(entry.num_symbols, entry.file_length, cfg.symbol_size, prefill)
            self._write(buf.drain())
            plan = plan_requests(cfg, entry, cache.held)
            sender = threading.Thread(target=self._sender, args=(plan,), daemon=True)
            sender.start()
            while not buf.done:
                try:
                    msg = self._recv(timeout=0.25)
                except socket.timeout:
                    self._check_deadlines()
                    continue
                if isinstance(msg, Error):
                    raise ClientError(f"server error: {msg.reason}")
                if not isinstance(msg, Coded):
                    raise ClientError(f"unexpected {type(msg).__name__} from server")
                with self._cond:
                    out = on_coded(cfg, cache, buf, msg, self._outstanding)
                    for h in msg.headers:
                        if self._outstanding.pop(h, None) is not None:
                            self.decoded += 1
                    self._cond.notify_all()
                self._write(out)
            self.sink.flush()
            return 0
        finally:
            self._stop.set()
            with self._cond:
                self._cond.notify_all()
            self._sock.close()

    def _check_deadlines(self):
        limit = time.monotonic() - self.cfg.slack_ms / 1000
        with self._cond:
            late = [s for s, d in self._outstanding.items() if d < limit]
        if late:
            raise ClientError(f"{len(late)} symbols overdue, e.g. {late[0]}")

    def _write(self, blocks: List[bytes]):
        for b in blocks:
            self.sink.write(b)


def stream_video(cfg: ClientConfig) -> int:
    if cfg.out == "-":
        return EdgeClient(cfg, sys.stdout.buffer).run()
    with open(cfg.out, "wb") as f:
        return EdgeClient(cfg, f).run()
