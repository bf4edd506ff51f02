"""Origin server: request intake, a single encoder, a deadline-driven transmitter.

Requests from every client go into a bounded FIFO. One encoder thread moves
them into the merge queue with the tau-fit rule; one transmitter thread pops
entries close to their deadline and sends the XOR of their symbols to every
target over that target's own TCP connection.
"""

from __future__ import annotations

import logging
import queue
import socket
import threading
import time
from dataclasses import dataclass
from typing import Callable, Dict, FrozenSet, List, Optional, Union

from .content import ContentStore
from .engine import DEFAULT_GUARD_MS, EngineConfig, InsertOutcome, MergeQueue
from .model import CacheSet, MergedRequest, RawRequest, SymbolId
from .placement import build_cache
from .protocol import (CatalogReq, CatalogResp, Coded, Error, Hello, ProtocolError, Request,
                       encode_message, read_message, xor_combine)
from .simulator import ewma_smooth

log = logging.getLogger(__name__)

DEFAULT_INTAKE_SIZE = 4096


class SessionError(ProtocolError):
    pass


class SocketConnection:
    """Thread-safe frame sender over a connected socket."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self._lock = threading.Lock()
        self.closed = False

    def send(self, data: bytes) -> None:
        with self._lock:
            self.sock.sendall(data)

    def close(self) -> None:
        self.closed = True
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


@dataclass
class ClientSession:
    cache_id: int
    conn: object  # anything with send(bytes) and close()
    seed: int
    held: FrozenSet[SymbolId]


@dataclass
class Transmission:
    time_ms: int
    deadline: int
    headers: tuple
    targets: CacheSet


@dataclass
class GainReport:
    smoothed: List[float]
    cumulative: float
    transmissions: int
    served: int


def _monotonic_ms() -> Callable[[], int]:
    t0 = time.monotonic()
    return lambda: int((time.monotonic() - t0) * 1000)


class ServerState:
    def __init__(self, store: ContentStore, num_caches: int, p: float,
                 tau: Union[int, str] = "max", guard_ms: int = DEFAULT_GUARD_MS,
                 intake_size: int = DEFAULT_INTAKE_SIZE,
                 clock: Optional[Callable[[], int]] = None, eager: bool = False):
        self.store = store
        self.engine = EngineConfig(num_caches, tau)
        self.num_caches = num_caches
        self.p = p
        self.guard_ms = guard_ms
        self.eager = eager
        self.clock = clock or _monotonic_ms()
        self.sessions: Dict[int, ClientSession] = {}
        self.intake: "queue.Queue[RawRequest]" = queue.Queue(maxsize=intake_size)
        self.coded_queue = MergeQueue(num_caches, index=self.engine.resolved_tau == 0)
        self.cond = threading.Condition()
        self.gain_trace: List[int] = []
        self.transmissions: List[Transmission] = []
        self.uncoded_bytes = 0
        self.coded_bytes = 0
        self.inserted = 0
        self._holders: Dict[SymbolId, int] = {}
        self._sessions_lock = threading.Lock()

    @property
    def catalog(self):
        return self.store.catalog

    # -- sessions ---------------------------------------------------------

    def handle_hello(self, conn, hello: Hello) -> ClientSession:
        if hello.p_bits != Hello.with_p(0, 0, self.p).p_bits:
            raise SessionError(f"cache probability {hello.p} differs from server's {self.p}")
        held = build_cache(hello.seed, self.catalog, hello.p).held
        return self.register(hello.cache_id, conn, hello.seed, held)

    def register(self, k: int, conn, seed: int, held: FrozenSet[SymbolId]) -> ClientSession:
        """Attach cache ``k`` holding ``held``; rejects ids already in use or out of range."""
        with self._sessions_lock:
            if len(self.sessions) >= self.num_caches:
                raise SessionError(f"server already has {self.num_caches} caches")
            if not 1 <= k <= self.num_caches:
                raise SessionError(f"cache id {k} outside 1..{self.num_caches}")
            if k in self.sessions:
                raise SessionError(f"cache id {k} already connected")
            session = ClientSession(k, conn, seed, frozenset(held))
            self.sessions[k] = session
            kbit = 1 << (k - 1)
            for s in session.held:
                self._holders[s] = self._holders.get(s, 0) | kbit
        log.info("cache %d connected (seed %d, %d symbols held)", k, seed, len(session.held))
        return session

    def drop_session(self, cache_id: int) -> None:
        with self._sessions_lock:
            session = self.sessions.pop(cache_id, None)
            if session is None:
                return
            clear = ~(1 << (cache_id - 1))
            for s in session.held:
                self._holders[s] &= clear
        log.info("cache %d disconnected", cache_id)

    def catalog_response(self) -> CatalogResp:
        return CatalogResp(self.catalog.videos)

    def availability(self, cache_id: int, s: SymbolId) -> CacheSet:
        return CacheSet(self._holders.get(s, 0) & ~(1 << (cache_id - 1)))

    # -- pipeline stages --------------------------------------------------

    def enqueue_request(self, cache_id: int, req: Request, block: bool = True) -> RawRequest:
        session = self.sessions.get(cache_id)
        if session is None:
            raise SessionError(f"no session for cache {cache_id}")
        s = SymbolId(*req.header)
        if not self.catalog.has_symbol(s):
            raise SessionError(f"unknown symbol {s.video_id!r}#{s.seq}")
        if s in session.held:
            raise SessionError(f"cache {cache_id} requested symbol {s} it already holds")
        raw = RawRequest(cache_id, self.availability(cache_id, s), self.clock() + req.ttl_ms, s)
        self.intake.put(raw, block=block)
        return raw

    def encoder_step(self, timeout: Optional[float] = None) -> Optional[InsertOutcome]:
        """Move one request from intake into the merge queue.

        Returns ``None`` if ``timeout`` expires with the intake empty.
        """
        try:
            raw = self.intake.get(timeout=timeout) if timeout is not None \
                else self.intake.get_nowait()
        except queue.Empty:
            return None
        with self.cond:
            outcome = self.coded_queue.insert(raw, self.engine)
            self.inserted += 1
            self.cond.notify_all()
        return outcome

    def _pop_ready(self, now: int) -> List[MergedRequest]:
        with self.cond:
            due = self.coded_queue.pop_due(now, self.guard_ms)
            if self.eager and not due and self.intake.empty() and len(self.coded_queue):
                due = [self.coded_queue.pop_head()]
            return due

    def check_decodable(self, entry: MergedRequest) -> None:
        headers = [part.symbol for part in entry.parts]
        for part in entry.parts:
            session = self.sessions.get(part.target)
            if session is None:
                continue
            missing = [h for h in headers if h not in session.held]
            if missing != [part.symbol]:
                raise AssertionError(
                    f"coded symbol {headers} not decodable at cache {part.target}: missing {missing}")

    def transmit(self, entry: MergedRequest, now: int) -> None:
        self.check_decodable(entry)
        headers = tuple(part.symbol for part in entry.parts)
        payload = xor_combine([self.store.read(h) for h in headers])
        frame = encode_message(Coded(headers, payload))
        for part in entry.parts:
            session = self.sessions.get(part.target)
            if session is None:
                log.warning("dropping %s for disconnected cache %d", part.symbol, part.target)
                continue
            try:
                session.conn.send(frame)
            except OSError as exc:
                log.warning("send to cache %d failed: %s", part.target, exc)
        m = len(headers)
        self.gain_trace.append(m)
        self.transmissions.append(Transmission(now, entry.deadline, headers, entry.targets))
        self.uncoded_bytes += m * len(payload)
        self.coded_bytes += len(payload)
        log.info("tx t=%d m=%d deadline=%d headers=%s", now, m, entry.deadline,
                 " ".join(f"{h.video_id}#{h.seq}" for h in headers))

    def transmitter_step(self, now: Optional[int] = None) -> int:
        now = self.clock() if now is None else now
        due = self._pop_ready(now)
        for entry in due:
            self.transmit(entry, now)
        return len(due)

    def next_wakeup(self) -> Optional[int]:
        """Time at which the head entry becomes due, or None when idle."""
        d = self.coded_queue.peek_deadline()
        return None if d is None else d - self.guard_ms

    def gain_report(self, window: int = 40) -> GainReport:
        if not self.gain_trace:
            raise ValueError("no transmissions yet")
        served = sum(self.gain_trace)
        return GainReport(ewma_smooth(self.gain_trace, window), served / len(self.gain_trace),
                          len(self.gain_trace), served)


class OriginServer:
    """Threaded TCP front end around :class:`ServerState`."""

    def __init__(self, state: ServerState, host: str = "127.0.0.1", port: int = 0):
        self.state = state
        self._listener = socket.create_server((host, port))
        self.address = self._listener.getsockname()[:2]
        self._stop = threading.Event()
        self._threads: List[threading.Thread] = []
        self._conns: List[SocketConnection] = []

    @property
    def port(self) -> int:
        return self.address[1]

    def start(self) -> "OriginServer":
        for target, name in ((self._accept_loop, "accept"), (self._encoder_loop, "encoder"),
                             (self._transmitter_loop, "transmitter")):
            t = threading.Thread(target=target, name=name, daemon=True)
            t.start()
            self._threads.append(t)
        return self

    def stop(self) -> None:
        self._stop.set()
        with self.state.cond:
            self.state.cond.notify_all()
        try:
            self._listener.close()
        except OSError:
            pass
        for c in list(self._conns):
            c.close()
        for t in self._threads:
            t.join(timeout=2)

    def serve_forever(self) -> None:
        self.start()
        try:
            while not self._stop.is_set():
                self._stop.wait(0.5)
        except KeyboardInterrupt:
            pass
        finally:
            self.stop()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    def _accept_loop(self):
        self._listener.settimeout(0.2)
        while not self._stop.is_set():
            try:
                sock, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            conn = SocketConnection(sock)
            self._conns.append(conn)
            threading.Thread(target=self._handle_client, args=(conn,), daemon=True,
                             name="request-handler").start()

    def _handle_client(self, conn: SocketConnection):
        state = self.state
        session: Optional[ClientSession] = None
        try:
            while not self._stop.is_set():
                msg = read_message(conn.sock)
                if msg is None:
                    break
                if isinstance(msg, Hello):
                    if session is not None:
                        raise SessionError("duplicate HELLO on one connection")
                    session = state.handle_hello(conn, msg)
                elif isinstance(msg, CatalogReq):
                    conn.send(encode_message(state.catalog_response()))
                elif isinstance(msg, Request):
                    if session is None:
                        raise SessionError("REQUEST before HELLO")
                    try:
                        state.enqueue_request(session.cache_id, msg)
                    except SessionError as exc:
                        conn.send(encode_message(Error(str(exc))))
                else:
                    raise SessionError(f"unexpected {type(msg).__name__} from client")
        except SessionError as exc:
            log.warning("closing connection: %s", exc)
            try:
                conn.send(encode_message(Error(str(exc))))
            except OSError:
                pass
        except (OSError, ProtocolError) as exc:
            if not self._stop.is_set():
                log.warning("connection error: %s", exc)
        finally:
            if session is not None:
                state.drop_session(session.cache_id)
            conn.close()
            if conn in self._conns:
                self._conns.remove(conn)

    def _encoder_loop(self):
        while not self._stop.is_set():
            self.state.encoder_step(timeout=0.2)

    def _transmitter_loop(self):
        state = self.state
        while not self._stop.is_set():
            with state.cond:
                wake = state.next_wakeup()
                now = state.clock()
                if wake is None:
                    state.cond.wait(timeout=0.2)
                    continue
                if wake > now and not (state.eager and state.intake.empty()):
                    state.cond.wait(timeout=(wake - now) / 1000)
                    continue
            state.transmitter_step()
