import queue
import socket

import pytest

from codedcache.content import ContentStore
from codedcache.model import CacheSet, SymbolId
from codedcache.placement import build_cache
from codedcache.protocol import (CatalogReq, CatalogResp, Coded, Error, Hello, Request,
                                 decode_message, read_message, send_message, xor_combine)
from codedcache.server import OriginServer, ServerState, SessionError

SYM = 16


class FakeConn:
    def __init__(self):
        self.frames = []
        self.closed = False

    def send(self, data):
        self.frames.append(data)

    def close(self):
        self.closed = True

    def messages(self):
        return [decode_message(f) for f in self.frames]


class Clock:
    def __init__(self, t=0):
        self.t = t

    def __call__(self):
        return self.t


@pytest.fixture
def store(tmp_path):
    # symbol i of video "v" is SYM bytes of value i; "w" ends in a short symbol
    (tmp_path / "v").write_bytes(b"".join(bytes([i]) * SYM for i in range(6)))
    (tmp_path / "w").write_bytes(b"\x77" * (SYM + 5))
    return ContentStore(tmp_path, SYM)


def make_state(store, K=3, tau="max", guard=20, **kw):
    return ServerState(store, K, 0.5, tau, guard, clock=Clock(), **kw)


def v(seq):
    return SymbolId("v", seq)


class TestContentStore:
    def test_catalog_and_padding(self, store):
        assert [x.video_id for x in store.catalog] == ["v", "w"]
        assert store.catalog.get("w").num_symbols == 2
        assert store.read(SymbolId("w", 1)) == b"\x77" * 5 + b"\0" * (SYM - 5)
        assert store.read(v(3)) == b"\x03" * SYM

    def test_unknown_symbol(self, store):
        with pytest.raises(KeyError):
            store.read(v(6))


class TestHello:
    def test_rebuilds_client_cache(self, store):
        s = make_state(store)
        session = s.handle_hello(FakeConn(), Hello.with_p(1, 42, 0.5))
        assert session.held == build_cache(42, store.catalog, 0.5).held

    def test_duplicate_id(self, store):
        s = make_state(store)
        s.handle_hello(FakeConn(), Hello.with_p(1, 0, 0.5))
        with pytest.raises(SessionError):
            s.handle_hello(FakeConn(), Hello.with_p(1, 1, 0.5))

    def test_id_beyond_k(self, store):
        with pytest.raises(SessionError):
            make_state(store).handle_hello(FakeConn(), Hello.with_p(4, 0, 0.5))

    def test_capacity(self, store):
        s = make_state(store, K=2)
        s.handle_hello(FakeConn(), Hello.with_p(1, 0, 0.5))
        s.handle_hello(FakeConn(), Hello.with_p(2, 0, 0.5))
        with pytest.raises(SessionError):
            s.handle_hello(FakeConn(), Hello.with_p(2, 0, 0.5))

    def test_probability_mismatch(self, store):
        with pytest.raises(SessionError):
            make_state(store).handle_hello(FakeConn(), Hello.with_p(1, 0, 0.25))

    def test_drop_frees_id_and_availability(self, store):
        s = make_state(store)
        s.register(2, FakeConn(), 0, {v(0)})
        assert s.availability(1, v(0)) == CacheSet.of(2)
        s.drop_session(2)
        assert s.availability(1, v(0)) == 0
        s.register(2, FakeConn(), 0, set())


class TestEnqueue:
    def test_availability_from_other_caches(self, store):
        s = make_state(store)
        s.clock.t = 100
        for k, held in ((1, set()), (2, {v(0)}), (3, {v(0)})):
            s.register(k, FakeConn(), 0, held)
        raw = s.enqueue_request(1, Request(v(0), 1))
        assert (raw.origin, raw.availability, raw.deadline) == (1, CacheSet.of(2, 3), 101)
        assert s.intake.qsize() == 1

    def test_unheld_symbol_has_empty_availability(self, store):
        s = make_state(store)
        s.register(1, FakeConn(), 0, set())
        s.register(2, FakeConn(), 0, {v(1)})
        assert s.enqueue_request(1, Request(v(0), 5)).availability == 0

    @pytest.mark.parametrize("cache_id, header", [(1, SymbolId("nope", 0)), (1, v(6)),
                                                  (2, v(0)), (1, v(1))])
    def test_rejected(self, store, cache_id, header):
        s = make_state(store)
        s.register(1, FakeConn(), 0, {v(1)})
        with pytest.raises(SessionError):
            s.enqueue_request(cache_id, Request(header, 1))

    def test_intake_is_bounded(self, store):
        s = make_state(store, intake_size=1)
        s.register(1, FakeConn(), 0, set())
        s.enqueue_request(1, Request(v(0), 1))
        with pytest.raises(queue.Full):
            s.enqueue_request(1, Request(v(1), 1), block=False)


def swap_pair_state(store, **kw):
    s = make_state(store, K=2, **kw)
    c1, c2 = FakeConn(), FakeConn()
    s.register(1, c1, 0, {v(4)})  # holds E, wants B
    s.register(2, c2, 0, {v(1)})  # holds B, wants E
    return s, c1, c2


class TestEncoderTransmitter:
    def test_coded_pair_sent_to_both(self, store):
        s, c1, c2 = swap_pair_state(store)
        s.enqueue_request(1, Request(v(1), 100))
        s.enqueue_request(2, Request(v(4), 100))
        assert s.encoder_step().appended
        assert s.encoder_step().merged_at == 0
        assert s.encoder_step() is None
        assert s.transmitter_step(now=0) == 0
        assert s.transmitter_step(now=80) == 1
        assert c1.frames == c2.frames and len(c1.frames) == 1
        msg = c1.messages()[0]
        assert msg.headers == (v(1), v(4))
        assert msg.payload == xor_combine([b"\x01" * SYM, b"\x04" * SYM])
        assert s.gain_trace == [2]

    def test_perfect_fit_merge_at_head(self, store):
        s, _, _ = swap_pair_state(store, tau=0)
        s.enqueue_request(1, Request(v(1), 10))
        s.enqueue_request(2, Request(v(4), 20))
        s.encoder_step()
        assert s.encoder_step().merged_at == 0

    def test_singleton_is_raw_symbol(self, store):
        s, c1, c2 = swap_pair_state(store)
        s.enqueue_request(1, Request(v(2), 5))
        s.encoder_step()
        assert s.transmitter_step(now=0) == 1
        assert c1.messages() == [Coded((v(2),), b"\x02" * SYM)] and c2.frames == []

    def test_nothing_due(self, store):
        s, _, _ = swap_pair_state(store)
        assert s.transmitter_step(now=10 ** 6) == 0
        assert s.next_wakeup() is None

    def test_wakeup_is_deadline_minus_guard(self, store):
        s, _, _ = swap_pair_state(store, guard=7)
        s.clock.t = 50
        s.enqueue_request(1, Request(v(2), 30))
        s.encoder_step()
        assert s.next_wakeup() == 73
        assert s.transmitter_step(now=72) == 0
        assert s.transmitter_step(now=73) == 1
        assert s.transmissions[0].time_ms <= s.transmissions[0].deadline

    def test_eager_flushes_idle_queue(self, store):
        s, c1, _ = swap_pair_state(store, eager=True)
        s.enqueue_request(1, Request(v(2), 10 ** 6))
        s.encoder_step()
        assert s.transmitter_step(now=0) == 1

    def test_disconnected_target_is_skipped(self, store):
        s, c1, c2 = swap_pair_state(store)
        s.enqueue_request(1, Request(v(1), 1))
        s.enqueue_request(2, Request(v(4), 1))
        s.encoder_step(), s.encoder_step()
        s.drop_session(2)
        assert s.transmitter_step(now=0) == 1
        assert len(c1.frames) == 1 and c2.frames == []

    def test_undecodable_entry_is_refused(self, store):
        s, _, _ = swap_pair_state(store)
        s.enqueue_request(1, Request(v(1), 1))
        s.enqueue_request(2, Request(v(4), 1))
        s.encoder_step(), s.encoder_step()
        s.sessions[1].held = frozenset()  # cache 1 now misses both constituents
        with pytest.raises(AssertionError):
            s.transmitter_step(now=0)

    def test_bandwidth_accounting(self, store):
        s = make_state(store, K=3)
        s.register(1, FakeConn(), 0, {v(4), v(5)})
        s.register(2, FakeConn(), 0, {v(1), v(5)})
        s.register(3, FakeConn(), 0, {v(1), v(4)})
        for k, seq in ((1, 1), (2, 4), (3, 5), (1, 0), (2, 0)):
            s.enqueue_request(k, Request(v(seq), 1))
            s.encoder_step()
        s.transmitter_step(now=0)
        assert s.gain_trace == [3, 1, 1]
        assert s.uncoded_bytes / s.coded_bytes == sum(s.gain_trace) / len(s.gain_trace)


class TestGainReport:
    def test_requires_transmissions(self, store):
        with pytest.raises(ValueError):
            make_state(store).gain_report()

    def test_all_uncoded(self, store):
        s = make_state(store)
        s.gain_trace = [1] * 50
        r = s.gain_report()
        assert r.smoothed == [1.0] * 50 and r.cumulative == 1.0

    def test_alternating(self, store):
        s = make_state(store)
        s.gain_trace = [1, 3] * 20
        assert s.gain_report().cumulative == 2.0

    def test_single_client_gain_is_one(self, store):
        s = make_state(store, K=4)
        s.register(1, FakeConn(), 0, set())
        for i in range(6):
            s.enqueue_request(1, Request(v(i), i))
            s.encoder_step()
        s.transmitter_step(now=10 ** 6)
        assert s.gain_trace == [1] * 6 and s.gain_report().cumulative == 1.0


class TestSocketSession:
    def test_hello_catalog_and_error_replies(self, store):
        state = ServerState(store, 2, 0.5, "max", 5)
        with OriginServer(state) as srv:
            with socket.create_connection(srv.address, timeout=5) as sock:
                send_message(sock, Hello.with_p(1, 9, 0.5))
                send_message(sock, CatalogReq())
                assert read_message(sock) == CatalogResp(store.catalog.videos)
                send_message(sock, Request(SymbolId("missing", 0), 5))
                assert isinstance(read_message(sock), Error)
                held = state.sessions[1].held
                want = next(x for x in store.catalog.symbols() if x not in held)
                send_message(sock, Request(want, 5))
                coded = read_message(sock)
                assert coded == Coded((want,), store.read(want))
            with socket.create_connection(srv.address, timeout=5) as sock:
                send_message(sock, Hello.with_p(3, 0, 0.5))
                assert isinstance(read_message(sock), Error)
                assert read_message(sock) is None

    def test_request_before_hello_closes(self, store):
        with OriginServer(ServerState(store, 2, 0.5)) as srv:
            with socket.create_connection(srv.address, timeout=5) as sock:
                send_message(sock, Request(v(0), 5))
                assert isinstance(read_message(sock), Error)
                assert read_message(sock) is None
