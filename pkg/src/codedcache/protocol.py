"""Binary wire format and XOR symbol coding.

Every message is framed as::

    u32 length | u8 tag | body

where ``length`` counts the tag byte plus the body. Integers are big-endian;
text is ``u16 length + UTF-8``. Bodies by tag:

    1 HELLO        u32 cache_id, u64 seed, u64 p_bits (binary64 pattern of p)
    2 CATALOG_REQ  (empty)
    3 CATALOG_RESP u16 count, count x (text video_id, u32 num_symbols, u64 file_length)
    4 REQUEST      header, u32 ttl_ms
    5 CODED        u16 m, m x header, payload (rest of frame)
    6 ERROR        text reason

A header is ``text video_id, u32 seq`` with a non-empty id of at most 255
encoded bytes.
"""

from __future__ import annotations

import socket
import struct
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

from .model import SymbolId
from .placement import CacheContents, VideoInfo

MAX_VIDEO_ID_BYTES = 255
MAX_FRAME = 1 << 26

HELLO, CATALOG_REQ, CATALOG_RESP, REQUEST, CODED, ERROR = range(1, 7)

_U16 = struct.Struct(">H")
_U32 = struct.Struct(">I")
_HELLO = struct.Struct(">IQQ")
_ENTRY_TAIL = struct.Struct(">IQ")


class ProtocolError(ValueError):
    pass


class DecodeError(ValueError):
    """Raised when a coded symbol cannot be decoded against a cache."""


def p_to_bits(p: float) -> int:
    return struct.unpack(">Q", struct.pack(">d", p))[0]


def bits_to_p(bits: int) -> float:
    return struct.unpack(">d", struct.pack(">Q", bits))[0]


@dataclass(frozen=True)
class Hello:
    cache_id: int
    seed: int
    p_bits: int

    @classmethod
    def with_p(cls, cache_id: int, seed: int, p: float) -> "Hello":
        return cls(cache_id, seed, p_to_bits(p))

    @property
    def p(self) -> float:
        return bits_to_p(self.p_bits)


@dataclass(frozen=True)
class CatalogReq:
    pass


@dataclass(frozen=True)
class CatalogResp:
    entries: Tuple[VideoInfo, ...]


@dataclass(frozen=True)
class Request:
    header: SymbolId
    ttl_ms: int


@dataclass(frozen=True)
class Coded:
    headers: Tuple[SymbolId, ...]
    payload: bytes

    @property
    def m(self) -> int:
        return len(self.headers)


@dataclass(frozen=True)
class Error:
    reason: str


Message = Union[Hello, CatalogReq, CatalogResp, Request, Coded, Error]


# -- encoding -----------------------------------------------------------------

def _text(s: str, limit: Optional[int] = None) -> bytes:
    raw = s.encode("utf-8")
    if limit is not None and not 1 <= len(raw) <= limit:
        raise ProtocolError(f"video id must be 1..{limit} bytes, got {len(raw)}")
    if len(raw) > 0xFFFF:
        raise ProtocolError("text too long")
    return _U16.pack(len(raw)) + raw


def _header(h: SymbolId) -> bytes:
    return _text(h.video_id, MAX_VIDEO_ID_BYTES) + _U32.pack(h.seq)


def _body(m: Message) -> Tuple[int, bytes]:
    if isinstance(m, Hello):
        return HELLO, _HELLO.pack(m.cache_id, m.seed, m.p_bits)
    if isinstance(m, CatalogReq):
        return CATALOG_REQ, b""
    if isinstance(m, CatalogResp):
        if len(m.entries) > 0xFFFF:
            raise ProtocolError("too many catalog entries")
        parts = [_U16.pack(len(m.entries))]
        for e in m.entries:
            parts.append(_text(e.video_id, MAX_VIDEO_ID_BYTES))
            parts.append(_ENTRY_TAIL.pack(e.num_symbols, e.file_length))
        return CATALOG_RESP, b"".join(parts)
    if isinstance(m, Request):
        return REQUEST, _header(m.header) + _U32.pack(m.ttl_ms)
    if isinstance(m, Coded):
        if not 1 <= len(m.headers) <= 0xFFFF:
            raise ProtocolError("coded symbol needs 1..65535 headers")
        return CODED, b"".join([_U16.pack(len(m.headers)), *map(_header, m.headers), m.payload])
    if isinstance(m, Error):
        return ERROR, _text(m.reason)
    raise TypeError(f"not a protocol message: {m!r}")


def encode_message(m: Message) -> bytes:
    try:
        tag, body = _body(m)
    except struct.error as exc:
        raise ProtocolError(str(exc)) from None
    return _U32.pack(len(body) + 1) + bytes([tag]) + body


# -- decoding -----------------------------------------------------------------

class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ProtocolError("truncated message body")
        out = bytes(self.buf[self.pos: self.pos + n])
        self.pos += n
        return out

    def unpack(self, st: struct.Struct):
        return st.unpack(self.take(st.size))

    def text(self, limit: Optional[int] = None) -> str:
        (n,) = self.unpack(_U16)
        if limit is not None and not 1 <= n <= limit:
            raise ProtocolError(f"video id must be 1..{limit} bytes, got {n}")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise ProtocolError("invalid UTF-8 in text field") from None

    def header(self) -> SymbolId:
        vid = self.text(MAX_VIDEO_ID_BYTES)
        (seq,) = self.unpack(_U32)
        return SymbolId(vid, seq)

    def rest(self) -> bytes:
        out = bytes(self.buf[self.pos:])
        self.pos = len(self.buf)
        return out

    def done(self):
        if self.pos != len(self.buf):
            raise ProtocolError(f"{len(self.buf) - self.pos} trailing bytes in message")


def decode_body(tag: int, body: bytes) -> Message:
    r = _Reader(body)
    if tag == HELLO:
        msg = Hello(*r.unpack(_HELLO))
    elif tag == CATALOG_REQ:
        msg = CatalogReq()
    elif tag == CATALOG_RESP:
        (count,) = r.unpack(_U16)
        entries = []
        for _ in range(count):
            vid = r.text(MAX_VIDEO_ID_BYTES)
            n, length = r.unpack(_ENTRY_TAIL)
            entries.append(VideoInfo(vid, n, length))
        msg = CatalogResp(tuple(entries))
    elif tag == REQUEST:
        h = r.header()
        (ttl,) = r.unpack(_U32)
        msg = Request(h, ttl)
    elif tag == CODED:
        (m,) = r.unpack(_U16)
        if m == 0:
            raise ProtocolError("coded symbol with zero headers")
        headers = tuple(r.header() for _ in range(m))
        msg = Coded(headers, r.rest())
    elif tag == ERROR:
        msg = Error(r.text())
    else:
        raise ProtocolError(f"unknown message tag {tag}")
    r.done()
    return msg


def decode_message(frame: bytes) -> Message:
    """Decode exactly one complete frame (length prefix included)."""
    if len(frame) < 5:
        raise ProtocolError("truncated frame")
    (length,) = _U32.unpack_from(frame)
    if length < 1:
        raise ProtocolError("frame length must cover the tag byte")
    if len(frame) - 4 != length:
        raise ProtocolError(f"frame advertises {length} bytes but carries {len(frame) - 4}")
    return decode_body(frame[4], bytes(frame[5:]))


class FrameDecoder:
    """Incremental decoder for a byte stream of frames."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> List[Message]:
        self._buf += data
        out = []
        while len(self._buf) >= 4:
            (length,) = _U32.unpack_from(self._buf)
            if length < 1 or length > MAX_FRAME:
                raise ProtocolError(f"bad frame length {length}")
            if len(self._buf) < 4 + length:
                break
            frame = bytes(self._buf[: 4 + length])
            del self._buf[: 4 + length]
            out.append(decode_message(frame))
        return out

    @property
    def pending(self) -> int:
        return len(self._buf)


def _recv_exact(sock: socket.socket, n: int) -> Optional[bytes]:
    chunks = []
    while n:
        chunk = sock.recv(min(n, 1 << 16))
        if not chunk:
            if chunks:
                raise ProtocolError("connection closed mid-frame")
            return None
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def read_message(sock: socket.socket) -> Optional[Message]:
    """Blocking read of one message; ``None`` on clean EOF."""
    head = _recv_exact(sock, 4)
    if head is None:
        return None
    (length,) = _U32.unpack(head)
    if length < 1 or length > MAX_FRAME:
        raise ProtocolError(f"bad frame length {length}")
    rest = _recv_exact(sock, length)
    if rest is None:
        raise ProtocolError("connection closed mid-frame")
    return decode_body(rest[0], rest[1:])


def send_message(sock: socket.socket, m: Message) -> None:
    sock.sendall(encode_message(m))


# -- XOR coding -----------------------------------------------------------------

def xor_combine(payloads: Sequence[bytes]) -> bytes:
    if not payloads:
        raise ValueError("xor_combine needs at least one block")
    size = len(payloads[0])
    acc = int.from_bytes(payloads[0], "little")
    for p in payloads[1:]:
        if len(p) != size:
            raise ValueError(f"block size mismatch: {len(p)} != {size}")
        acc ^= int.from_bytes(p, "little")
    return acc.to_bytes(size, "little")


def header_overhead(m: Message) -> int:
    """Tag, count and header bytes of a CODED message (length prefix excluded)."""
    if not isinstance(m, Coded):
        raise TypeError("header overhead is defined for coded symbols")
    return len(encode_message(m)) - 4 - len(m.payload)


def decode_coded(c: Coded, cache: CacheContents) -> Tuple[SymbolId, bytes]:
    missing = [h for h in c.headers if h not in cache.held]
    if not missing:
        raise DecodeError("every constituent is already cached; nothing to decode")
    if len(missing) > 1:
        raise DecodeError(f"{len(missing)} constituents missing from cache; undecodable")
    blocks = [c.payload]
    for h in c.headers:
        if h != missing[0]:
            try:
                blocks.append(cache.payloads[h])
            except KeyError:
                raise DecodeError(f"payload for cached symbol {h} not loaded") from None
    return missing[0], xor_combine(blocks)
