"""Wire protocols, transport-agnostic (sans-IO).

Three byte-level protocols share this module:

* Internal framing, used on every tree hop: magic 0x4D, version 0x01, a type
  byte (0x01 request / 0x02 response / 0x03 error), a 16-byte correlation id,
  a 4-byte big-endian payload length, then the payload.
* The database-style handshake spoken by the layer-d Requests Servers (and by
  the real database node in the baseline chain): server greeting (0x44 0x42,
  version 0x01, 8-byte nonce), client echo of the same layout, server OK
  (0x4F 0x4B), then exactly one request frame (16-byte id, 4-byte big-endian
  length, payload) answered by one mirrored response frame.
* The poll protocol between the target's Polling Server and the Requests
  Servers: {0x10, 8-byte cursor} -> {0x11, 4-byte count, entries}, and
  {0x12, id, 4-byte length, bytes} -> {0x13}.

Parsers are incremental (feed arbitrary byte chunks) so the same state
machines run over the in-process bus and over real stream sockets.
"""

from __future__ import annotations

import struct
from random import Random

from .errors import ProtocolViolation

FRAME_MAGIC = 0x4D
FRAME_VERSION = 0x01
TYPE_REQUEST = 0x01
TYPE_RESPONSE = 0x02
TYPE_ERROR = 0x03

_FRAME_HEAD = struct.Struct("!BBB16sI")

CORR_LEN = 16

HS_MAGIC = b"\x44\x42"
HS_VERSION = 0x01
HS_OK = b"\x4f\x4b"
_HS_GREETING = struct.Struct("!2sB8s")
_REQ_HEAD = struct.Struct("!16sI")

POLL_LIST = 0x10
POLL_LISTING = 0x11
POLL_DELIVER = 0x12
POLL_ACK = 0x13

MAX_PAYLOAD = 1 << 20


def encode_frame(ftype: int, corr: bytes, payload: bytes) -> bytes:
    if len(corr) != CORR_LEN:
        raise ValueError(f"correlation id must be {CORR_LEN} bytes")
    if len(payload) > MAX_PAYLOAD:
        raise ValueError("payload too large")
    return _FRAME_HEAD.pack(FRAME_MAGIC, FRAME_VERSION, ftype, corr, len(payload)) + payload


def encode_request(corr: bytes, payload: bytes) -> bytes:
    return encode_frame(TYPE_REQUEST, corr, payload)


def encode_response(corr: bytes, payload: bytes) -> bytes:
    return encode_frame(TYPE_RESPONSE, corr, payload)


def encode_error(corr: bytes, reason: bytes) -> bytes:
    return encode_frame(TYPE_ERROR, corr, reason)


class FrameParser:
    """Incremental decoder for internal frames."""

    def __init__(self) -> None:
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[tuple[int, bytes, bytes]]:
        self._buf.extend(data)
        frames = []
        while True:
            if len(self._buf) < _FRAME_HEAD.size:
                return frames
            magic, version, ftype, corr, length = _FRAME_HEAD.unpack_from(self._buf)
            if magic != FRAME_MAGIC:
                raise ProtocolViolation(f"bad frame magic 0x{magic:02x}")
            if version != FRAME_VERSION:
                raise ProtocolViolation(f"unsupported frame version {version}")
            if ftype not in (TYPE_REQUEST, TYPE_RESPONSE, TYPE_ERROR):
                raise ProtocolViolation(f"unknown frame type 0x{ftype:02x}")
            if length > MAX_PAYLOAD:
                raise ProtocolViolation("frame payload too large")
            total = _FRAME_HEAD.size + length
            if len(self._buf) < total:
                return frames
            payload = bytes(self._buf[_FRAME_HEAD.size:total])
            del self._buf[:total]
            frames.append((ftype, corr, payload))


def decode_frame(data: bytes) -> tuple[int, bytes, bytes]:
    """Decode exactly one frame; trailing bytes are a violation."""
    parser = FrameParser()
    frames = parser.feed(data)
    if len(frames) != 1 or parser._buf:
        raise ProtocolViolation("expected exactly one frame")
    return frames[0]


# --- handshake protocol ---------------------------------------------------


def _greeting(nonce: bytes) -> bytes:
    return _HS_GREETING.pack(HS_MAGIC, HS_VERSION, nonce)


class HandshakeServer:
    """Server half of the database-style handshake.

    Drive it with start() to obtain the greeting, then feed() inbound bytes.
    feed returns (bytes to send, events); events are ("established",),
    ("request", corr, payload) and ("done",).  Exactly one request is
    accepted per session; respond() builds the response frame.
    """

    _AWAIT_ECHO, _AWAIT_REQUEST, _AWAIT_RESPOND, _DONE = range(4)

    def __init__(self, nonce: bytes | None = None, rng: Random | None = None):
        if nonce is None:
            nonce = (rng or Random()).getrandbits(64).to_bytes(8, "big")
        if len(nonce) != 8:
            raise ValueError("nonce must be 8 bytes")
        self.nonce = nonce
        self._state = self._AWAIT_ECHO
        self._buf = bytearray()
        self._started = False

    def start(self) -> bytes:
        if self._started:
            raise ProtocolViolation("greeting already sent")
        self._started = True
        return _greeting(self.nonce)

    def feed(self, data: bytes) -> tuple[bytes, list[tuple]]:
        if not self._started:
            raise ProtocolViolation("greeting not sent yet")
        self._buf.extend(data)
        out = bytearray()
        events: list[tuple] = []
        while True:
            if self._state == self._AWAIT_ECHO:
                if len(self._buf) < _HS_GREETING.size:
                    break
                magic, version, nonce = _HS_GREETING.unpack_from(self._buf)
                if magic != HS_MAGIC:
                    raise ProtocolViolation("client spoke before greeting ack")
                if version != HS_VERSION:
                    raise ProtocolViolation(f"unsupported handshake version {version}")
                if nonce != self.nonce:
                    raise ProtocolViolation("nonce mismatch in greeting ack")
                del self._buf[:_HS_GREETING.size]
                self._state = self._AWAIT_REQUEST
                out += HS_OK
                events.append(("established",))
            elif self._state == self._AWAIT_REQUEST:
                if len(self._buf) < _REQ_HEAD.size:
                    break
                corr, length = _REQ_HEAD.unpack_from(self._buf)
                if length == 0:
                    raise ProtocolViolation("empty request payload")
                if length > MAX_PAYLOAD:
                    raise ProtocolViolation("request payload too large")
                total = _REQ_HEAD.size + length
                if len(self._buf) < total:
                    break
                payload = bytes(self._buf[_REQ_HEAD.size:total])
                del self._buf[:total]
                self._state = self._AWAIT_RESPOND
                events.append(("request", corr, payload))
            else:
                if self._buf:
                    raise ProtocolViolation("bytes after the session's one request")
                break
        return bytes(out), events

    def respond(self, corr: bytes, payload: bytes) -> bytes:
        if self._state != self._AWAIT_RESPOND:
            raise ProtocolViolation("no request awaiting a response")
        self._state = self._DONE
        return _REQ_HEAD.pack(corr, len(payload)) + payload


class HandshakeClient:
    """Client half: echoes the greeting, waits for OK, sends one request."""

    _AWAIT_GREETING, _AWAIT_OK, _AWAIT_RESPONSE, _DONE = range(4)

    def __init__(self, corr: bytes, payload: bytes):
        if len(corr) != CORR_LEN:
            raise ValueError(f"correlation id must be {CORR_LEN} bytes")
        if not payload:
            raise ProtocolViolation("empty request payload")
        self.corr = corr
        self.payload = payload
        self._state = self._AWAIT_GREETING
        self._buf = bytearray()

    @property
    def done(self) -> bool:
        return self._state == self._DONE

    def feed(self, data: bytes) -> tuple[bytes, list[tuple]]:
        self._buf.extend(data)
        out = bytearray()
        events: list[tuple] = []
        while True:
            if self._state == self._AWAIT_GREETING:
                if len(self._buf) < _HS_GREETING.size:
                    break
                magic, version, nonce = _HS_GREETING.unpack_from(self._buf)
                if magic != HS_MAGIC:
                    raise ProtocolViolation("bad greeting magic")
                if version != HS_VERSION:
                    raise ProtocolViolation(f"unsupported handshake version {version}")
                del self._buf[:_HS_GREETING.size]
                out += _greeting(nonce)
                self._state = self._AWAIT_OK
            elif self._state == self._AWAIT_OK:
                if len(self._buf) < len(HS_OK):
                    break
                if bytes(self._buf[:len(HS_OK)]) != HS_OK:
                    raise ProtocolViolation("expected OK frame")
                del self._buf[:len(HS_OK)]
                out += _REQ_HEAD.pack(self.corr, len(self.payload)) + self.payload
                self._state = self._AWAIT_RESPONSE
            elif self._state == self._AWAIT_RESPONSE:
                if len(self._buf) < _REQ_HEAD.size:
                    break
                corr, length = _REQ_HEAD.unpack_from(self._buf)
                total = _REQ_HEAD.size + length
                if len(self._buf) < total:
                    break
                payload = bytes(self._buf[_REQ_HEAD.size:total])
                del self._buf[:total]
                if corr != self.corr:
                    raise ProtocolViolation("response for a different correlation id")
                self._state = self._DONE
                events.append(("response", corr, payload))
            else:
                if self._buf:
                    raise ProtocolViolation("bytes after session completion")
                break
        return bytes(out), events


# --- poll protocol --------------------------------------------------------


def encode_poll_list(cursor: int) -> bytes:
    return struct.pack("!BQ", POLL_LIST, cursor)


def encode_poll_listing(entries: list[tuple[bytes, bytes]]) -> bytes:
    parts = [struct.pack("!BI", POLL_LISTING, len(entries))]
    for corr, payload in entries:
        parts.append(_REQ_HEAD.pack(corr, len(payload)))
        parts.append(payload)
    return b"".join(parts)


def encode_poll_delivery(corr: bytes, response: bytes) -> bytes:
    return struct.pack("!B", POLL_DELIVER) + _REQ_HEAD.pack(corr, len(response)) + response


POLL_ACK_FRAME = struct.pack("!B", POLL_ACK)


class PollParser:
    """Incremental decoder for poll-protocol frames (either direction).

    Yields ("list", cursor), ("listing", [(corr, payload), ...]),
    ("deliver", corr, response) and ("ack",).
    """

    def __init__(self) -> None:
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[tuple]:
        self._buf.extend(data)
        events: list[tuple] = []
        while self._buf:
            kind = self._buf[0]
            if kind == POLL_LIST:
                if len(self._buf) < 9:
                    break
                (cursor,) = struct.unpack_from("!Q", self._buf, 1)
                del self._buf[:9]
                events.append(("list", cursor))
            elif kind == POLL_LISTING:
                parsed = self._parse_listing()
                if parsed is None:
                    break
                events.append(("listing", parsed))
            elif kind == POLL_DELIVER:
                need = 1 + _REQ_HEAD.size
                if len(self._buf) < need:
                    break
                corr, length = _REQ_HEAD.unpack_from(self._buf, 1)
                if length > MAX_PAYLOAD:
                    raise ProtocolViolation("delivery payload too large")
                if len(self._buf) < need + length:
                    break
                response = bytes(self._buf[need:need + length])
                del self._buf[:need + length]
                events.append(("deliver", corr, response))
            elif kind == POLL_ACK:
                del self._buf[:1]
                events.append(("ack",))
            else:
                raise ProtocolViolation(f"unknown poll frame type 0x{kind:02x}")
        return events

    def _parse_listing(self) -> list[tuple[bytes, bytes]] | None:
        if len(self._buf) < 5:
            return None
        (count,) = struct.unpack_from("!I", self._buf, 1)
        offset = 5
        entries = []
        for _ in range(count):
            if len(self._buf) < offset + _REQ_HEAD.size:
                return None
            corr, length = _REQ_HEAD.unpack_from(self._buf, offset)
            if length > MAX_PAYLOAD:
                raise ProtocolViolation("listing payload too large")
            offset += _REQ_HEAD.size
            if len(self._buf) < offset + length:
                return None
            entries.append((corr, bytes(self._buf[offset:offset + length])))
            offset += length
        del self._buf[:offset]
        return entries


# --- minimal HTTP/1.1 (entry point's public surface) -----------------------


def encode_http_request(method: str, path: str, body: bytes = b"") -> bytes:
    head = (f"{method} {path} HTTP/1.1\r\n"
            f"Host: entry\r\n"
            f"Content-Length: {len(body)}\r\n"
            f"Connection: close\r\n\r\n")
    return head.encode("ascii") + body


def parse_http_request(data: bytes) -> tuple[str, str, bytes]:
    head, sep, body = data.partition(b"\r\n\r\n")
    if not sep:
        raise ProtocolViolation("truncated HTTP request")
    lines = head.split(b"\r\n")
    try:
        method, path, version = lines[0].decode("ascii").split(" ")
    except ValueError:
        raise ProtocolViolation("malformed HTTP request line") from None
    if not version.startswith("HTTP/1."):
        raise ProtocolViolation(f"unsupported HTTP version {version!r}")
    if method not in ("GET", "POST"):
        raise ProtocolViolation(f"unsupported method {method!r}")
    length = 0
    for line in lines[1:]:
        name, _, value = line.partition(b":")
        if name.strip().lower() == b"content-length":
            length = int(value.strip())
    if len(body) < length:
        raise ProtocolViolation("HTTP body shorter than Content-Length")
    return method, path, body[:length]


_HTTP_STATUS = {200: "OK", 400: "Bad Request", 502: "Bad Gateway",
                504: "Gateway Timeout"}


def encode_http_response(status: int, body: bytes,
                         headers: dict[str, str] | None = None) -> bytes:
    reason = _HTTP_STATUS.get(status, "Unknown")
    extra = ""
    if headers:
        extra = "".join(f"{name}: {value}\r\n"
                        for name, value in sorted(headers.items()))
    head = (f"HTTP/1.1 {status} {reason}\r\n"
            f"Content-Length: {len(body)}\r\n"
            f"{extra}"
            f"Connection: close\r\n\r\n")
    return head.encode("ascii") + body


def parse_http_response(data: bytes) -> tuple[int, dict[str, str], bytes]:
    """Returns (status, headers with lower-case names, body)."""
    head, sep, body = data.partition(b"\r\n\r\n")
    if not sep:
        raise ProtocolViolation("truncated HTTP response")
    lines = head.split(b"\r\n")
    parts = lines[0].decode("ascii").split(" ", 2)
    status = int(parts[1])
    headers: dict[str, str] = {}
    for line in lines[1:]:
        name, _, value = line.partition(b":")
        headers[name.strip().lower().decode("ascii")] = value.strip().decode("ascii")
    length = int(headers.get("content-length", "0"))
    return status, headers, body[:length]


def new_correlation_id(rng: Random) -> bytes:
    return rng.getrandbits(128).to_bytes(CORR_LEN, "big")
