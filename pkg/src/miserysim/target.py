"""Isolated Target machinery.

Layer-d Requests Servers imitate a database server during connection setup
(the real handshake protocol from wire.py), then durably register the request
and hold the client session open.  The target never accepts a connection;
its Polling Server dials out to every RS each interval m, collects pending
entries, deduplicates across RSs and against an executed-id cache, executes
each unique payload exactly once against the backend store, and delivers the
cached response to every holder.

The baseline (d=0) chain reuses the same protocol pieces: DatabaseServerNode
speaks the genuine handshake the RS imitates, and AppServerNode is its
client, so the differential oracle exercises a truly independent data path.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

from . import wire
from .cloud import Channel, CloudProvider, Exchange
from .errors import (
    ConflictingResponse,
    ConnectionRefused,
    ProtocolViolation,
    SessionSevered,
    StorageFailure,
    TimeoutFailure,
    UnknownId,
)
from .eventlog import EventLog
from .sim import Future, PRIO_ACTOR, SimCancelled, Simulation

PENDING = "pending"
ANSWERED = "answered"

_REC_HEAD = struct.Struct("!c16sI")


@dataclass
class RegistryEntry:
    correlation_id: bytes
    payload: bytes
    state: str
    response: bytes | None
    enqueued_at: float
    index: int          # position in enqueue order


class BackendStore:
    """Deterministic key-value store; the stand-in for the real database.

    Request grammar (single line, UTF-8): ``GET <key>`` | ``PUT <key> <value>``
    | ``DEL <key>``.  Responses: ``VAL <value>`` | ``OK`` | ``NIL``; anything
    unparseable answers ``ERR`` (defensive, outside the grammar).  Every
    execution is appended to execution_log for exactly-once audits.
    """

    def __init__(self) -> None:
        self.data: dict[str, str] = {}
        self.execution_log: list[tuple[bytes, bytes, bytes]] = []

    def execute(self, correlation_id: bytes, payload: bytes) -> bytes:
        response = self._run(payload)
        self.execution_log.append((correlation_id, payload, response))
        return response

    def _run(self, payload: bytes) -> bytes:
        try:
            text = payload.decode("utf-8")
        except UnicodeDecodeError:
            return b"ERR"
        parts = text.split(" ", 2)
        op = parts[0]
        if op == "GET" and len(parts) == 2:
            value = self.data.get(parts[1])
            return b"NIL" if value is None else b"VAL " + value.encode("utf-8")
        if op == "PUT" and len(parts) == 3:
            self.data[parts[1]] = parts[2]
            return b"OK"
        if op == "DEL" and len(parts) == 2:
            return b"OK" if self.data.pop(parts[1], None) is not None else b"NIL"
        return b"ERR"

    def execution_counts(self) -> dict[bytes, int]:
        counts: dict[bytes, int] = {}
        for corr, _, _ in self.execution_log:
            counts[corr] = counts.get(corr, 0) + 1
        return counts


class RequestRegistry:
    """Ordered correlation-id -> entry map, optionally durable.

    Durable mode appends 'E' (enqueue) and 'A' (answer) records to a log file
    with fsync on enqueue, and recovers by replaying the log; iteration order
    is enqueue order either way.  The poll cursor is a position in the
    enqueue sequence; list_pending(cursor) returns the still-pending entries
    at positions >= cursor plus the cursor advanced by the batch size (the
    same arithmetic a remote poller applies, since listings carry no cursor).
    """

    def __init__(self, path: str | None = None, *, fsync: bool = True,
                 compact_threshold: int = 4096):
        self.path = path
        self.fsync = fsync
        self.compact_threshold = compact_threshold
        self.entries: dict[bytes, RegistryEntry] = {}
        self._order: list[bytes] = []
        self._answered = 0
        self._fd: int | None = None
        if path is not None:
            if os.path.exists(path):
                self._recover(path)
            try:
                self._fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_APPEND, 0o644)
            except OSError as err:
                raise StorageFailure(str(err)) from err

    def _recover(self, path: str) -> None:
        with open(path, "rb") as fh:
            blob = fh.read()
        offset = 0
        good = 0
        while offset + _REC_HEAD.size <= len(blob):
            kind, corr, length = _REC_HEAD.unpack_from(blob, offset)
            offset += _REC_HEAD.size
            if offset + length > len(blob):
                break   # torn tail record: drop it
            body = blob[offset:offset + length]
            offset += length
            good = offset
            if kind == b"E":
                if corr not in self.entries:
                    self.entries[corr] = RegistryEntry(corr, body, PENDING, None,
                                                       0.0, len(self._order))
                    self._order.append(corr)
            elif kind == b"A":
                entry = self.entries.get(corr)
                if entry is not None and entry.state == PENDING:
                    entry.state = ANSWERED
                    entry.response = body
                    self._answered += 1
        if good < len(blob):
            # cut the torn bytes out of the file, or the next append would
            # land behind them and desync every later recovery
            with open(path, "rb+") as fh:
                fh.truncate(good)

    def _append(self, kind: bytes, corr: bytes, body: bytes, *, sync: bool) -> None:
        if self._fd is None:
            return
        try:
            os.write(self._fd, _REC_HEAD.pack(kind, corr, len(body)) + body)
            if sync and self.fsync:
                os.fsync(self._fd)
        except OSError as err:
            raise StorageFailure(str(err)) from err

    def enqueue(self, corr: bytes, payload: bytes, t: float) -> RegistryEntry:
        """Persist as Pending; re-enqueue of a known id is a no-op."""
        existing = self.entries.get(corr)
        if existing is not None:
            return existing
        entry = RegistryEntry(corr, payload, PENDING, None, t, len(self._order))
        self.entries[corr] = entry
        self._order.append(corr)
        self._append(b"E", corr, payload, sync=True)
        return entry

    def list_pending(self, cursor: int) -> tuple[list[tuple[bytes, bytes]], int]:
        if cursor < 0:
            cursor = 0
        batch = []
        for corr in self._order[cursor:]:
            entry = self.entries[corr]
            if entry.state == PENDING:
                batch.append((entry.correlation_id, entry.payload))
        return batch, cursor + len(batch)

    def deliver(self, corr: bytes, response: bytes) -> RegistryEntry:
        entry = self.entries.get(corr)
        if entry is None:
            raise UnknownId(corr.hex())
        if entry.state == ANSWERED:
            if entry.response != response:
                raise ConflictingResponse(corr.hex())
            return entry
        entry.state = ANSWERED
        entry.response = response
        self._answered += 1
        self._append(b"A", corr, response, sync=False)
        if self._answered >= self.compact_threshold:
            self.compact()
        return entry

    def pending_count(self) -> int:
        return len(self._order) - self._answered

    def __len__(self) -> int:
        return len(self._order)

    def compact(self) -> None:
        """Rewrite the log dropping answered entries (bounds file growth).

        Cursor positions shift on compaction, so it only runs between poll
        cycles via the threshold; the in-memory order keeps answered entries
        until then.
        """
        if self.path is None:
            return
        keep = [self.entries[c] for c in self._order
                if self.entries[c].state == PENDING]
        tmp = self.path + ".tmp"
        with open(tmp, "wb") as fh:
            for entry in keep:
                fh.write(_REC_HEAD.pack(b"E", entry.correlation_id,
                                        len(entry.payload)) + entry.payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, self.path)
        if self._fd is not None:
            os.close(self._fd)
        self._fd = os.open(self.path, os.O_WRONLY | os.O_APPEND, 0o644)
        self.entries = {e.correlation_id: e for e in keep}
        for index, entry in enumerate(self.entries.values()):
            entry.index = index
        self._order = list(self.entries)
        self._answered = 0

    def close(self) -> None:
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None


class _RsSession:
    """One upstream request blocked at an RS awaiting the polled response."""

    __slots__ = ("corr", "server", "client", "respond", "timer", "done")

    def __init__(self, corr, server, client, respond):
        self.corr = corr
        self.server = server
        self.client = client
        self.respond = respond
        self.timer = None
        self.done = False


class RequestsServerNode:
    """Layer-d node: database impostor in front, durable registry behind."""

    def __init__(self, sim: Simulation, provider: CloudProvider, log: EventLog,
                 node_id: str, registry: RequestRegistry, u: float,
                 counters: dict):
        self.sim = sim
        self.provider = provider
        self.log = log
        self.id = node_id
        self.registry = registry
        self.u = u
        self.counters = counters
        self._waiters: dict[bytes, list[_RsSession]] = {}
        self._nonce_rng = sim.rng("nonce")

    # -- upstream transport endpoint ------------------------------------------

    def on_request(self, ex: Exchange, data: bytes) -> None:
        try:
            ftype, corr, payload = wire.decode_frame(data)
        except ProtocolViolation:
            self.provider.respond(ex, wire.encode_error(b"\x00" * wire.CORR_LEN,
                                                        b"bad-frame"))
            return
        if ftype != wire.TYPE_REQUEST:
            self.provider.respond(ex, wire.encode_error(corr, b"bad-frame-type"))
            return
        self.open_session(corr, payload,
                          lambda frame: self.provider.respond(ex, frame))

    def open_session(self, corr: bytes, payload: bytes, respond) -> None:
        """Run the full handshake between the local web-app client half and
        this node's database-impostor half over a synchronous in-process
        pipe (same instance, zero network latency), then register and wait."""
        server = wire.HandshakeServer(rng=self._nonce_rng)
        try:
            client = wire.HandshakeClient(corr, payload)
            to_client = server.start()
            captured = None
            guard = 0
            while to_client and captured is None:
                to_server, _ = client.feed(to_client)
                to_client = b""
                if to_server:
                    out, events = server.feed(to_server)
                    to_client = out
                    for event in events:
                        if event[0] == "request":
                            captured = (event[1], event[2])
                guard += 1
                if guard > 8:
                    raise ProtocolViolation("handshake did not converge")
        except ProtocolViolation as err:
            self.counters["protocol_violations"] = self.counters.get(
                "protocol_violations", 0) + 1
            respond(wire.encode_error(corr, str(err).encode("ascii", "replace")))
            return
        corr, payload = captured
        try:
            self.registry.enqueue(corr, payload, self.sim.now)
        except StorageFailure:
            respond(wire.encode_error(corr, b"storage-failure"))
            return
        session = _RsSession(corr, server, client, respond)
        session.timer = self.sim.schedule(self.u, self._session_timeout, session)
        self._waiters.setdefault(corr, []).append(session)

    def _session_timeout(self, session: _RsSession) -> None:
        if session.done:
            return
        session.done = True
        session.timer = None
        waiters = self._waiters.get(session.corr)
        if waiters and session in waiters:
            waiters.remove(session)
            if not waiters:
                del self._waiters[session.corr]
        session.respond(wire.encode_error(session.corr, b"timeout"))

    def deliver(self, corr: bytes, response: bytes) -> None:
        """Poll-protocol delivery: answer the registry, release any blocked
        sessions through their own handshake state machines."""
        try:
            self.registry.deliver(corr, response)
        except UnknownId:
            self.counters["unknown_deliveries"] = self.counters.get(
                "unknown_deliveries", 0) + 1
            return
        except ConflictingResponse:
            self.counters["conflicting_deliveries"] = self.counters.get(
                "conflicting_deliveries", 0) + 1
            return
        sessions = self._waiters.pop(corr, [])
        if not sessions:
            self.counters["late_deliveries"] = self.counters.get(
                "late_deliveries", 0) + 1
            return
        for session in sessions:
            session.done = True
            if session.timer is not None:
                session.timer.cancel()
                session.timer = None
            frame = session.server.respond(corr, response)
            _, events = session.client.feed(frame)
            answered = [e for e in events if e[0] == "response"]
            if answered:
                session.respond(wire.encode_response(corr, answered[0][2]))
            else:
                session.respond(wire.encode_error(corr, b"protocol-violation"))

    # -- poll endpoint ----------------------------------------------------------

    def on_poll_channel(self, channel: Channel) -> None:
        parser = wire.PollParser()

        def on_message(data: bytes) -> None:
            try:
                events = parser.feed(data)
            except ProtocolViolation:
                channel.close()
                return
            replies = []
            for event in events:
                if event[0] == "list":
                    batch, _ = self.registry.list_pending(event[1])
                    replies.append(wire.encode_poll_listing(batch))
                elif event[0] == "deliver":
                    self.deliver(event[1], event[2])
                    replies.append(wire.POLL_ACK_FRAME)
                else:
                    channel.close()
                    return
            if replies:
                channel.send("b", b"".join(replies))

        channel.on_message("b", on_message)


class _PollLink:
    """Persistent channel to one RS with FIFO request/response matching."""

    __slots__ = ("channel", "parser", "pending")

    def __init__(self, channel: Channel):
        self.channel = channel
        self.parser = wire.PollParser()
        self.pending: list[Future] = []
        channel.on_message("a", self._on_message)
        channel.on_error("a", self._on_error)

    def _on_message(self, data: bytes) -> None:
        try:
            events = self.parser.feed(data)
        except ProtocolViolation as err:
            self._on_error(err)
            return
        for event in events:
            if self.pending:
                self.pending.pop(0).resolve(event)

    def _on_error(self, err: Exception) -> None:
        pending, self.pending = self.pending, []
        for fut in pending:
            fut.reject(err if isinstance(err, Exception) else SessionSevered(str(err)))

    @property
    def usable(self) -> bool:
        return self.channel.state == "open"

    def ask(self, frame: bytes) -> Future:
        fut = Future()
        self.pending.append(fut)
        self.channel.send("a", frame)
        return fut


class PollingServerNode:
    """Target-resident poller: the only component that touches the store."""

    def __init__(self, sim: Simulation, provider: CloudProvider, log: EventLog,
                 node_id: str, store: BackendStore, m: float, poll_port: int,
                 counters: dict, *, window: int = 600):
        self.sim = sim
        self.provider = provider
        self.log = log
        self.id = node_id
        self.store = store
        self.m = m
        self.poll_port = poll_port
        self.counters = counters
        self.window = window
        self.endpoints: list[tuple[str, str]] = []
        self.cursors: dict[str, int] = {}
        self.executed: dict[bytes, tuple[int, bytes]] = {}
        self.redeliver: dict[str, dict[bytes, None]] = {}
        self._links: dict[str, _PollLink] = {}
        self.cycle_no = 0
        self._task = None

    def set_record(self, entries) -> None:
        """Adopt a new layer-d endpoint list from the Address Server."""
        self.endpoints = [tuple(e) for e in entries]
        live = {rs_id for rs_id, _ in self.endpoints}
        for rs_id in [r for r in self._links if r not in live]:
            self._links.pop(rs_id).channel.close()
        self.redeliver = {r: ids for r, ids in self.redeliver.items() if r in live}

    def start(self) -> None:
        self._task = self.sim.spawn(self._loop(), priority=PRIO_ACTOR)

    def stop(self) -> None:
        if self._task is not None:
            self._task.cancel()
            self._task = None

    def _loop(self):
        # sleep m between cycles, not on a fixed grid: a grid would let the
        # closed-loop client phase-lock to it and hide the per-endpoint cost
        try:
            while True:
                yield from self._cycle()
                yield self.m
        except SimCancelled:
            return

    def _ensure_link(self, rs_id: str, address: str):
        link = self._links.get(rs_id)
        if link is not None and link.usable:
            return link
        self._links.pop(rs_id, None)
        try:
            channel = yield self.provider.open_channel(self.id, address, self.poll_port)
        except (ConnectionRefused, SessionSevered):
            self.counters["poll_errors"] = self.counters.get("poll_errors", 0) + 1
            return None
        link = _PollLink(channel)
        self._links[rs_id] = link
        return link

    def _cycle(self):
        self.cycle_no += 1
        endpoints = list(self.endpoints)
        reporters: dict[bytes, list[str]] = {}
        fresh: list[tuple[bytes, bytes]] = []
        collected = 0
        for rs_id, address in endpoints:
            link = yield from self._ensure_link(rs_id, address)
            if link is None:
                continue
            try:
                event = yield link.ask(wire.encode_poll_list(self.cursors.get(rs_id, 0)))
            except (ConnectionRefused, SessionSevered):
                self.counters["poll_errors"] = self.counters.get("poll_errors", 0) + 1
                continue
            if event[0] != "listing":
                self.counters["poll_errors"] = self.counters.get("poll_errors", 0) + 1
                continue
            entries = event[1]
            self.cursors[rs_id] = self.cursors.get(rs_id, 0) + len(entries)
            collected += len(entries)
            for corr, payload in entries:
                if corr not in self.executed and corr not in reporters:
                    fresh.append((corr, payload))
                reporters.setdefault(corr, []).append(rs_id)
        for corr, payload in fresh:
            response = self.store.execute(corr, payload)
            self.executed[corr] = (self.cycle_no, response)
        delivered = 0
        for rs_id, _ in endpoints:
            plan = dict(self.redeliver.get(rs_id, {}))
            for corr, holders in reporters.items():
                if rs_id in holders:
                    plan[corr] = None
            if not plan:
                continue
            self.redeliver[rs_id] = {}
            link = self._links.get(rs_id)
            for corr in plan:
                cached = self.executed.get(corr)
                if cached is None:
                    continue
                if link is None or not link.usable:
                    self.redeliver.setdefault(rs_id, {})[corr] = None
                    continue
                try:
                    event = yield link.ask(wire.encode_poll_delivery(corr, cached[1]))
                except (ConnectionRefused, SessionSevered):
                    self.counters["poll_errors"] = self.counters.get("poll_errors", 0) + 1
                    self.redeliver.setdefault(rs_id, {})[corr] = None
                    link = None
                    continue
                if event[0] == "ack":
                    delivered += 1
                else:
                    self.redeliver.setdefault(rs_id, {})[corr] = None
            if rs_id in self.redeliver and not self.redeliver[rs_id]:
                del self.redeliver[rs_id]
        # the executed cache must outlive any re-listing of a still-pending
        # entry (delivery outages last seconds; the window spans minutes)
        horizon = self.cycle_no - self.window
        if horizon > 0:
            for corr in [c for c, (cycle, _) in self.executed.items() if cycle < horizon]:
                del self.executed[corr]
        if fresh or collected or delivered:
            self.log.emit(self.sim.now, "poll.cycle", instance=self.id,
                          detail={"cycle": self.cycle_no, "collected": collected,
                                  "executed": len(fresh), "delivered": delivered})


class DatabaseServerNode:
    """Baseline-chain database: the genuine owner of the handshake protocol."""

    def __init__(self, sim: Simulation, provider: CloudProvider, log: EventLog,
                 node_id: str, store: BackendStore, counters: dict):
        self.sim = sim
        self.provider = provider
        self.log = log
        self.id = node_id
        self.store = store
        self.counters = counters
        self._nonce_rng = sim.rng("nonce")

    def on_channel(self, channel: Channel) -> None:
        server = wire.HandshakeServer(rng=self._nonce_rng)

        def on_message(data: bytes) -> None:
            try:
                out, events = server.feed(data)
            except ProtocolViolation:
                self.counters["protocol_violations"] = self.counters.get(
                    "protocol_violations", 0) + 1
                channel.close()
                return
            buffered = [out] if out else []
            for event in events:
                if event[0] == "request":
                    corr, payload = event[1], event[2]
                    response = self.store.execute(corr, payload)
                    buffered.append(server.respond(corr, response))
            if buffered:
                channel.send("b", b"".join(buffered))

        channel.on_message("b", on_message)
        channel.send("b", server.start())


class AppServerNode:
    """Baseline-chain application server: database client behind the entry."""

    def __init__(self, sim: Simulation, provider: CloudProvider, log: EventLog,
                 node_id: str, db_address: str, db_port: int, u: float,
                 counters: dict):
        self.sim = sim
        self.provider = provider
        self.log = log
        self.id = node_id
        self.db_address = db_address
        self.db_port = db_port
        self.u = u
        self.counters = counters

    def on_request(self, ex: Exchange, data: bytes) -> None:
        try:
            ftype, corr, payload = wire.decode_frame(data)
        except ProtocolViolation:
            self.provider.respond(ex, wire.encode_error(b"\x00" * wire.CORR_LEN,
                                                        b"bad-frame"))
            return
        if ftype != wire.TYPE_REQUEST or not payload:
            self.provider.respond(ex, wire.encode_error(corr, b"bad-frame-type"))
            return
        self.sim.spawn(self._session(ex, corr, payload), priority=PRIO_ACTOR)

    def _session(self, ex: Exchange, corr: bytes, payload: bytes):
        try:
            channel = yield self.provider.open_channel(self.id, self.db_address,
                                                       self.db_port)
        except (ConnectionRefused, SessionSevered):
            self.provider.respond(ex, wire.encode_error(corr, b"no-upstream"))
            return
        client = wire.HandshakeClient(corr, payload)
        done = Future()

        def on_message(data: bytes) -> None:
            try:
                out, events = client.feed(data)
            except ProtocolViolation as err:
                done.reject(err)
                return
            if out:
                channel.send("a", out)
            for event in events:
                if event[0] == "response":
                    done.resolve(event[2])

        channel.on_message("a", on_message)
        channel.on_error("a", done.reject)
        timer = self.sim.schedule(self.u, done.reject, TimeoutFailure("db timeout"))
        try:
            response = yield done
        except TimeoutFailure:
            self.provider.respond(ex, wire.encode_error(corr, b"timeout"))
            channel.close()
            return
        except (ProtocolViolation, SessionSevered):
            self.provider.respond(ex, wire.encode_error(corr, b"upstream-failure"))
            channel.close()
            return
        finally:
            timer.cancel()
        channel.close()
        self.provider.respond(ex, wire.encode_response(corr, response))
