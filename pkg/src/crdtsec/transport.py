"""Full-mesh TCP replication of any of the CRDTs.

Each process owns one :class:`Replica`, a single-node view built on the
simulator's World so that the delivery rule, duplicate suppression and
interpretation are exactly the simulated ones.  Frames are a 4-byte
big-endian length followed by one JSON trace record.

Links are at-least-once: after any (re)connect a sender replays its whole
outbox, and receivers drop ids they have already seen.
"""

from __future__ import annotations

import asyncio
import json
import logging
import struct
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, TextIO

from . import trace
from .causal import LamportId, Message
from .datatype import Datatype, get_datatype
from .network import InvalidMessage, NodeFailed, Record, World, broadcast, deliver, deliverable

log = logging.getLogger(__name__)

HEADER = struct.Struct(">I")
MAX_FRAME = 1 << 20


class FrameError(ValueError):
    pass


class BindError(OSError):
    pass


@dataclass(frozen=True)
class PeerConfig:
    self_index: int
    peers: tuple[tuple[int, str, int], ...]
    datatype: str

    def __post_init__(self):
        indices = sorted(p[0] for p in self.peers)
        if indices != list(range(len(indices))):
            raise ValueError("peer indices must be dense 0..n-1")
        if self.self_index not in indices:
            raise ValueError("self_index must be one of the peers")
        get_datatype(self.datatype)

    @property
    def n_nodes(self) -> int:
        return len(self.peers)

    def address(self, index: int) -> tuple[str, int]:
        for i, host, port in self.peers:
            if i == index:
                return host, port
        raise KeyError(index)

    @classmethod
    def from_dict(cls, d: dict) -> PeerConfig:
        return cls(int(d["self_index"]), tuple((int(i), str(h), int(p)) for i, h, p in d["peers"]), d["datatype"])

    def to_dict(self) -> dict:
        return {"self_index": self.self_index, "datatype": self.datatype, "peers": [list(p) for p in self.peers]}

    @classmethod
    def load(cls, path: str | Path) -> PeerConfig:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def encode_frame(m: Message, dt: Datatype) -> bytes:
    rec = Record.for_message("broadcast", m.sender, m)
    payload = json.dumps(trace.record_to_json(rec, dt), separators=(",", ":")).encode()
    return HEADER.pack(len(payload)) + payload


def decode_payload(payload: bytes, dt: Datatype) -> Message:
    if not payload:
        raise FrameError("empty payload")
    try:
        rec = trace.record_from_json(json.loads(payload), dt)
    except (ValueError, KeyError, TypeError) as exc:
        raise FrameError(f"malformed payload: {exc}") from None
    if rec.action != "broadcast" or rec.msg_id is None or rec.op is None or rec.clock is None:
        raise FrameError("payload is not a complete broadcast record")
    return Message(rec.msg_id, rec.op, rec.clock)


def decode_frame(data: bytes, dt: Datatype) -> Message:
    """Decode exactly one complete frame."""
    if len(data) < HEADER.size:
        raise FrameError("truncated length prefix")
    (length,) = HEADER.unpack_from(data)
    if length != len(data) - HEADER.size:
        raise FrameError(f"length prefix says {length} bytes, frame carries {len(data) - HEADER.size}")
    return decode_payload(data[HEADER.size :], dt)


async def read_frame(reader: asyncio.StreamReader, dt: Datatype) -> Message | None:
    """Next frame from a stream, or None on clean EOF between frames."""
    try:
        head = await reader.readexactly(HEADER.size)
    except asyncio.IncompleteReadError as exc:
        if exc.partial:
            raise FrameError("truncated length prefix") from None
        return None
    (length,) = HEADER.unpack(head)
    if length > MAX_FRAME:
        raise FrameError(f"frame of {length} bytes exceeds limit")
    try:
        payload = await reader.readexactly(length)
    except asyncio.IncompleteReadError:
        raise FrameError("truncated payload") from None
    return decode_payload(payload, dt)


class Replica:
    """One node's causal-delivery state machine."""

    def __init__(self, datatype: Datatype | str, index: int, n_nodes: int):
        self.index = index
        self.world = World.create(datatype, n_nodes)
        self.duplicates = 0

    @property
    def datatype(self) -> Datatype:
        return self.world.datatype

    @property
    def state(self) -> Any:
        return self.world.states[self.index]

    def next_id(self) -> LamportId:
        return self.world.next_id(self.index)

    def local(self, op: Any) -> Message:
        """Broadcast and locally deliver; returns the message to send out."""
        world = broadcast(self.world, self.index, op)
        # only this node's own queue matters here
        self.world = replace(world, pending=tuple(
            p if i == self.index else frozenset() for i, p in enumerate(world.pending)
        ))
        return world.histories[self.index][-2].message

    def receive(self, m: Message) -> list[Message]:
        """Buffer a remote message and deliver whatever became ready."""
        w = self.world
        if m.sender == self.index or m.id in w.delivered_ids[self.index] or m in w.pending[self.index]:
            self.duplicates += 1
            return []
        pending = w.pending[self.index] | {m}
        self.world = replace(w, pending=tuple(pending if i == self.index else p for i, p in enumerate(w.pending)))
        delivered = []
        while True:
            ready = sorted(deliverable(self.world, self.index), key=lambda x: x.id)
            if not ready:
                return delivered
            for r in ready:
                self.world = deliver(self.world, self.index, r.id)
                delivered.append(r)

    def held_back(self) -> int:
        return len(self.world.pending[self.index])

    def log_records(self) -> list[Record]:
        return list(self.world.log)

    def write_log(self, path: str | Path) -> None:
        header = trace.TraceHeader(self.datatype.name, self.world.n_nodes, 0)
        trace.write_trace(path, header, self.log_records())


def parse_command(line: str, replica: Replica) -> Any:
    """Turn a control line into an operation for the replica's datatype."""
    from . import counter, orset, rga

    words = line.split()
    cmd, args = words[0], words[1:]
    name = replica.datatype.name
    if name == "counter" and cmd in ("inc", "dec") and not args:
        return counter.Increment if cmd == "inc" else counter.Decrement
    if name == "orset" and cmd in ("add", "rem") and len(args) == 1:
        if cmd == "add":
            return orset.Add(replica.next_id(), args[0])
        return orset.Rem(replica.state[args[0]], args[0])
    if name == "rga" and cmd == "ins" and len(args) in (1, 3) and (len(args) == 1 or args[1] == "after"):
        after = LamportId.parse(args[2]) if len(args) == 3 else None
        return rga.Insert(rga.Elt(replica.next_id(), args[0]), after)
    if name == "rga" and cmd == "del" and len(args) == 1:
        return rga.Delete(LamportId.parse(args[0]))
    raise ValueError(f"command {line.strip()!r} does not apply to {name}")


class Node:
    """A running replica: TCP server, one sender per peer, and a control loop."""

    def __init__(self, config: PeerConfig, log_path: str | Path | None = None):
        self.config = config
        self.replica = Replica(config.datatype, config.self_index, config.n_nodes)
        self.log_path = log_path
        self.outbox: list[bytes] = []
        self._changed: asyncio.Condition | None = None
        self._generation = 0
        self._server: asyncio.AbstractServer | None = None
        self._tasks: list[asyncio.Task] = []

    @property
    def index(self) -> int:
        return self.config.self_index

    async def start(self) -> None:
        self._changed = asyncio.Condition()
        host, port = self.config.address(self.index)
        try:
            self._server = await asyncio.start_server(self._serve_peer, host, port)
        except OSError as exc:
            raise BindError(exc.errno, f"cannot bind {host}:{port}: {exc.strerror}") from None
        for i, _, _ in self.config.peers:
            if i != self.index:
                self._tasks.append(asyncio.create_task(self._send_loop(i)))

    async def stop(self) -> None:
        for t in self._tasks:
            t.cancel()
        await asyncio.gather(*self._tasks, return_exceptions=True)
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
        if self.log_path is not None:
            self.replica.write_log(self.log_path)

    async def _notify(self) -> None:
        async with self._changed:
            self._changed.notify_all()

    async def submit(self, op: Any) -> Message:
        m = self.replica.local(op)
        self.outbox.append(encode_frame(m, self.replica.datatype))
        await self._notify()
        return m

    async def force_reconnect(self) -> None:
        self._generation += 1
        await self._notify()

    async def _send_loop(self, peer: int) -> None:
        host, port = self.config.address(peer)
        delay = 0.02
        while True:
            try:
                _, writer = await asyncio.open_connection(host, port)
            except OSError:
                # peer unreachable: the model tolerates arbitrary delay, so retry
                await asyncio.sleep(delay)
                delay = min(delay * 2, 1.0)
                continue
            delay = 0.02
            generation = self._generation
            sent = 0
            try:
                while generation == self._generation:
                    while sent < len(self.outbox):
                        writer.write(self.outbox[sent])
                        sent += 1
                    await writer.drain()
                    async with self._changed:
                        await self._changed.wait_for(
                            lambda: sent < len(self.outbox) or generation != self._generation
                        )
            except (ConnectionError, OSError):
                log.debug("link to %d dropped; reconnecting", peer)
            finally:
                writer.close()
                try:
                    await writer.wait_closed()
                except (ConnectionError, OSError):
                    pass

    async def _serve_peer(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        dt = self.replica.datatype
        try:
            while (m := await read_frame(reader, dt)) is not None:
                self.replica.receive(m)
        except (FrameError, ConnectionError) as exc:
            log.warning("closing peer connection: %s", exc)
        finally:
            writer.close()

    def status(self) -> dict:
        w = self.replica.world
        return {
            "node": self.index,
            "state": self.replica.datatype.render_state(self.replica.state),
            "delivered": len(w.delivered_ids[self.index]),
            "held_back": self.replica.held_back(),
            "duplicates": self.replica.duplicates,
        }

    async def handle(self, line: str) -> tuple[dict, bool]:
        """Run one control command; returns (response, keep_running)."""
        cmd = line.strip()
        if not cmd:
            return {"ok": True}, True
        if cmd == "quit":
            return {"ok": True, "bye": self.index}, False
        if cmd == "state":
            return {"ok": True, **self.status()}, True
        if cmd == "reconnect":
            await self.force_reconnect()
            return {"ok": True, "generation": self._generation}, True
        if cmd == "log":
            if self.log_path is not None:
                self.replica.write_log(self.log_path)
            return {"ok": True, "records": len(self.replica.world.log)}, True
        try:
            op = parse_command(cmd, self.replica)
            m = await self.submit(op)
        except (ValueError, InvalidMessage, NodeFailed) as exc:
            return {"ok": False, "error": str(exc)}, True
        return {"ok": True, "id": [m.id.counter, m.id.node]}, True


async def serve(config: PeerConfig, log_path: str | Path | None = None,
                commands: asyncio.StreamReader | None = None, out: TextIO = sys.stdout) -> None:
    """Run a node until ``quit`` or end of input on the control stream."""
    node = Node(config, log_path)
    await node.start()
    if commands is None:
        commands = asyncio.StreamReader()
        loop = asyncio.get_running_loop()
        await loop.connect_read_pipe(lambda: asyncio.StreamReaderProtocol(commands), sys.stdin)
    print(json.dumps({"ok": True, "ready": node.index}), file=out, flush=True)
    try:
        while line := (await commands.readline()).decode():
            response, running = await node.handle(line)
            print(json.dumps(response), file=out, flush=True)
            if not running:
                break
    finally:
        await node.stop()
