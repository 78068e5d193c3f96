"""JSON-lines trace format.

One JSON object per line with keys in a fixed order::

    {"action":"init","datatype":"rga","nodes":2,"seed":7}
    {"action":"broadcast","node":0,"message-id":[1,0],"operation":{...},"clock":[[0,1]]}
    {"action":"deliver","node":1,"message-id":[1,0],"operation":{...},"clock":[[0,1]]}
    {"action":"partition","nodes":[0]}
    {"action":"heal"}
    {"action":"end","records":3}

The ``init`` header and ``end`` footer frame the action records so that a
file cut short at a line boundary is still detected.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from .causal import LamportId, Message, VectorClock
from .datatype import Datatype, get_datatype
from .network import ACTIONS, Record


class ParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class TraceHeader:
    datatype: str
    nodes: int
    seed: int = 0


def _dumps(obj: dict) -> str:
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False)


def id_to_json(i: LamportId) -> list[int]:
    return [i.counter, i.node]


def id_from_json(v) -> LamportId:
    if not (isinstance(v, list) and len(v) == 2 and all(isinstance(x, int) and x >= 0 for x in v)):
        raise ValueError(f"message id must be [counter, node], got {v!r}")
    return LamportId(*v)


def clock_to_json(c: VectorClock) -> list[list[int]]:
    return [[n, k] for n, k in c.entries]


def clock_from_json(v) -> VectorClock:
    if not isinstance(v, list):
        raise ValueError(f"clock must be a list of [node, count] pairs, got {v!r}")
    return VectorClock.of((int(n), int(k)) for n, k in v)


def message_to_json(m: Message, dt: Datatype) -> dict:
    return {"message-id": id_to_json(m.id), "operation": dt.encode_op(m.op), "clock": clock_to_json(m.clock)}


def message_from_json(d: dict, dt: Datatype) -> Message:
    return Message(id_from_json(d["message-id"]), dt.decode_op(d["operation"]), clock_from_json(d["clock"]))


def record_to_json(rec: Record, dt: Datatype) -> dict:
    out: dict = {"action": rec.action}
    if rec.node is not None:
        out["node"] = rec.node
    if rec.nodes is not None:
        out["nodes"] = list(rec.nodes)
    if rec.msg_id is not None:
        out["message-id"] = id_to_json(rec.msg_id)
    if rec.op is not None:
        out["operation"] = dt.encode_op(rec.op)
    if rec.clock is not None:
        out["clock"] = clock_to_json(rec.clock)
    if rec.forced:
        out["forced"] = True
    return out


def record_from_json(d: dict, dt: Datatype) -> Record:
    action = d.get("action")
    if action not in ACTIONS:
        raise ValueError(f"unknown action {action!r}")
    node = d.get("node")
    if node is not None and not (isinstance(node, int) and node >= 0):
        raise ValueError(f"node must be a non-negative integer, got {node!r}")
    nodes = d.get("nodes")
    return Record(
        action=action,
        node=node,
        msg_id=id_from_json(d["message-id"]) if "message-id" in d else None,
        op=dt.decode_op(d["operation"]) if "operation" in d else None,
        clock=clock_from_json(d["clock"]) if "clock" in d else None,
        nodes=tuple(nodes) if nodes is not None else None,
        forced=bool(d.get("forced", False)),
    )


def dump_lines(header: TraceHeader, records: Iterable[Record]) -> Iterator[str]:
    dt = get_datatype(header.datatype)
    yield _dumps({"action": "init", "datatype": header.datatype, "nodes": header.nodes, "seed": header.seed})
    count = 0
    for rec in records:
        count += 1
        yield _dumps(record_to_json(rec, dt))
    yield _dumps({"action": "end", "records": count})


def dumps(header: TraceHeader, records: Iterable[Record]) -> str:
    return "".join(line + "\n" for line in dump_lines(header, records))


def write_trace(path: str | Path, header: TraceHeader, records: Iterable[Record]) -> None:
    Path(path).write_text(dumps(header, records), encoding="utf-8")


def loads(text: str) -> tuple[TraceHeader, list[Record]]:
    """Parse a complete trace; raises ParseError with the offending line number."""
    header: TraceHeader | None = None
    dt: Datatype | None = None
    records: list[Record] = []
    ended = False
    lines = text.splitlines()
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        if ended:
            raise ParseError("content after end record", lineno)
        try:
            d = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON ({exc.msg})", lineno) from None
        if not isinstance(d, dict):
            raise ParseError("record must be a JSON object", lineno)
        action = d.get("action")
        try:
            if header is None:
                if action != "init":
                    raise ValueError("trace must start with an init record")
                header = TraceHeader(str(d["datatype"]), int(d["nodes"]), int(d.get("seed", 0)))
                dt = get_datatype(header.datatype)
                if header.nodes < 1:
                    raise ValueError("nodes must be at least 1")
            elif action == "end":
                if d.get("records") != len(records):
                    raise ValueError(f"end record counts {d.get('records')} records, found {len(records)}")
                ended = True
            else:
                records.append(record_from_json(d, dt))
        except ParseError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(str(exc), lineno) from None
    if header is None:
        raise ParseError("empty trace", len(lines) or None)
    if not ended:
        raise ParseError("truncated trace: missing end record", len(lines))
    return header, records


def read_trace(path: str | Path) -> tuple[TraceHeader, list[Record]]:
    return loads(Path(path).read_text(encoding="utf-8"))


def merge_node_logs(logs: Sequence[tuple[TraceHeader, list[Record]]]) -> tuple[TraceHeader, list[Record]]:
    """Interleave per-node logs into one replayable global trace.

    Each log holds one node's own broadcast/deliver records in local order.
    A record is emitted once its node's earlier records are out and, for a
    delivery, once the message's broadcast has been emitted.
    """
    if not logs:
        raise ValueError("no logs to merge")
    header = logs[0][0]
    for h, _ in logs:
        if (h.datatype, h.nodes) != (header.datatype, header.nodes):
            raise ValueError("logs disagree on datatype or node count")
    queues = [list(recs) for _, recs in logs]
    cursor = [0] * len(queues)
    emitted: set[LamportId] = set()
    out: list[Record] = []
    while any(c < len(q) for c, q in zip(cursor, queues)):
        progressed = False
        for k, q in enumerate(queues):
            while cursor[k] < len(q):
                rec = q[cursor[k]]
                if rec.action == "deliver" and rec.msg_id not in emitted:
                    break
                if rec.action == "broadcast":
                    emitted.add(rec.msg_id)
                out.append(rec)
                cursor[k] += 1
                progressed = True
        if not progressed:
            stuck = [q[c] for c, q in zip(cursor, queues) if c < len(q)]
            raise ValueError(f"logs deliver messages nobody broadcast: {[str(r.msg_id) for r in stuck]}")
    # a node's local delivery is implied by its broadcast during replay
    return header, _drop_local_deliveries(out)


def _drop_local_deliveries(records: list[Record]) -> list[Record]:
    out = []
    for k, rec in enumerate(records):
        prev = out[-1] if out else None
        if (
            rec.action == "deliver"
            and prev is not None
            and prev.action == "broadcast"
            and prev.node == rec.node
            and prev.msg_id == rec.msg_id
        ):
            continue
        out.append(rec)
    return out
