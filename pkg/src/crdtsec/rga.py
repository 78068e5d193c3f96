"""Replicated Growable Array: an ordered sequence with tombstoned deletes.

The list functions below are written as direct recursions over the element
list (iteratively, to avoid Python's recursion limit) and are the reference
semantics.  Concurrent inserts at the same anchor end up ordered by
descending id.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Any, NamedTuple, Optional, Sequence

from .causal import LamportId, Message
from .datatype import Datatype

VALUES = "abcdefgh"


class Elt(NamedTuple):
    id: LamportId
    value: Any
    deleted: bool = False


RgaState = tuple  # tuple[Elt, ...]


@dataclass(frozen=True)
class Insert:
    elt: Elt
    after: Optional[LamportId] = None


@dataclass(frozen=True)
class Delete:
    target: LamportId


RgaOp = Insert | Delete


def insert_body(xs: Sequence[Elt], e: Elt) -> tuple[Elt, ...]:
    """Skip elements with greater ids, then place ``e`` before the first lesser one."""
    for k, x in enumerate(xs):
        if x.id < e.id:
            return (*xs[:k], e, *xs[k:])
    return (*xs, e)


def rga_insert(xs: Sequence[Elt], e: Elt, after: LamportId | None) -> tuple[Elt, ...] | None:
    if after is None:
        return insert_body(xs, e)
    for k, x in enumerate(xs):
        if x.id == after:
            return (*xs[: k + 1], *insert_body(xs[k + 1 :], e))
    return None


def rga_delete(xs: Sequence[Elt], target: LamportId) -> tuple[Elt, ...] | None:
    for k, x in enumerate(xs):
        if x.id == target:
            return (*xs[:k], x._replace(deleted=True), *xs[k + 1 :])
    return None


def rga_interpret(op: RgaOp, xs: RgaState) -> RgaState | None:
    if isinstance(op, Insert):
        return rga_insert(xs, op.elt, op.after)
    if isinstance(op, Delete):
        return rga_delete(xs, op.target)
    raise TypeError(f"not an RGA operation: {op!r}")


def rga_validity(xs: RgaState, m: Message) -> bool:
    op = m.op
    ids = {x.id for x in xs}
    if isinstance(op, Insert):
        return op.elt.id == m.id and (op.after is None or op.after in ids)
    if isinstance(op, Delete):
        return op.target in ids
    return False


def rga_read(xs: RgaState) -> list:
    return [x.value for x in xs if not x.deleted]


def _id_json(i: LamportId | None) -> list[int] | None:
    return None if i is None else [i.counter, i.node]


def encode_op(op: RgaOp) -> dict:
    if isinstance(op, Insert):
        if op.elt.deleted:
            raise ValueError("inserted elements cannot start tombstoned")
        return {"type": "rga", "op": "ins", "id": _id_json(op.elt.id), "val": op.elt.value,
                "after": _id_json(op.after)}
    return {"type": "rga", "op": "del", "id": _id_json(op.target)}


def decode_op(d: dict) -> RgaOp:
    if d.get("type") != "rga":
        raise ValueError(f"not an rga payload: {d!r}")
    if d["op"] == "ins":
        after = d.get("after")
        return Insert(Elt(LamportId(*d["id"]), d["val"]), None if after is None else LamportId(*after))
    if d["op"] == "del":
        return Delete(LamportId(*d["id"]))
    raise ValueError(f"unknown rga op {d['op']!r}")


def render_state(xs: RgaState) -> list:
    return [[_id_json(x.id), x.value, x.deleted] for x in xs]


def random_op(rng: random.Random, xs: RgaState, msg_id: LamportId) -> RgaOp:
    if xs and rng.random() < 0.3:
        return Delete(rng.choice(xs).id)
    after = rng.choice(xs).id if xs and rng.random() < 0.75 else None
    return Insert(Elt(msg_id, rng.choice(VALUES)), after)


# ---------------------------------------------------------------------------
# execution audits


def _introduced_before(history, upto: int) -> set:
    from .network import EventKind

    return {
        ev.message.op.elt.id
        for ev in history[:upto]
        if ev.kind is EventKind.DELIVER and isinstance(ev.message.op, Insert)
    }


def allowed_insert(world) -> list[dict]:
    """Each anchored Insert follows, at its broadcaster, delivery of the anchor's Insert."""
    from .network import EventKind

    out = []
    for node, history in enumerate(world.histories):
        for k, ev in enumerate(history):
            op = ev.message.op
            if ev.kind is EventKind.BROADCAST and isinstance(op, Insert) and op.after is not None:
                if op.after not in _introduced_before(history, k):
                    out.append({"node": node, "message": str(ev.message.id), "anchor": str(op.after)})
    return out


def allowed_delete(world) -> list[dict]:
    """Each Delete follows, at its broadcaster, delivery of the target's Insert."""
    from .network import EventKind

    out = []
    for node, history in enumerate(world.histories):
        for k, ev in enumerate(history):
            op = ev.message.op
            if ev.kind is EventKind.BROADCAST and isinstance(op, Delete):
                if op.target not in _introduced_before(history, k):
                    out.append({"node": node, "message": str(ev.message.id), "target": str(op.target)})
    return out


DATATYPE = Datatype(
    name="rga",
    initial=(),
    interpret=rga_interpret,
    valid=rga_validity,
    encode_op=encode_op,
    decode_op=decode_op,
    render_state=render_state,
    random_op=random_op,
    audits={"allowed-insert": allowed_insert, "allowed-delete": allowed_delete},
)
