"""Operation-based observed-remove set (add wins over concurrent remove).

State maps each element to the identifiers of the additions that are still
live; an element is a member iff that set is non-empty.  Removes carry the
identifiers the remover had observed, so a concurrent add survives.
"""

from __future__ import annotations

import random
from collections.abc import Mapping
from dataclasses import dataclass
from typing import Any, Hashable, Iterator

from .causal import LamportId, Message
from .datatype import Datatype

ELEMENTS = "abcd"


@dataclass(frozen=True)
class Add:
    id: LamportId
    elem: Hashable


@dataclass(frozen=True)
class Rem:
    ids: frozenset
    elem: Hashable

    def __init__(self, ids, elem):
        object.__setattr__(self, "ids", frozenset(LamportId(*i) for i in ids))
        object.__setattr__(self, "elem", elem)


ORSetOp = Add | Rem


class ORSetState(Mapping):
    """Immutable element -> frozenset-of-ids mapping with empty sets dropped."""

    __slots__ = ("_tags", "_hash")

    def __init__(self, tags: Mapping[Any, Any] | None = None):
        self._tags = {e: frozenset(ids) for e, ids in (tags or {}).items() if ids}
        self._hash = None

    def __getitem__(self, elem: Any) -> frozenset:
        return self._tags.get(elem, frozenset())

    def __contains__(self, elem: object) -> bool:
        return elem in self._tags

    def __iter__(self) -> Iterator:
        return iter(self._tags)

    def __len__(self) -> int:
        return len(self._tags)

    def __eq__(self, other: object) -> bool:
        if isinstance(other, ORSetState):
            return self._tags == other._tags
        return NotImplemented

    def __hash__(self) -> int:
        if self._hash is None:
            self._hash = hash(frozenset(self._tags.items()))
        return self._hash

    def set(self, elem: Any, ids: frozenset) -> ORSetState:
        tags = dict(self._tags)
        tags[elem] = ids
        return ORSetState(tags)

    def __repr__(self) -> str:
        inner = ", ".join(
            f"{e!r}: {{{', '.join(str(i) for i in sorted(ids))}}}" for e, ids in sorted(self._tags.items())
        )
        return f"ORSetState({{{inner}}})"


EMPTY = ORSetState()


def op_elem(op: ORSetOp) -> Any:
    return op.elem


def orset_interpret(op: ORSetOp, state: ORSetState) -> ORSetState:
    before = state[op.elem]
    if isinstance(op, Add):
        after = before | {op.id}
    elif isinstance(op, Rem):
        after = before - op.ids
    else:
        raise TypeError(f"not an ORSet operation: {op!r}")
    return state.set(op.elem, after)


def orset_validity(state: ORSetState, m: Message) -> bool:
    op = m.op
    if isinstance(op, Add):
        return op.id == m.id
    if isinstance(op, Rem):
        return op.ids == state[op.elem]
    return False


def orset_members(state: Mapping) -> frozenset:
    return frozenset(e for e, ids in state.items() if ids)


def _id_json(i: LamportId) -> list[int]:
    return [i.counter, i.node]


def encode_op(op: ORSetOp) -> dict:
    if isinstance(op, Add):
        return {"type": "orset", "op": "add", "elem": op.elem, "id": _id_json(op.id)}
    return {"type": "orset", "op": "rem", "elem": op.elem, "ids": [_id_json(i) for i in sorted(op.ids)]}


def decode_op(d: dict) -> ORSetOp:
    if d.get("type") != "orset":
        raise ValueError(f"not an orset payload: {d!r}")
    if d["op"] == "add":
        return Add(LamportId(*d["id"]), d["elem"])
    if d["op"] == "rem":
        return Rem([LamportId(*i) for i in d["ids"]], d["elem"])
    raise ValueError(f"unknown orset op {d['op']!r}")


def render_state(state: ORSetState) -> dict:
    return {str(e): [_id_json(i) for i in sorted(state[e])] for e in sorted(state, key=str)}


def random_op(rng: random.Random, state: ORSetState, msg_id: LamportId) -> ORSetOp:
    if state and rng.random() < 0.4:
        elem = rng.choice(sorted(state, key=str))
        return Rem(state[elem], elem)
    if rng.random() < 0.1:
        # removing an absent element is valid: it observed no additions
        elem = rng.choice(ELEMENTS)
        return Rem(state[elem], elem)
    return Add(msg_id, rng.choice(ELEMENTS))


# ---------------------------------------------------------------------------
# execution audits


def concurrent_add_remove_independent(world) -> list[dict]:
    """Concurrent Add i / Rem is of the same element always have i not in is."""
    from .network import HappensBefore, node_deliver_messages

    hb = HappensBefore.from_world(world)
    out = []
    for node, history in enumerate(world.histories):
        msgs = node_deliver_messages(history)
        adds = [m for m in msgs if isinstance(m.op, Add)]
        rems = [m for m in msgs if isinstance(m.op, Rem)]
        for a in adds:
            for r in rems:
                if a.op.id in r.op.ids:
                    if not hb(a, r) and not hb(r, a):
                        out.append({"node": node, "add": str(a.id), "rem": str(r.id)})
    return out


def tags_were_added(world) -> list[dict]:
    """Every identifier in a prefix state came from a delivered Add of that element."""
    from .network import node_deliver_messages

    out = []
    for node, history in enumerate(world.histories):
        state = EMPTY
        added: dict[Any, set] = {}
        for k, m in enumerate(node_deliver_messages(history)):
            if isinstance(m.op, Add):
                added.setdefault(m.op.elem, set()).add(m.op.id)
            state = orset_interpret(m.op, state)
            for elem in state:
                extra = state[elem] - added.get(elem, set())
                if extra:
                    out.append({"node": node, "index": k, "elem": str(elem),
                                "ids": [str(i) for i in sorted(extra)]})
    return out


DATATYPE = Datatype(
    name="orset",
    initial=EMPTY,
    interpret=orset_interpret,
    valid=orset_validity,
    encode_op=encode_op,
    decode_op=decode_op,
    render_state=render_state,
    random_op=random_op,
    audits={
        "concurrent-add-remove-independent": concurrent_add_remove_independent,
        "tags-were-added": tags_were_added,
    },
)
