"""Increment/decrement counter over unbounded integers."""

from __future__ import annotations

import enum
import random

from .causal import LamportId, Message
from .datatype import Datatype


class CounterOp(enum.Enum):
    INCREMENT = "inc"
    DECREMENT = "dec"


Increment = CounterOp.INCREMENT
Decrement = CounterOp.DECREMENT


def counter_interpret(op: CounterOp, value: int) -> int:
    if op is CounterOp.INCREMENT:
        return value + 1
    if op is CounterOp.DECREMENT:
        return value - 1
    raise TypeError(f"not a counter operation: {op!r}")


def counter_validity(state: int, m: Message) -> bool:
    return True


def encode_op(op: CounterOp) -> dict:
    return {"type": "counter", "op": op.value}


def decode_op(d: dict) -> CounterOp:
    if d.get("type") != "counter":
        raise ValueError(f"not a counter payload: {d!r}")
    return CounterOp(d["op"])


def random_op(rng: random.Random, state: int, msg_id: LamportId) -> CounterOp:
    return rng.choice((Increment, Decrement))


DATATYPE = Datatype(
    name="counter",
    initial=0,
    interpret=counter_interpret,
    valid=counter_validity,
    encode_op=encode_op,
    decode_op=decode_op,
    render_state=lambda value: value,
    random_op=random_op,
)
