"""Descriptor bundling everything the simulator and checker need per CRDT."""

from __future__ import annotations

import importlib
import random
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

from .causal import LamportId, Message


@dataclass(frozen=True, eq=False)
class Datatype:
    name: str
    initial: Any
    interpret: Callable[[Any, Any], Optional[Any]]
    valid: Callable[[Any, Message], bool]
    encode_op: Callable[[Any], dict]
    decode_op: Callable[[dict], Any]
    render_state: Callable[[Any], Any]
    random_op: Callable[[random.Random, Any, LamportId], Any]
    # name -> callable(world) returning a list of witness dicts (empty = holds)
    audits: dict[str, Callable[[Any], list]] = field(default_factory=dict)

    def interpret_message(self, m: Message, state: Any) -> Any | None:
        return self.interpret(m.op, state)

    def __repr__(self) -> str:
        return f"Datatype({self.name})"


DATATYPES = ("counter", "orset", "rga")


def get_datatype(name: str | Datatype) -> Datatype:
    if isinstance(name, Datatype):
        return name
    if name not in DATATYPES:
        raise KeyError(f"unknown datatype {name!r}; choose from {', '.join(DATATYPES)}")
    return importlib.import_module(f"crdtsec.{name}").DATATYPE
