"""Logical time: Lamport identifiers, vector clocks, and hb-consistency.

Message identifiers are ``(counter, node)`` pairs ordered lexicographically.
Counters follow the classic logical-clock rule, so the identifier order is
consistent with happens-before: if ``m1`` precedes ``m2`` then
``m1.id < m2.id``.  The RGA insertion rule depends on that.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Mapping, NamedTuple, Sequence, TypeVar

T = TypeVar("T")


class LamportId(NamedTuple):
    """Globally unique message identifier, totally ordered by (counter, node)."""

    counter: int
    node: int

    def __str__(self) -> str:
        return f"{self.counter}@{self.node}"

    @classmethod
    def parse(cls, text: str) -> LamportId:
        """Parse ``"3@1"`` (or ``"3,1"``) into ``LamportId(3, 1)``."""
        sep = "@" if "@" in text else ","
        counter, _, node = text.strip().partition(sep)
        if not _ or not counter.isdigit() or not node.isdigit():
            raise ValueError(f"bad message id: {text!r}")
        return cls(int(counter), int(node))


def lamport_compare(a: LamportId, b: LamportId) -> int:
    """Three-way compare: -1, 0 or 1."""
    a, b = tuple(a), tuple(b)
    return (a > b) - (a < b)


@dataclass(frozen=True)
class VectorClock:
    """Immutable map node -> count; absent entries are zero.

    Zero entries are never stored, so equality and hashing are structural.
    """

    entries: tuple[tuple[int, int], ...] = ()

    @classmethod
    def of(cls, mapping: Mapping[int, int] | Iterable[tuple[int, int]] = ()) -> VectorClock:
        items = mapping.items() if isinstance(mapping, Mapping) else mapping
        merged: dict[int, int] = {}
        for node, count in items:
            if count < 0:
                raise ValueError("vector clock entries must be non-negative")
            merged[node] = count
        return cls(tuple(sorted((n, c) for n, c in merged.items() if c)))

    def __getitem__(self, node: int) -> int:
        for n, c in self.entries:
            if n == node:
                return c
        return 0

    def as_dict(self) -> dict[int, int]:
        return dict(self.entries)

    def increment(self, node: int) -> VectorClock:
        d = self.as_dict()
        d[node] = d.get(node, 0) + 1
        return VectorClock.of(d)

    def merge(self, other: VectorClock) -> VectorClock:
        return vc_merge(self, other)

    def __le__(self, other: VectorClock) -> bool:
        return vc_leq(self, other)

    def __repr__(self) -> str:
        return f"VectorClock({self.as_dict()})"


def vc_merge(a: VectorClock, b: VectorClock) -> VectorClock:
    """Component-wise maximum."""
    d = a.as_dict()
    for node, count in b.entries:
        d[node] = max(d.get(node, 0), count)
    return VectorClock.of(d)


def vc_leq(a: VectorClock, b: VectorClock) -> bool:
    return all(count <= b[node] for node, count in a.entries)


def causally_ready(local: VectorClock, clock: VectorClock, sender: int) -> bool:
    """Delivery readiness of a message stamped ``clock`` from ``sender``.

    The message must be the sender's next one, and everything else it had
    seen must already be delivered locally.
    """
    if clock[sender] != local[sender] + 1:
        return False
    return all(count <= local[node] for node, count in clock.entries if node != sender)


@dataclass(frozen=True)
class Message:
    """Unit of broadcast: a unique id, an operation, and causal metadata."""

    id: LamportId
    op: Any
    clock: VectorClock = VectorClock()

    @property
    def sender(self) -> int:
        return self.id.node

    def __repr__(self) -> str:
        return f"Message({self.id}, {self.op!r})"


class Precedence(enum.Enum):
    FIRST = "first-precedes"
    SECOND = "second-precedes"
    CONCURRENT = "concurrent"


def relation(precedes: Callable[[T, T], bool], x: T, y: T) -> Precedence:
    """Classify a pair under a strict partial order."""
    if precedes(x, y):
        return Precedence.FIRST
    if precedes(y, x):
        return Precedence.SECOND
    return Precedence.CONCURRENT


def concurrent(precedes: Callable[[T, T], bool], x: T, y: T) -> bool:
    return not precedes(x, y) and not precedes(y, x)


def hb_consistent(ops: Sequence[T], precedes: Callable[[T, T], bool]) -> bool:
    """True iff no element happens-before an element placed earlier."""
    return hb_violation(ops, precedes) is None


def hb_violation(ops: Sequence[T], precedes: Callable[[T, T], bool]) -> tuple[int, int] | None:
    """First index pair ``(i, j)``, ``i < j``, where ``ops[j]`` precedes ``ops[i]``."""
    for j in range(len(ops)):
        y = ops[j]
        for i in range(j):
            if precedes(y, ops[i]):
                return i, j
    return None
