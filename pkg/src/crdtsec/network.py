"""Deterministic causal-broadcast network simulator.

A :class:`World` is an immutable snapshot of every node's event history,
in-flight messages, CRDT state, and fault status.  Each transition returns a
new World.  Every applied action is appended to ``World.log`` as a
:class:`Record`; the log is the trace that ``trace.py`` serialises and that
replays reconstruct.

The six network axioms are enforced by construction (broadcast, delivery
readiness, duplicate suppression, validity) and re-checked after the fact by
:func:`audit_axioms`, which works on any World including hand-built ones.
"""

from __future__ import annotations

import enum
import functools
import random
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterable, NamedTuple, Sequence

from .causal import LamportId, Message, VectorClock, causally_ready, vc_merge
from .datatype import Datatype, get_datatype
from .kernel import apply_operations


class SimulationError(Exception):
    pass


class IllegalAction(SimulationError):
    """An action whose preconditions do not hold in the current World."""


class InvalidMessage(IllegalAction):
    pass


class NodeFailed(IllegalAction):
    pass


class UnknownMessage(SimulationError):
    pass


class Deadlock(SimulationError):
    pass


class EventKind(enum.Enum):
    BROADCAST = "broadcast"
    DELIVER = "deliver"


class Event(NamedTuple):
    kind: EventKind
    message: Message

    def __repr__(self) -> str:
        return f"{self.kind.name.title()}({self.message.id})"


def Broadcast(m: Message) -> Event:
    return Event(EventKind.BROADCAST, m)


def Deliver(m: Message) -> Event:
    return Event(EventKind.DELIVER, m)


ACTIONS = ("broadcast", "deliver", "drop", "crash", "partition", "heal")


@dataclass(frozen=True)
class Record:
    """One simulator action; doubles as a trace line.

    As input, a broadcast needs ``node`` and ``op``; deliver and drop need
    ``node`` and ``msg_id``.  Any other field that is filled in is checked
    against what the simulator actually does.
    """

    action: str
    node: int | None = None
    msg_id: LamportId | None = None
    op: Any = None
    clock: VectorClock | None = None
    nodes: tuple[int, ...] | None = None
    forced: bool = False

    def __post_init__(self):
        if self.action not in ACTIONS:
            raise ValueError(f"unknown action {self.action!r}")

    @classmethod
    def for_message(cls, action: str, node: int, m: Message, forced: bool = False) -> Record:
        return cls(action, node, m.id, m.op, m.clock, forced=forced)


@dataclass(frozen=True)
class World:
    datatype: Datatype
    histories: tuple[tuple[Event, ...], ...]
    pending: tuple[frozenset, ...]
    states: tuple[Any, ...]
    delivered_ids: tuple[frozenset, ...]
    clocks: tuple[VectorClock, ...]
    lamport: tuple[int, ...]
    failed: frozenset = frozenset()
    partitions: tuple[frozenset, ...] = ()
    violations: tuple[dict, ...] = ()
    log: tuple[Record, ...] = ()
    rng_seed: int = 0

    @classmethod
    def create(cls, datatype: Datatype | str, nodes: int, seed: int = 0) -> World:
        if nodes < 1:
            raise ValueError("a world needs at least one node")
        dt = get_datatype(datatype)
        return cls(
            datatype=dt,
            histories=((),) * nodes,
            pending=(frozenset(),) * nodes,
            states=(dt.initial,) * nodes,
            delivered_ids=(frozenset(),) * nodes,
            clocks=(VectorClock(),) * nodes,
            lamport=(0,) * nodes,
            rng_seed=seed,
        )

    @classmethod
    def from_histories(cls, datatype: Datatype | str, histories: Sequence[Sequence[Event]], seed: int = 0) -> World:
        """Build a World around given histories, e.g. for negative controls.

        Derived fields (states, clocks, pending) are recomputed from the
        histories; nothing is validated, which is what :func:`audit_axioms` is for.
        """
        dt = get_datatype(datatype)
        histories = tuple(tuple(h) for h in histories)
        broadcast = {ev.message for h in histories for ev in h if ev.kind is EventKind.BROADCAST}
        states, delivered, clocks, lamport, pending = [], [], [], [], []
        failed, violations = set(), []
        for node, h in enumerate(histories):
            msgs = node_deliver_messages(h)
            state = apply_operations((m.op for m in msgs), dt.initial, dt.interpret)
            if state is None:
                failed.add(node)
                violations.append({"node": node, "kind": "interpretation-failure"})
            states.append(state)
            delivered.append(frozenset(m.id for m in msgs))
            counts: dict[int, int] = {}
            for m in msgs:
                counts[m.sender] = counts.get(m.sender, 0) + 1
            clocks.append(VectorClock.of(counts))
            lamport.append(max((ev.message.id.counter for ev in h), default=0))
            pending.append(frozenset(m for m in broadcast if m.sender != node and m not in msgs))
        return cls(
            datatype=dt,
            histories=histories,
            pending=tuple(pending),
            states=tuple(states),
            delivered_ids=tuple(delivered),
            clocks=tuple(clocks),
            lamport=tuple(lamport),
            failed=frozenset(failed),
            violations=tuple(violations),
            rng_seed=seed,
        )

    @property
    def n_nodes(self) -> int:
        return len(self.histories)

    def next_id(self, node: int) -> LamportId:
        """Id the node's next broadcast will carry."""
        return LamportId(self.lamport[node] + 1, node)

    def messages(self) -> set[Message]:
        return {ev.message for h in self.histories for ev in h}

    def masked(self, sender: int, receiver: int) -> bool:
        return any((sender in p) != (receiver in p) for p in self.partitions)


def _set(t: tuple, i: int, value: Any) -> tuple:
    return (*t[:i], value, *t[i + 1 :])


def _check_node(world: World, node: int | None) -> int:
    if node is None or not 0 <= node < world.n_nodes:
        raise IllegalAction(f"no such node: {node!r}")
    return node


def node_deliver_messages(history: Iterable[Event]) -> list[Message]:
    """Delivered messages in delivery order."""
    return [ev.message for ev in history if ev.kind is EventKind.DELIVER]


# ---------------------------------------------------------------------------
# transitions


def broadcast(
    world: World,
    node: int,
    op: Any,
    valid: Callable[[Any, Message], bool] | None = None,
    forced: bool = False,
) -> World:
    """Broadcast ``op`` from ``node`` and deliver it locally straight away.

    ``forced`` skips the validity check; it exists for adversarial scripts.
    """
    _check_node(world, node)
    if node in world.failed:
        raise NodeFailed(f"node {node} has failed")
    valid = valid or world.datatype.valid
    m = Message(world.next_id(node), op, world.clocks[node].increment(node))
    if not forced and not valid(world.states[node], m):
        raise InvalidMessage(f"node {node} may not broadcast {op!r} in its current state")
    world = replace(
        world,
        histories=_set(world.histories, node, world.histories[node] + (Broadcast(m),)),
        pending=tuple(p if i == node else p | {m} for i, p in enumerate(world.pending)),
        lamport=_set(world.lamport, node, m.id.counter),
        log=world.log + (Record.for_message("broadcast", node, m, forced),),
    )
    return _apply_delivery(world, node, m)


def _apply_delivery(world: World, node: int, m: Message) -> World:
    state = world.states[node]
    new_state = world.datatype.interpret(m.op, state)
    failed, violations = world.failed, world.violations
    if new_state is None:
        failed = failed | {node}
        violations = violations + ({
            "node": node, "kind": "interpretation-failure", "message": str(m.id),
        },)
    return replace(
        world,
        histories=_set(world.histories, node, world.histories[node] + (Deliver(m),)),
        pending=_set(world.pending, node, world.pending[node] - {m}),
        states=_set(world.states, node, new_state),
        delivered_ids=_set(world.delivered_ids, node, world.delivered_ids[node] | {m.id}),
        clocks=_set(world.clocks, node, vc_merge(world.clocks[node], m.clock)),
        lamport=_set(world.lamport, node, max(world.lamport[node], m.id.counter)),
        failed=failed,
        violations=violations,
    )


def deliverable(world: World, node: int) -> set[Message]:
    """Pending messages the node may deliver now."""
    if node in world.failed:
        return set()
    local = world.clocks[node]
    done = world.delivered_ids[node]
    return {
        m
        for m in world.pending[node]
        if m.id not in done
        and not world.masked(m.sender, node)
        and causally_ready(local, m.clock, m.sender)
    }


def enabled_deliveries(world: World) -> list[tuple[int, Message]]:
    """All (node, message) deliveries, in canonical order."""
    return [
        (node, m)
        for node in range(world.n_nodes)
        for m in sorted(deliverable(world, node), key=lambda m: m.id)
    ]


def deliver(world: World, node: int, msg_id: LamportId) -> World:
    _check_node(world, node)
    for m in deliverable(world, node):
        if m.id == msg_id:
            world = _apply_delivery(world, node, m)
            return replace(world, log=world.log + (Record.for_message("deliver", node, m),))
    raise IllegalAction(f"message {msg_id} is not deliverable at node {node}")


def inject_fault(world: World, fault: Record) -> World:
    """Apply a drop, crash, partition, or heal record."""
    kind = fault.action
    if kind == "drop":
        node = _check_node(world, fault.node)
        for m in world.pending[node]:
            if m.id == fault.msg_id:
                return replace(
                    world,
                    pending=_set(world.pending, node, world.pending[node] - {m}),
                    log=world.log + (Record.for_message("drop", node, m),),
                )
        raise IllegalAction(f"message {fault.msg_id} is not in flight to node {node}")
    if kind == "crash":
        node = _check_node(world, fault.node)
        return replace(world, failed=world.failed | {node}, log=world.log + (Record("crash", node),))
    if kind == "partition":
        side = frozenset(fault.nodes or ())
        for n in side:
            _check_node(world, n)
        return replace(
            world,
            partitions=world.partitions + (side,),
            log=world.log + (Record("partition", nodes=tuple(sorted(side))),),
        )
    if kind == "heal":
        return replace(world, partitions=(), log=world.log + (Record("heal"),))
    raise IllegalAction(f"{kind} is not a fault")


def apply_action(world: World, rec: Record) -> World:
    """Execute one scripted record, checking any fields it pins down."""
    if rec.action == "broadcast":
        if rec.node is not None and 0 <= rec.node < world.n_nodes and rec.msg_id is not None:
            expected = world.next_id(rec.node)
            if rec.msg_id != expected:
                raise IllegalAction(f"broadcast would carry id {expected}, record says {rec.msg_id}")
        after = broadcast(world, _check_node(world, rec.node), rec.op, forced=rec.forced)
        if rec.clock is not None and after.log[-1].clock != rec.clock:
            raise IllegalAction(f"broadcast clock mismatch for {rec.msg_id}")
        return after
    if rec.action == "deliver":
        node = _check_node(world, rec.node)
        if rec.op is not None or rec.clock is not None:
            for m in world.pending[node]:
                if m.id == rec.msg_id and (
                    (rec.op is not None and m.op != rec.op) or (rec.clock is not None and m.clock != rec.clock)
                ):
                    raise IllegalAction(f"delivered message {rec.msg_id} differs from the broadcast one")
        return deliver(world, node, rec.msg_id)
    return inject_fault(world, rec)


def step(world: World, choice: random.Random | Record) -> World:
    """Apply exactly one action: a scripted record, or a random enabled delivery."""
    if isinstance(choice, Record):
        return apply_action(world, choice)
    options = enabled_deliveries(world)
    if not options:
        raise Deadlock("no deliverable message")
    node, m = choice.choice(options)
    return deliver(world, node, m.id)


# ---------------------------------------------------------------------------
# happens-before over recorded histories


class HappensBefore:
    """Strict order on messages induced by the recorded histories.

    ``m1`` precedes ``m2`` when the node that broadcast ``m2`` had broadcast or
    delivered ``m1`` earlier, closed under transitivity.
    """

    def __init__(self, histories: Sequence[Sequence[Event]]):
        index: dict[Message, int] = {}
        for h in histories:
            for ev in h:
                index.setdefault(ev.message, len(index))
        direct = [0] * len(index)
        for h in histories:
            seen = 0
            for ev in h:
                bit = 1 << index[ev.message]
                if ev.kind is EventKind.BROADCAST:
                    direct[index[ev.message]] |= seen
                seen |= bit
        self._index = index
        self._anc = _closure(direct)

    @classmethod
    def from_world(cls, world: World) -> HappensBefore:
        return _hb_cached(world.histories)

    def __contains__(self, m: object) -> bool:
        return m in self._index

    def _bit(self, m: Message) -> int:
        try:
            return self._index[m]
        except (KeyError, TypeError):
            raise UnknownMessage(f"message {getattr(m, 'id', m)} appears in no history") from None

    def __call__(self, m1: Message, m2: Message) -> bool:
        return bool(self._anc[self._bit(m2)] >> self._bit(m1) & 1)

    def ancestors(self, m: Message) -> list[Message]:
        mask = self._anc[self._bit(m)]
        return [x for x, i in self._index.items() if mask >> i & 1]


def _closure(direct: list[int]) -> list[int]:
    n = len(direct)
    anc = list(direct)
    changed = True
    # bitset fixpoint; converges in at most depth-of-chain rounds
    while changed:
        changed = False
        for i in range(n):
            acc = anc[i]
            mask = acc
            while mask:
                low = mask & -mask
                j = low.bit_length() - 1
                acc |= anc[j]
                mask ^= low
            if acc != anc[i]:
                anc[i] = acc
                changed = True
    return anc


@functools.lru_cache(maxsize=32)
def _hb_cached(histories: tuple) -> HappensBefore:
    return HappensBefore(histories)


def happens_before(world: World, m1: Message, m2: Message) -> bool:
    return HappensBefore.from_world(world)(m1, m2)


# ---------------------------------------------------------------------------
# axiom audit


class AxiomResult(NamedTuple):
    ok: bool
    witness: dict | None = None


AXIOMS = (
    "histories-distinct",
    "delivery-has-a-cause",
    "deliver-locally",
    "msg-id-unique",
    "causal-delivery",
    "broadcast-only-valid-msgs",
)


def audit_axioms(world: World) -> dict[str, AxiomResult]:
    """Check the six network axioms against the recorded histories."""
    checks = {
        "histories-distinct": _histories_distinct,
        "delivery-has-a-cause": _delivery_has_a_cause,
        "deliver-locally": _deliver_locally,
        "msg-id-unique": _msg_id_unique,
        "causal-delivery": _causal_delivery,
        "broadcast-only-valid-msgs": _broadcast_only_valid,
    }
    out = {}
    for name, check in checks.items():
        witness = check(world)
        out[name] = AxiomResult(witness is None, witness)
    return out


def _ev(ev: Event) -> dict:
    return {"event": ev.kind.value, "message": str(ev.message.id)}


def _histories_distinct(world: World) -> dict | None:
    for node, h in enumerate(world.histories):
        first: dict[Event, int] = {}
        for k, ev in enumerate(h):
            if ev in first:
                return {"node": node, **_ev(ev), "positions": [first[ev], k]}
            first[ev] = k
    return None


def _delivery_has_a_cause(world: World) -> dict | None:
    sent = {ev.message for h in world.histories for ev in h if ev.kind is EventKind.BROADCAST}
    for node, h in enumerate(world.histories):
        for k, ev in enumerate(h):
            if ev.kind is EventKind.DELIVER and ev.message not in sent:
                return {"node": node, **_ev(ev), "position": k}
    return None


def _deliver_locally(world: World) -> dict | None:
    for node, h in enumerate(world.histories):
        for k, ev in enumerate(h):
            if ev.kind is EventKind.BROADCAST and Deliver(ev.message) not in h[k + 1 :]:
                return {"node": node, **_ev(ev), "position": k}
    return None


def _msg_id_unique(world: World) -> dict | None:
    seen: dict[LamportId, tuple[int, Message]] = {}
    for node, h in enumerate(world.histories):
        for ev in h:
            if ev.kind is not EventKind.BROADCAST:
                continue
            m = ev.message
            if m.id in seen and seen[m.id] != (node, m):
                other_node, _ = seen[m.id]
                return {"message": str(m.id), "nodes": [other_node, node]}
            seen.setdefault(m.id, (node, m))
    return None


def _causal_delivery(world: World) -> dict | None:
    hb = HappensBefore.from_world(world)
    for node, h in enumerate(world.histories):
        position: dict[Message, int] = {}
        for k, ev in enumerate(h):
            if ev.kind is EventKind.DELIVER:
                position.setdefault(ev.message, k)
        for k, ev in enumerate(h):
            if ev.kind is not EventKind.DELIVER:
                continue
            for m1 in hb.ancestors(ev.message):
                if position.get(m1, k) >= k:
                    return {
                        "node": node,
                        "delivered": str(ev.message.id),
                        "position": k,
                        "missing_prior": str(m1.id),
                    }
    return None


def _broadcast_only_valid(world: World) -> dict | None:
    dt = world.datatype
    for node, h in enumerate(world.histories):
        state = dt.initial
        for k, ev in enumerate(h):
            m = ev.message
            if ev.kind is EventKind.DELIVER:
                if state is not None:
                    state = dt.interpret(m.op, state)
            elif state is None or not dt.valid(state, m):
                return {"node": node, **_ev(ev), "position": k}
    return None


def audit_datatype(world: World) -> dict[str, AxiomResult]:
    """Datatype-specific precondition audits (e.g. RGA anchors, ORSet tags)."""
    out = {}
    for name, fn in world.datatype.audits.items():
        witnesses = fn(world)
        out[name] = AxiomResult(not witnesses, witnesses[0] if witnesses else None)
    return out
