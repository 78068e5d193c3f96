"""Fuzz campaigns, trace replay, and the brute-force convergence oracle."""

from __future__ import annotations

import json
import random
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator, Sequence

from . import trace
from .causal import LamportId, Message
from .datatype import DATATYPES, Datatype, get_datatype
from .kernel import SecVerdict, apply_operations, audit_sec, concurrent_ops_commute, prefix_states
from .network import (
    EventKind,
    HappensBefore,
    IllegalAction,
    InvalidMessage,
    Record,
    World,
    apply_action,
    audit_axioms,
    audit_datatype,
    broadcast,
    enabled_deliveries,
    inject_fault,
    node_deliver_messages,
    step,
)

VERDICTS = ("converged", "diverged", "axiom_violation", "interpretation_failure")
EXIT_CODES = {"converged": 0, "diverged": 1, "axiom_violation": 2, "interpretation_failure": 2}
DEFAULT_BOUND = 7


class ConfigError(ValueError):
    pass


class BoundExceeded(ValueError):
    pass


@dataclass(frozen=True)
class Scenario:
    datatype: str
    nodes: int = 3
    seed: int = 0
    op_budget: int = 20
    drop_rate: float = 0.0
    crash_rate: float = 0.0
    partition_rate: float = 0.0
    script: tuple[Record, ...] = ()

    def validate(self) -> None:
        if isinstance(self.datatype, str) and self.datatype not in DATATYPES:
            raise ConfigError(f"unknown datatype {self.datatype!r}")
        if self.nodes < 1:
            raise ConfigError("nodes must be at least 1")
        if self.op_budget < 0:
            raise ConfigError("op budget must be non-negative")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        rates = (self.drop_rate, self.crash_rate, self.partition_rate)
        if any(not 0.0 <= r <= 1.0 for r in rates):
            raise ConfigError("fault rates must lie in [0, 1]")
        if sum(rates) > 1.0:
            raise ConfigError("fault rates must sum to at most 1")


@dataclass
class Report:
    datatype: str
    verdict: str
    per_node_final_states: dict[str, Any]
    sec_verdict: SecVerdict | None = None
    axioms: dict[str, dict] = field(default_factory=dict)
    preconditions: dict[str, dict] = field(default_factory=dict)
    witness: dict | None = None
    stats: dict[str, int] = field(default_factory=dict)
    seed: int | None = None

    @property
    def exit_code(self) -> int:
        return EXIT_CODES[self.verdict]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sec_verdict"] = self.sec_verdict.to_dict() if self.sec_verdict else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> Report:
        d = dict(d)
        if d.get("sec_verdict") is not None:
            d["sec_verdict"] = SecVerdict.from_dict(d["sec_verdict"])
        return cls(**d)


def _plain(obj: Any) -> Any:
    """Normalise to what a JSON round trip would give back."""
    return json.loads(json.dumps(obj))


# ---------------------------------------------------------------------------
# reports


def state_diff(a: Any, b: Any) -> dict:
    """Smallest differing region of two rendered states."""
    if isinstance(a, list) and isinstance(b, list):
        p = 0
        while p < min(len(a), len(b)) and a[p] == b[p]:
            p += 1
        s = 0
        while s < min(len(a), len(b)) - p and a[len(a) - 1 - s] == b[len(b) - 1 - s]:
            s += 1
        return {"index": p, "left": a[p : len(a) - s], "right": b[p : len(b) - s]}
    if isinstance(a, dict) and isinstance(b, dict):
        keys = sorted(set(a) | set(b))
        return {"keys": {k: [a.get(k), b.get(k)] for k in keys if a.get(k) != b.get(k)}}
    return {"left": a, "right": b}


def _render_for_witness(dt: Datatype) -> Callable[[Any], Any]:
    def render(x: Any) -> Any:
        if isinstance(x, Message):
            return {"message-id": [x.id.counter, x.id.node], "operation": dt.encode_op(x.op)}
        if x is None:
            return None
        return dt.render_state(x)

    return render


def divergence(world: World) -> dict | None:
    """First pair of nodes with equal delivered sets but different states."""
    render = world.datatype.render_state
    for delivered, nodes in sorted(_groups(world).items(), key=lambda kv: kv[1]):
        first = nodes[0]
        for other in nodes[1:]:
            a, b = world.states[first], world.states[other]
            if a != b:
                ra = None if a is None else render(a)
                rb = None if b is None else render(b)
                return {"nodes": [first, other], "delivered": len(delivered), "diff": state_diff(ra, rb)}
    return None


def world_stats(world: World) -> dict[str, int]:
    counts = {a: 0 for a in ("broadcast", "deliver", "drop", "crash", "partition", "heal")}
    for rec in world.log:
        counts[rec.action] += 1
    stranded = sum(len(world.pending[n]) for n in range(world.n_nodes) if n not in world.failed)
    return {
        "broadcasts": sum(1 for h in world.histories for ev in h if ev.kind is EventKind.BROADCAST),
        "delivers": sum(1 for h in world.histories for ev in h if ev.kind is EventKind.DELIVER),
        "remote_delivers": counts["deliver"],
        "drops": counts["drop"],
        "crashes": counts["crash"],
        "partitions": counts["partition"],
        "failed_nodes": len(world.failed),
        "stranded": stranded,
        "compared_pairs": sum(len(g) * (len(g) - 1) // 2 for g in _groups(world).values()),
    }


def _groups(world: World) -> dict[frozenset, list[int]]:
    groups: dict[frozenset, list[int]] = {}
    for node in range(world.n_nodes):
        groups.setdefault(world.delivered_ids[node], []).append(node)
    return groups


def build_report(world: World) -> Report:
    dt = world.datatype
    hb = HappensBefore.from_world(world)
    render = _render_for_witness(dt)
    sec = audit_sec(
        [node_deliver_messages(h) for h in world.histories],
        hb,
        dt.interpret_message,
        dt.initial,
        render=render,
    )
    axioms = {k: v._asdict() for k, v in audit_axioms(world).items()}
    pre = {k: v._asdict() for k, v in audit_datatype(world).items()}
    div = divergence(world)
    broken = [(k, v["witness"]) for k, v in {**axioms, **pre}.items() if not v["ok"]]

    if world.violations or not sec.no_failure_ok:
        verdict = "interpretation_failure"
        witness = world.violations[0] if world.violations else sec.counterexample
    elif div is not None:
        verdict, witness = "diverged", div
    elif broken:
        verdict, witness = "axiom_violation", {"check": broken[0][0], **(broken[0][1] or {})}
    elif not sec.ok:
        verdict, witness = "axiom_violation", {"check": "sec", **(sec.counterexample or {})}
    else:
        verdict, witness = "converged", None

    states = {
        str(n): None if world.states[n] is None else dt.render_state(world.states[n])
        for n in range(world.n_nodes)
    }
    return Report(
        datatype=dt.name,
        verdict=verdict,
        per_node_final_states=_plain(states),
        sec_verdict=SecVerdict.from_dict(_plain(sec.to_dict())),
        axioms=_plain(axioms),
        preconditions=_plain(pre),
        witness=_plain(witness),
        stats=world_stats(world),
        seed=world.rng_seed,
    )


# ---------------------------------------------------------------------------
# fuzzing


def simulate(scenario: Scenario, datatype: Datatype | None = None) -> World:
    """Drive one seeded run to quiescence and return the final World.

    ``datatype`` overrides the scenario's name, e.g. for test-only datatypes.
    """
    scenario.validate()
    dt = datatype or get_datatype(scenario.datatype)
    rng = random.Random(scenario.seed)
    world = World.create(dt, scenario.nodes, scenario.seed)

    for rec in scenario.script:
        try:
            world = apply_action(world, rec)
        except InvalidMessage:
            # adversarial script: let the invalid message in so the auditors see it
            if rec.action != "broadcast":
                raise
            world = apply_action(world, Record("broadcast", rec.node, op=rec.op, forced=True))

    sent = 0
    while True:
        world = _maybe_fault(world, rng, scenario)
        alive = [n for n in range(world.n_nodes) if n not in world.failed]
        can_broadcast = sent < scenario.op_budget and bool(alive)
        options = enabled_deliveries(world)
        if can_broadcast and (not options or rng.random() < 0.5):
            node = rng.choice(alive)
            op = dt.random_op(rng, world.states[node], world.next_id(node))
            world = broadcast(world, node, op)
            sent += 1
        elif options:
            world = step(world, rng)
        else:
            break

    # quiescence: heal, then deliver everything that can still be delivered
    if world.partitions:
        world = inject_fault(world, Record("heal"))
    while enabled_deliveries(world):
        world = step(world, rng)
    return world


def _maybe_fault(world: World, rng: random.Random, scenario: Scenario) -> World:
    """At most one fault per scheduler step, chosen by a single roll."""
    r = rng.random()
    alive = [n for n in range(world.n_nodes) if n not in world.failed]
    if r < scenario.crash_rate:
        # keep one node alive so the run stays observable
        if len(alive) > 1:
            world = inject_fault(world, Record("crash", rng.choice(alive)))
        return world
    r -= scenario.crash_rate
    if r < scenario.drop_rate:
        in_flight = [(n, m) for n in alive for m in sorted(world.pending[n], key=lambda m: m.id)]
        if in_flight:
            node, m = rng.choice(in_flight)
            world = inject_fault(world, Record("drop", node, m.id))
        return world
    r -= scenario.drop_rate
    if r < scenario.partition_rate:
        if world.partitions:
            return inject_fault(world, Record("heal"))
        side = tuple(n for n in range(world.n_nodes) if rng.random() < 0.5)
        if 0 < len(side) < world.n_nodes:
            world = inject_fault(world, Record("partition", nodes=side))
    return world


def run_fuzz(scenario: Scenario, emit_trace: str | Path | None = None, datatype: Datatype | None = None) -> Report:
    world = simulate(scenario, datatype)
    if emit_trace is not None:
        trace.write_trace(emit_trace, trace.TraceHeader(world.datatype.name, world.n_nodes, scenario.seed), world.log)
    return build_report(world)


def _fuzz_one(scenario: Scenario) -> tuple[int, Report]:
    return scenario.seed, run_fuzz(scenario)


def run_campaign(scenarios: Iterable[Scenario], jobs: int = 1) -> list[tuple[int, Report]]:
    """Run independent scenarios, optionally in parallel; results sorted by seed."""
    scenarios = list(scenarios)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_fuzz_one, scenarios, chunksize=8))
    else:
        results = [_fuzz_one(s) for s in scenarios]
    return sorted(results, key=lambda r: r[0])


# ---------------------------------------------------------------------------
# replay


def replay_records(header: trace.TraceHeader, records: Sequence[Record]) -> World:
    world = World.create(header.datatype, header.nodes, header.seed)
    for k, rec in enumerate(records, 1):
        try:
            world = apply_action(world, rec)
        except IllegalAction as exc:
            raise IllegalAction(f"record {k} ({rec.action}): {exc}") from None
    return world


def replay_trace(*paths: str | Path) -> Report:
    """Re-execute a trace; several per-node logs are merged first."""
    if not paths:
        raise ValueError("no trace given")
    if len(paths) == 1:
        header, records = trace.read_trace(paths[0])
    else:
        header, records = trace.merge_node_logs([trace.read_trace(p) for p in paths])
    return build_report(replay_records(header, records))


# ---------------------------------------------------------------------------
# brute-force oracle


def transitive_closure(items: Sequence[Any], pairs: Iterable[tuple[Any, Any]]) -> set[tuple[Any, Any]]:
    known = set(items)
    rel = set()
    for a, b in pairs:
        if a not in known or b not in known:
            raise ValueError("precedence pair mentions an unknown message")
        rel.add((a, b))
    changed = True
    while changed:
        changed = False
        for a, b in list(rel):
            for c, d in list(rel):
                if b == c and (a, d) not in rel:
                    rel.add((a, d))
                    changed = True
    if any(a == b for a, b in rel):
        raise ValueError("precedence pairs contain a cycle")
    return rel


def linear_extensions(items: Sequence[Any], precedes: Callable[[Any, Any], bool]) -> Iterator[list[Any]]:
    """Every ordering of ``items`` that never puts an element before one of its predecessors."""
    n = len(items)
    preds = [{j for j in range(n) if j != i and precedes(items[j], items[i])} for i in range(n)]
    placed: list[int] = []
    used = [False] * n

    def rec() -> Iterator[list[Any]]:
        if len(placed) == n:
            yield [items[i] for i in placed]
            return
        for i in range(n):
            if not used[i] and all(used[j] for j in preds[i]):
                used[i] = True
                placed.append(i)
                yield from rec()
                placed.pop()
                used[i] = False

    yield from rec()


def brute_force_convergence(
    messages: Sequence[Message],
    precedes: Callable[[Message, Message], bool] | Iterable[tuple[Message, Message]],
    datatype: Datatype | str,
    bound: int = DEFAULT_BOUND,
    initial: Any = None,
) -> Report:
    """Apply every hb-consistent permutation and compare the outcomes."""
    dt = get_datatype(datatype)
    messages = list(messages)
    if len(messages) > bound:
        raise BoundExceeded(f"{len(messages)} messages exceed the brute-force bound of {bound}")
    if not callable(precedes):
        rel = transitive_closure(messages, precedes)
        precedes = lambda a, b: (a, b) in rel  # noqa: E731
    start = dt.initial if initial is None else initial

    results: list[tuple[list[Message], Any]] = []
    probes: dict = {}
    for order in linear_extensions(messages, precedes):
        for s in prefix_states(order, start, dt.interpret_message):
            probes.setdefault(s, None)
        results.append((order, apply_operations(order, start, dt.interpret_message)))

    render = _render_for_witness(dt)
    first_order, first = results[0]
    sec = SecVerdict()
    if any(r is None for _, r in results):
        order = next(o for o, r in results if r is None)
        sec.fail("no_failure_ok", {"order": [str(m.id) for m in order]})
    commute = concurrent_ops_commute(messages, precedes, dt.interpret_message, list(probes))
    if not commute.ok:
        x, y, s = commute.witness
        sec.fail("commutativity_ok", {"x": render(x), "y": render(y), "state": render(s)})

    states = {"permutation-0": render(first)}
    witness = None
    verdict = "converged"
    for k, (order, result) in enumerate(results[1:], 1):
        if result != first:
            verdict = "diverged"
            states[f"permutation-{k}"] = render(result)
            witness = {
                "orders": [[str(m.id) for m in first_order], [str(m.id) for m in order]],
                "diff": state_diff(render(first), render(result)),
            }
            break
    if verdict == "converged" and not sec.no_failure_ok:
        verdict = "interpretation_failure"
        witness = sec.counterexample
    return Report(
        datatype=dt.name,
        verdict=verdict,
        per_node_final_states=_plain(states),
        sec_verdict=SecVerdict.from_dict(_plain(sec.to_dict())),
        witness=_plain(witness),
        stats={"messages": len(messages), "permutations": len(results)},
    )


def load_oracle_spec(path: str | Path) -> tuple[Datatype, list[Message], list[tuple[Message, Message]]]:
    """Read ``{"datatype", "messages": [...], "precedes": [[id, id], ...]}``."""
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        dt = get_datatype(d["datatype"])
        msgs = []
        for md in d["messages"]:
            md = {"clock": [], **md}
            msgs.append(trace.message_from_json(md, dt))
        by_id = {m.id: m for m in msgs}
        if len(by_id) != len(msgs):
            raise ValueError("duplicate message ids")
        pairs = [(by_id[trace.id_from_json(a)], by_id[trace.id_from_json(b)]) for a, b in d.get("precedes", [])]
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise ConfigError(f"bad oracle spec {path}: {exc}") from None
    return dt, msgs, pairs


# ---------------------------------------------------------------------------
# rendering


def render_report(report: Report, fmt: str = "text") -> str:
    if fmt == "json":
        return json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n"
    if fmt != "text":
        raise ValueError(f"unknown report format {fmt!r}")
    lines = [f"datatype: {report.datatype}", f"verdict: {report.verdict}"]
    if report.seed is not None:
        lines.append(f"seed: {report.seed}")
    lines.append("final states:")
    for node, state in sorted(report.per_node_final_states.items(), key=lambda kv: _label_key(kv[0])):
        lines.append(f"  {node}: {json.dumps(state)}")
    if report.axioms:
        lines.append("axioms:")
        for name in sorted(report.axioms):
            lines.append(f"  {name}: {'pass' if report.axioms[name]['ok'] else 'FAIL'}")
    if report.preconditions:
        lines.append("preconditions:")
        for name in sorted(report.preconditions):
            lines.append(f"  {name}: {'pass' if report.preconditions[name]['ok'] else 'FAIL'}")
    if report.sec_verdict is not None:
        flags = report.sec_verdict.to_dict()
        lines.append("sec: " + " ".join(
            f"{k.removesuffix('_ok')}={'ok' if flags[k] else 'FAIL'}" for k in sorted(flags) if k.endswith("_ok")
        ))
    if report.witness is not None:
        lines.append("witness: " + json.dumps(report.witness, sort_keys=True))
    if report.stats:
        lines.append("stats: " + " ".join(f"{k}={v}" for k, v in sorted(report.stats.items())))
    return "\n".join(lines) + "\n"


def _label_key(label: str) -> tuple:
    tail = label.rsplit("-", 1)[-1]
    return (0, int(tail), label) if tail.isdigit() else (1, 0, label)


def parse_report(text: str) -> Report:
    return Report.from_dict(json.loads(text))
