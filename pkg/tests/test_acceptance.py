"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Independent oracles used here: permutation filtering instead of the
library's linear-extension search, a plain fold instead of the kernel, and
vector-clock comparison instead of history-derived happens-before.
"""

import json
import random
import subprocess
import sys
import time

import pytest

from crdtsec import counter, orset, rga, trace
from crdtsec.causal import LamportId, Message, VectorClock, hb_consistent, vc_leq
from crdtsec.checker import (
    Scenario,
    brute_force_convergence,
    build_report,
    render_report,
    replay_records,
    replay_trace,
    run_fuzz,
    simulate,
)
from crdtsec.datatype import DATATYPES, get_datatype
from crdtsec.kernel import audit_sec, kleisli_compose, transformer
from crdtsec.network import (
    Broadcast,
    Deliver,
    HappensBefore,
    Record,
    World,
    audit_axioms,
    audit_datatype,
    enabled_deliveries,
    node_deliver_messages,
)
from helpers import Cluster, fold, hb_orders, lid, random_message_set, random_rga_state

ORACLE_SETS = 1000
FUZZ_RUNS = 500
LEMMA_CASES = 10_000


# ---------------------------------------------------------------------------
# 1. brute-force convergence oracle


def test_1_brute_force_oracle(criterion):
    start = time.monotonic()
    bad, orders, per_type = [], 0, {}
    for datatype in DATATYPES:
        dt = get_datatype(datatype)
        rng = random.Random(f"oracle-{datatype}")
        sizes = []
        for k in range(ORACLE_SETS):
            msgs, pairs = random_message_set(rng, datatype, max_size=6)
            sizes.append(len(msgs))
            outcomes = {repr(fold(dt, [m.op for m in o], dt.initial)) for o in hb_orders(msgs, pairs)}
            lib = brute_force_convergence(msgs, pairs, dt)
            n_orders = sum(1 for _ in hb_orders(msgs, pairs))
            orders += n_orders
            if len(outcomes) != 1 or lib.verdict != "converged" or lib.stats["permutations"] != n_orders:
                bad.append((datatype, k, lib.verdict, len(outcomes)))
        per_type[datatype] = f"{ORACLE_SETS} sets, max size {max(sizes)}"
    elapsed = time.monotonic() - start
    ok = not bad and elapsed < 60
    detail = f"{3 * ORACLE_SETS} sets, {orders} hb-consistent orders, {len(bad)} divergent, {elapsed:.1f}s"
    criterion(1, "brute-force oracle", ok, detail + (f"; first failure {bad[0]}" if bad else ""))


# ---------------------------------------------------------------------------
# fuzz campaign shared by criteria 2, 4 and 5


def _scenario(datatype: str, k: int) -> Scenario:
    rng = random.Random(f"campaign-{datatype}-{k}")
    return Scenario(
        datatype=datatype,
        nodes=rng.randint(1, 5),
        seed=k,
        op_budget=rng.randint(0, 40),
        drop_rate=rng.choice([0.0, 0.0, 0.01, 0.05, 0.1, 0.2]),
        crash_rate=rng.choice([0.0, 0.0, 0.005, 0.02, 0.05]),
        partition_rate=rng.choice([0.0, 0.0, 0.05]),
    )


def _vc_precedes(a: Message, b: Message) -> bool:
    return a != b and vc_leq(a.clock, b.clock)


def _audit_run(scenario: Scenario) -> dict:
    world = simulate(scenario)
    dt = world.datatype
    report = build_report(world)
    hb = HappensBefore(world.histories)

    groups: dict[frozenset, list[int]] = {}
    for node in range(world.n_nodes):
        groups.setdefault(world.delivered_ids[node], []).append(node)
    pairs = unequal = 0
    for nodes in groups.values():
        for a, b in zip(nodes, nodes[1:]):
            pairs += 1
            unequal += world.states[a] != world.states[b]

    hb_bad = vc_bad = no_failure_bad = 0
    for h in world.histories:
        delivered = node_deliver_messages(h)
        hb_bad += not hb_consistent(delivered, hb)
        vc_bad += not hb_consistent(delivered, _vc_precedes)
        no_failure_bad += fold(dt, [m.op for m in delivered], dt.initial) is None

    msgs = sorted(world.messages(), key=lambda m: m.id)
    hb_agrees = all(hb(a, b) == _vc_precedes(a, b) for a in msgs for b in msgs)

    return {
        "datatype": dt.name,
        "verdict": report.verdict,
        "quiescent": not enabled_deliveries(world) and not world.partitions,
        "compared_pairs": pairs,
        "unequal_pairs": unequal,
        "axioms": {k: v.ok for k, v in audit_axioms(world).items()},
        "preconditions": {k: v.ok for k, v in audit_datatype(world).items()},
        "violations": len(world.violations),
        "no_failure_bad": no_failure_bad,
        "hb_bad": hb_bad,
        "vc_bad": vc_bad,
        "hb_agrees_with_clocks": hb_agrees,
        "sec_no_failure": report.sec_verdict.no_failure_ok,
        "sec_causality": report.sec_verdict.causality_ok,
        "messages": len(msgs),
    }


@pytest.fixture(scope="module")
def campaign():
    start = time.monotonic()
    runs = [_audit_run(_scenario(d, k)) for d in DATATYPES for k in range(FUZZ_RUNS)]
    return runs, time.monotonic() - start


def test_2_fuzzed_convergence(criterion, campaign):
    runs, elapsed = campaign
    failing = [r for r in runs if not (
        r["quiescent"] and r["unequal_pairs"] == 0 and r["verdict"] == "converged" and all(r["axioms"].values())
    )]
    compared = sum(r["compared_pairs"] for r in runs)
    non_vacuous = sum(r["compared_pairs"] > 0 for r in runs)
    ok = not failing and elapsed < 300 and all(
        sum(r["datatype"] == d for r in runs) >= FUZZ_RUNS for d in DATATYPES
    )
    detail = (
        f"{len(runs)} runs ({FUZZ_RUNS} per datatype), {compared} equal-set node pairs compared "
        f"in {non_vacuous} runs, {len(failing)} failing, {elapsed:.1f}s"
    )
    criterion(2, "fuzzed end-to-end convergence", ok, detail)


def test_4_precondition_audits(criterion, campaign):
    runs, _ = campaign
    names = {"rga": {"allowed-insert", "allowed-delete"}, "orset": {"concurrent-add-remove-independent"}}
    missing = [r for r in runs if not names.get(r["datatype"], set()) <= set(r["preconditions"])]
    violated = [r for r in runs if not all(r["preconditions"].values())]
    failures = [r for r in runs if r["violations"] or r["no_failure_bad"] or not r["sec_no_failure"]]
    checked = sum(len(r["preconditions"]) for r in runs)
    ok = not missing and not violated and not failures
    detail = f"{checked} audit evaluations, {len(violated)} violations, {len(failures)} interpretation failures"
    criterion(4, "precondition-discharge audits", ok, detail)


def test_5_hb_consistent_deliveries(criterion, campaign):
    runs, _ = campaign
    bad = sum(r["hb_bad"] + r["vc_bad"] for r in runs)
    disagree = sum(not r["hb_agrees_with_clocks"] for r in runs)
    causality = sum(not r["sec_causality"] for r in runs)
    ok = bad == 0 and disagree == 0 and causality == 0
    detail = (
        f"{len(runs)} runs, {bad} inconsistent node sequences, "
        f"history order vs vector clocks disagree in {disagree} runs"
    )
    criterion(5, "hb-consistency of deliveries", ok, detail)


# ---------------------------------------------------------------------------
# 3. commutativity lemmas


def _commutes(interp, x, y, s) -> bool:
    tx, ty = transformer(interp, x), transformer(interp, y)
    return kleisli_compose(tx, ty)(s) == kleisli_compose(ty, tx)(s)


def _orset_state(rng):
    return orset.ORSetState({
        e: {lid(rng.randint(1, 8), rng.randint(0, 2)) for _ in range(rng.randint(0, 4))} for e in "xyz"
    })


def _some_ids(rng):
    return {lid(rng.randint(1, 8), rng.randint(0, 2)) for _ in range(rng.randint(0, 4))}


def _rga_case(rng):
    xs = random_rga_state(rng, rng.randint(0, 8))
    pool = [x.id for x in xs] + [lid(40, 0), lid(41, 1)]
    return xs, pool


def test_3_commutativity_lemmas(criterion):
    rng = random.Random("lemmas")
    counts: dict[str, list[int]] = {}

    def tally(name, ok):
        c = counts.setdefault(name, [0, 0])
        c[0] += 1
        c[1] += not ok

    ci = counter.counter_interpret
    states = [rng.randint(-10**9, 10**9) for _ in range(100)]
    for x in counter.CounterOp:
        for y in counter.CounterOp:
            for s in states:
                tally("counter", _commutes(ci, x, y, s))

    oi = orset.orset_interpret
    for _ in range(LEMMA_CASES):
        s = _orset_state(rng)
        add = lambda: orset.Add(lid(rng.randint(1, 8), rng.randint(0, 2)), rng.choice("xyz"))  # noqa: E731
        rem = lambda: orset.Rem(_some_ids(rng), rng.choice("xyz"))  # noqa: E731
        tally("orset add/add", _commutes(oi, add(), add(), s))
        tally("orset rem/rem", _commutes(oi, rem(), rem(), s))
        r = rem()
        a = add()
        while a.id in r.ids:
            a = add()
        tally("orset add/rem (i not in is)", _commutes(oi, a, r, s))

    ri = rga.rga_interpret
    done = {"ins/ins": 0, "ins/del": 0}
    for _ in range(LEMMA_CASES):
        xs, pool = _rga_case(rng)
        tally("rga del/del", _commutes(ri, rga.Delete(rng.choice(pool)), rga.Delete(rng.choice(pool)), xs))
    while min(done.values()) < LEMMA_CASES:
        xs, pool = _rga_case(rng)
        e1 = rga.Elt(lid(rng.randint(1, 14), rng.randint(0, 2)), "p")
        e2 = rga.Elt(lid(rng.randint(1, 14), rng.randint(0, 2)), "q")
        i1 = rng.choice([None, e2.id, *pool])
        i2 = rng.choice([None, e1.id, *pool])
        if done["ins/ins"] < LEMMA_CASES and e1.id != e2.id and i1 != e2.id and i2 != e1.id:
            done["ins/ins"] += 1
            tally("rga ins/ins", _commutes(ri, rga.Insert(e1, i1), rga.Insert(e2, i2), xs))
        target = rng.choice([e1.id, *pool])
        if done["ins/del"] < LEMMA_CASES and target != e1.id:
            done["ins/del"] += 1
            tally("rga ins/del", _commutes(ri, rga.Insert(e1, i1), rga.Delete(target), xs))

    violations = sum(v for _, v in counts.values())
    enough = counts["counter"][0] >= 400 and all(n >= LEMMA_CASES for k, (n, _) in counts.items() if k != "counter")
    detail = ", ".join(f"{k} {n} cases/{v} bad" for k, (n, v) in counts.items())
    criterion(3, "commutativity lemmas", violations == 0 and enough, detail)


# ---------------------------------------------------------------------------
# 6. negative controls


def _msg(c, n, op, clock=None):
    return Message(LamportId(c, n), op, VectorClock.of(clock or {n: c}))


def _negative_worlds():
    inc = counter.Increment
    a = _msg(1, 0, inc)
    m1, m2 = _msg(1, 0, inc), _msg(2, 0, inc)
    ghost = _msg(4, 1, inc)
    x1 = _msg(1, 0, orset.Add(lid(1, 0), "x"))
    x2 = _msg(2, 0, orset.Add(lid(2, 0), "x"))
    subset = _msg(3, 0, orset.Rem({lid(1, 0)}, "x"))
    anchored = _msg(1, 0, rga.Insert(rga.Elt(lid(1, 0), "a"), lid(5, 1)))
    return {
        "duplicate delivery": (
            World.from_histories("counter", [[Broadcast(a), Deliver(a)], [Deliver(a), Deliver(a)]]),
            "histories-distinct",
        ),
        "causal inversion": (
            World.from_histories("counter", [
                [Broadcast(m1), Deliver(m1), Broadcast(m2), Deliver(m2)], [Deliver(m2), Deliver(m1)],
            ]),
            "causal-delivery",
        ),
        "missing broadcast": (World.from_histories("counter", [[], [Deliver(ghost)]]), "delivery-has-a-cause"),
        "invalid Rem subset": (
            World.from_histories("orset", [[
                Broadcast(x1), Deliver(x1), Broadcast(x2), Deliver(x2), Broadcast(subset), Deliver(subset),
            ], []]),
            "broadcast-only-valid-msgs",
        ),
        "Insert with unknown anchor": (
            World.from_histories("rga", [[Broadcast(anchored), Deliver(anchored)], []]),
            "broadcast-only-valid-msgs",
        ),
    }


def test_6_negative_controls(criterion):
    found = {}
    for name, (world, auditor) in _negative_worlds().items():
        result = audit_axioms(world)[auditor]
        found[name] = (auditor, result.witness)
    world, _ = _negative_worlds()["Insert with unknown anchor"]
    anchor = audit_datatype(world)["allowed-insert"]
    dup_world, _ = _negative_worlds()["duplicate delivery"]
    sec = audit_sec([node_deliver_messages(h) for h in dup_world.histories], HappensBefore(dup_world.histories),
                    dup_world.datatype.interpret_message, 0)
    flagged = all(w is not None and w for _, w in found.values())
    ok = flagged and not anchor.ok and anchor.witness and not sec.distinctness_ok and sec.counterexample
    detail = "; ".join(f"{name} -> {aud} {w}" for name, (aud, w) in found.items())
    detail += f"; allowed-insert {anchor.witness}; sec distinctness {sec.counterexample}"
    criterion(6, "negative controls", bool(ok), detail)


# ---------------------------------------------------------------------------
# 7. determinism and replay


def test_7_determinism_and_replay(criterion, tmp_path):
    rng = random.Random("determinism")
    mismatched = []
    for k in range(100):
        scenario = Scenario(
            datatype=rng.choice(DATATYPES),
            nodes=rng.randint(1, 5),
            seed=rng.randrange(2**32),
            op_budget=rng.randint(0, 40),
            drop_rate=rng.choice([0.0, 0.05, 0.2]),
            crash_rate=rng.choice([0.0, 0.01, 0.05]),
            partition_rate=rng.choice([0.0, 0.05]),
        )
        path = tmp_path / f"run{k}.jsonl"
        first = render_report(run_fuzz(scenario, emit_trace=path), "json")
        again = render_report(run_fuzz(scenario), "json")
        replayed = render_report(replay_trace(path), "json")
        if not (first == again == replayed):
            mismatched.append((k, scenario))
    detail = f"100 pairs, {len(mismatched)} re-run or replay mismatches"
    criterion(7, "determinism and replay", not mismatched, detail)


# ---------------------------------------------------------------------------
# 8. concurrent inserts at one anchor


def _same_anchor(anchor: bool, first: int) -> Scenario:
    a = LamportId(1, 0)
    after = a if anchor else None
    script = [Record("broadcast", 0, op=rga.Insert(rga.Elt(a, "a"))), Record("deliver", 1, a)]
    script += [
        Record("broadcast", 0, op=rga.Insert(rga.Elt(LamportId(2, 0), "x"), after)),
        Record("broadcast", 1, op=rga.Insert(rga.Elt(LamportId(2, 1), "y"), after)),
        Record("deliver", first, LamportId(2, 1 - first)),
        Record("deliver", 1 - first, LamportId(2, first)),
    ]
    return Scenario("rga", nodes=2, op_budget=0, script=tuple(script))


def test_8_concurrent_insert_interleaving(criterion):
    seen = []
    for anchor in (True, False):
        for first in (0, 1):
            world = simulate(_same_anchor(anchor, first))
            report = build_report(world)
            ids = [[e.id for e in s] for s in world.states]
            expected = [lid(1, 0), lid(2, 1), lid(2, 0)] if anchor else [lid(2, 1), lid(2, 0), lid(1, 0)]
            seen.append(report.verdict == "converged" and ids[0] == ids[1] == expected)
    texts = {"".join(rga.rga_read(s)) for s in simulate(_same_anchor(True, 0)).states}
    detail = f"4 scripted runs (anchored/head x both delivery orders), reads {sorted(texts)}"
    criterion(8, "concurrent-insert interleaving", all(seen) and texts == {"ayx"}, detail)


# ---------------------------------------------------------------------------
# 9. TCP smoke test

WORKLOADS = {
    # "sync" waits for quiescence; each reconnect follows one so that the
    # links being dropped are known to be up
    "counter": [(0, "inc"), (1, "inc"), (2, "dec"), (1, "inc"), (None, "sync"), (1, "reconnect"), (0, "inc"),
                (2, "inc"), (2, "inc"), (0, "dec"), (1, "inc"), (2, "inc")],
    "orset": [(0, "add x"), (1, "add y"), (2, "add x"), (None, "sync"), (1, "rem x"), (None, "sync"), (0, "reconnect"),
              (2, "add z"), (0, "rem y"), (1, "add x")],
    "rga": [(0, "ins a"), (None, "sync"), (1, "ins b after 1@0"), (2, "ins c after 1@0"), (0, "del 1@0"),
            (None, "sync"), (2, "reconnect"), (1, "ins d"), (0, "ins e after 1@0")],
}


def _run_cluster(datatype, workdir):
    cluster = Cluster(datatype, workdir)
    try:
        issued, sent_by, reconnected, resent = 0, [0, 0, 0], None, 0
        for node, cmd in WORKLOADS[datatype]:
            if cmd == "sync":
                cluster.quiesce(issued)
            elif cmd == "reconnect":
                assert cluster.cmd(node, "reconnect")["ok"]
                reconnected, resent = node, sent_by[node]
            else:
                resp = cluster.cmd(node, cmd)
                assert resp["ok"], resp
                issued += 1
                sent_by[node] += 1
        snap = cluster.quiesce(issued)
        # each peer receives the reconnecting node's earlier frames a second time
        snap = cluster.wait(lambda s: sum(x["duplicates"] for i, x in enumerate(s) if i != reconnected) >= 2 * resent)
    finally:
        cluster.close()
    return cluster, snap, issued


def test_9_tcp_smoke(criterion, tmp_path):
    start = time.monotonic()
    results = []
    for datatype in DATATYPES:
        workdir = tmp_path / datatype
        workdir.mkdir()
        cluster, snap, issued = _run_cluster(datatype, workdir)
        states = [s["state"] for s in snap]
        header, records = trace.merge_node_logs([trace.read_trace(p) for p in cluster.logs])
        world = replay_records(header, records)
        axioms_ok = all(r.ok for r in audit_axioms(world).values())
        pre_ok = all(r.ok for r in audit_datatype(world).values())
        proc = subprocess.run(
            [sys.executable, "-m", "crdtsec", "replay", "--report", "json",
             *[arg for p in cluster.logs for arg in ("--trace", str(p))]],
            capture_output=True, text=True, timeout=60,
        )
        replayed = json.loads(proc.stdout) if proc.returncode == 0 else None
        replay_ok = replayed is not None and list(replayed["per_node_final_states"].values()) == states
        dups = sum(s["duplicates"] for s in snap)
        results.append((datatype, states[0] == states[1] == states[2], axioms_ok and pre_ok, replay_ok, dups, issued))
    elapsed = time.monotonic() - start
    ok = all(r[1] and r[2] and r[3] and r[4] > 0 for r in results) and elapsed < 120
    detail = "; ".join(
        f"{d}: {n} ops, equal={eq}, axioms={ax}, cli-replay={rp}, duplicates suppressed={dp}"
        for d, eq, ax, rp, dp, n in results
    )
    criterion(9, "TCP smoke test", ok, f"{detail}; {elapsed:.1f}s")
