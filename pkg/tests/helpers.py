"""Independent oracles and generators shared by the test modules.

Nothing here calls into the library's enumeration or ordering code, so the
tests can compare the library against these.
"""

from __future__ import annotations

import itertools
import json
import queue
import random
import socket
import subprocess
import sys
import threading
import time
from pathlib import Path

from crdtsec.causal import LamportId, Message, VectorClock
from crdtsec.datatype import get_datatype
from crdtsec.rga import Elt


def lid(c: int, n: int) -> LamportId:
    return LamportId(c, n)


def msg(c: int, n: int, op, clock: dict | None = None) -> Message:
    return Message(LamportId(c, n), op, VectorClock.of(clock or {n: c}))


# ---------------------------------------------------------------------------
# literal list recursion for RGA, kept deliberately naive


def ref_insert_body(xs, e):
    if not xs:
        return [e]
    x, rest = xs[0], xs[1:]
    if x.id < e.id:
        return [e, x, *rest]
    return [x, *ref_insert_body(rest, e)]


def ref_insert(xs, e, after):
    if not xs:
        return [e] if after is None else None
    if after is None:
        return ref_insert_body(xs, e)
    x, rest = xs[0], xs[1:]
    if x.id == after:
        return [x, *ref_insert_body(rest, e)]
    tail = ref_insert(rest, e, after)
    return None if tail is None else [x, *tail]


def ref_delete(xs, target):
    if not xs:
        return None
    x, rest = xs[0], xs[1:]
    if x.id == target:
        return [Elt(x.id, x.value, True), *rest]
    tail = ref_delete(rest, target)
    return None if tail is None else [x, *tail]


def random_rga_state(rng: random.Random, size: int, id_pool: int = 12) -> tuple[Elt, ...]:
    ids = rng.sample([lid(c, n) for c in range(1, id_pool + 1) for n in range(3)], size)
    return tuple(Elt(i, rng.choice("xyz"), rng.random() < 0.3) for i in ids)


# ---------------------------------------------------------------------------
# partial orders and brute-force enumeration


def random_message_set(rng: random.Random, datatype: str, max_size: int = 6):
    """A random strict partial order of valid messages.

    Returns (messages, precedes) where ``precedes`` is a set of (m1, m2)
    pairs, already transitively closed.  Each message's operation is drawn
    against the state produced by its down-set, the same state a real
    broadcaster would hold, and its Lamport counter exceeds every
    predecessor's.
    """
    dt = get_datatype(datatype)
    n = rng.randint(0, max_size)
    density = rng.random()
    below: list[set[int]] = []
    for j in range(n):
        direct = {i for i in range(j) if rng.random() < density * 0.6}
        closed = set(direct)
        for i in direct:
            closed |= below[i]
        below.append(closed)
    msgs: list[Message] = []
    for j in range(n):
        state = dt.initial
        for i in sorted(below[j]):
            state = dt.interpret(msgs[i].op, state)
        counter = 1 + max((msgs[i].id.counter for i in below[j]), default=0)
        mid = LamportId(counter, j)
        msgs.append(Message(mid, dt.random_op(rng, state, mid)))
    pairs = {(msgs[i], msgs[j]) for j in range(n) for i in below[j]}
    order = list(range(n))
    rng.shuffle(order)
    return [msgs[k] for k in order], pairs


def hb_orders(messages, pairs):
    """All orderings that respect ``pairs``, by filtering every permutation."""
    for perm in itertools.permutations(messages):
        pos = {m: k for k, m in enumerate(perm)}
        if all(pos[a] < pos[b] for a, b in pairs):
            yield list(perm)


def fold(dt, ops, state):
    for op in ops:
        if state is None:
            return None
        state = dt.interpret(op, state)
    return state


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


# ---------------------------------------------------------------------------
# a local cluster of `crdtsec serve` processes


class Cluster:
    """n replicas as child processes, driven over their stdin/stdout."""

    def __init__(self, datatype: str, workdir, n: int = 3, timeout: float = 20.0):
        self.datatype = datatype
        self.timeout = timeout
        workdir = Path(workdir)
        peers = [[i, "127.0.0.1", free_port()] for i in range(n)]
        self.logs = [workdir / f"node{i}.jsonl" for i in range(n)]
        self.procs = []
        self.lines: list[queue.Queue] = []
        for i in range(n):
            cfg = workdir / f"node{i}.json"
            cfg.write_text(json.dumps({"self_index": i, "datatype": datatype, "peers": peers}))
            proc = subprocess.Popen(
                [sys.executable, "-m", "crdtsec", "serve", "--config", str(cfg), "--log", str(self.logs[i])],
                stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True, bufsize=1,
            )
            q: queue.Queue = queue.Queue()
            threading.Thread(target=self._pump, args=(proc.stdout, q), daemon=True).start()
            self.procs.append(proc)
            self.lines.append(q)
        for i in range(n):
            assert self._read(i) == {"ok": True, "ready": i}

    @staticmethod
    def _pump(stream, q):
        for line in stream:
            q.put(line)
        q.put(None)

    def _read(self, i):
        line = self.lines[i].get(timeout=self.timeout)
        if line is None:
            raise RuntimeError(f"node {i} exited")
        return json.loads(line)

    def cmd(self, i: int, line: str) -> dict:
        self.procs[i].stdin.write(line + "\n")
        self.procs[i].stdin.flush()
        return self._read(i)

    def states(self) -> list[dict]:
        return [self.cmd(i, "state") for i in range(len(self.procs))]

    def wait(self, predicate) -> list[dict]:
        deadline = time.monotonic() + self.timeout
        while True:
            snap = self.states()
            if predicate(snap):
                return snap
            if time.monotonic() > deadline:
                raise TimeoutError(f"cluster did not settle: {snap}")
            time.sleep(0.05)

    def quiesce(self, total: int) -> list[dict]:
        return self.wait(lambda snap: all(s["delivered"] == total and s["held_back"] == 0 for s in snap))

    def close(self) -> None:
        for i, proc in enumerate(self.procs):
            if proc.poll() is None:
                try:
                    self.cmd(i, "quit")
                except Exception:
                    pass
        for proc in self.procs:
            try:
                proc.wait(timeout=self.timeout)
            except Exception:
                proc.kill()
            proc.stdin.close()
            proc.stdout.close()
