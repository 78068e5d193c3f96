"""Partial state transformers and the executable convergence checks.

An interpretation maps ``(op, state)`` to a new state or ``None`` on failure.
Everything here is generic over the operation and state types.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Hashable, Iterable, NamedTuple, Optional, Sequence, TypeVar

from .causal import concurrent, hb_violation

Op = TypeVar("Op")
State = Any
Transformer = Callable[[State], Optional[State]]
Interpretation = Callable[[Any, State], Optional[State]]


class SetMismatch(ValueError):
    """The two operation lists are not permutations of the same set."""


def identity(state: State) -> State:
    return state


def kleisli_compose(f: Transformer, g: Transformer) -> Transformer:
    """Apply ``f`` then ``g``; ``None`` from either aborts the composite."""

    def composed(state: State) -> State | None:
        mid = f(state)
        return None if mid is None else g(mid)

    return composed


def transformer(interp: Interpretation, op: Any) -> Transformer:
    return lambda state: interp(op, state)


def apply_operations(ops: Iterable[Any], initial: State, interp: Interpretation) -> State | None:
    """Left fold of the interpretations over ``ops``, starting at ``initial``."""
    state = initial
    for op in ops:
        state = interp(op, state)
        if state is None:
            return None
    return state


def prefix_states(ops: Sequence[Any], initial: State, interp: Interpretation) -> list[State]:
    """States after each prefix, stopping at the first failure (not included)."""
    out = [initial]
    state = initial
    for op in ops:
        state = interp(op, state)
        if state is None:
            break
        out.append(state)
    return out


class CommuteResult(NamedTuple):
    ok: bool
    witness: tuple[Any, Any, State] | None = None


def concurrent_ops_commute(
    ops: Sequence[Op],
    precedes: Callable[[Op, Op], bool],
    interp: Interpretation,
    probe_states: Iterable[State],
) -> CommuteResult:
    """Check x-then-y == y-then-x for every concurrent pair at every probe state.

    Transformer equality is only decidable pointwise, so equality is checked at
    the supplied states. Two failures count as equal.
    """
    probes = _unique(probe_states)
    if not probes:
        raise ValueError("probe_states must be non-empty")
    cache: dict[tuple[int, int], State | None] = {}

    def once(k: int, si: int, s: State) -> State | None:
        key = (k, si)
        if key not in cache:
            cache[key] = interp(ops[k], s)
        return cache[key]

    for a in range(len(ops)):
        for b in range(a + 1, len(ops)):
            x, y = ops[a], ops[b]
            if x == y or not concurrent(precedes, x, y):
                continue
            for si, s in enumerate(probes):
                sx, sy = once(a, si, s), once(b, si, s)
                xy = None if sx is None else interp(y, sx)
                yx = None if sy is None else interp(x, sy)
                if xy != yx:
                    return CommuteResult(False, (x, y, s))
    return CommuteResult(True)


def _unique(states: Iterable[State]) -> list[State]:
    seen: set = set()
    out = []
    for s in states:
        key = s if isinstance(s, Hashable) else repr(s)
        if key not in seen:
            seen.add(key)
            out.append(s)
    return out


@dataclass
class SecVerdict:
    """Outcome of auditing per-node histories against the SEC assumptions."""

    causality_ok: bool = True
    distinctness_ok: bool = True
    trunc_ok: bool = True
    commutativity_ok: bool = True
    no_failure_ok: bool = True
    counterexample: dict | None = field(default=None)

    @property
    def ok(self) -> bool:
        return (
            self.causality_ok
            and self.distinctness_ok
            and self.trunc_ok
            and self.commutativity_ok
            and self.no_failure_ok
        )

    def fail(self, flag: str, witness: dict) -> None:
        setattr(self, flag, False)
        if self.counterexample is None:
            self.counterexample = {"check": flag.removesuffix("_ok"), **witness}

    def to_dict(self) -> dict:
        return {
            "causality_ok": self.causality_ok,
            "distinctness_ok": self.distinctness_ok,
            "trunc_ok": self.trunc_ok,
            "commutativity_ok": self.commutativity_ok,
            "no_failure_ok": self.no_failure_ok,
            "counterexample": self.counterexample,
        }

    @classmethod
    def from_dict(cls, d: dict) -> SecVerdict:
        return cls(**d)


def audit_sec(
    histories: Sequence[Sequence[Any]],
    precedes: Callable[[Any, Any], bool],
    interp: Interpretation,
    initial: State,
    render: Callable[[Any], Any] = repr,
) -> SecVerdict:
    """Evaluate the five SEC assumptions on each node's delivered sequence.

    ``render`` turns operations and states into witness-friendly values.
    """
    verdict = SecVerdict()
    for node, xs in enumerate(histories):
        xs = list(xs)
        hb = hb_violation(xs, precedes)
        dup = _first_duplicate_index(xs)
        if hb is not None:
            i, j = hb
            verdict.fail("causality_ok", {
                "node": node, "earlier": render(xs[i]), "later": render(xs[j]),
            })
        if dup is not None:
            verdict.fail("distinctness_ok", {"node": node, "duplicate": render(xs[dup])})
        # hb_violation scans by the later index, so a prefix of length k passes
        # exactly when it stops before the first offending position
        bad_from = hb[1] + 1 if hb else len(xs) + 1
        if dup is not None:
            bad_from = min(bad_from, dup + 1)
        prefix_ok = [k < bad_from for k in range(len(xs) + 1)]
        for k in range(1, len(prefix_ok)):
            if prefix_ok[k] and not prefix_ok[k - 1]:
                verdict.fail("trunc_ok", {"node": node, "prefix_length": k - 1})
                break

        states = prefix_states(xs, initial, interp)
        if len(states) < len(xs) + 1:
            failed = xs[len(states) - 1]
            verdict.fail("no_failure_ok", {
                "node": node, "index": len(states) - 1, "op": render(failed),
                "state": render(states[-1]),
            })

        result = concurrent_ops_commute(xs, precedes, interp, states)
        if not result.ok:
            x, y, s = result.witness
            verdict.fail("commutativity_ok", {
                "node": node, "x": render(x), "y": render(y), "state": render(s),
            })
    return verdict


def _first_duplicate_index(xs: Sequence[Any]) -> int | None:
    seen = set()
    for k, x in enumerate(xs):
        if x in seen:
            return k
        seen.add(x)
    return None


def check_convergence(xs: Sequence[Any], ys: Sequence[Any], interp: Interpretation, initial: State) -> bool:
    """Both orders yield equal states (or both fail). Raises on set mismatch."""
    if set(xs) != set(ys):
        raise SetMismatch(f"{len(set(xs) ^ set(ys))} operations differ between the two lists")
    return apply_operations(xs, initial, interp) == apply_operations(ys, initial, interp)
