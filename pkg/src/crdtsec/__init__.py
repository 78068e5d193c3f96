"""Executable strong-eventual-consistency checks for operation-based CRDTs."""

from .causal import LamportId, Message, VectorClock, hb_consistent, lamport_compare, vc_leq, vc_merge
from .datatype import Datatype, get_datatype
from .kernel import SecVerdict, apply_operations, audit_sec, check_convergence, concurrent_ops_commute, kleisli_compose
from .network import World, audit_axioms, broadcast, deliverable, happens_before, inject_fault, node_deliver_messages, step

__version__ = "0.1.0"
