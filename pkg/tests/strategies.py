"""Hypothesis strategies for types and protocols."""

from __future__ import annotations

from hypothesis import strategies as st

from maty import types as T

ROLES = ("p", "q", "r")
LABELS = ("a", "b", "c")
PAYLOADS = (T.UNIT, T.INT, T.BOOL, T.STRING)


def _branches(cont):
    return st.lists(
        st.tuples(st.sampled_from(LABELS), st.sampled_from(PAYLOADS), cont),
        min_size=1, max_size=3, unique_by=lambda x: x[0],
    ).map(lambda items: tuple(T.Msg(l, p, c) for l, p, c in items))


@st.composite
def session_types(draw, depth: int = 3, bound: tuple = ()):
    """Closed, guarded session types.  Recursion variables only occur under
    a communication, so every generated type is well formed."""
    choices = ["end", "select", "branch"]
    if depth > 0:
        choices.append("rec")
    kind = draw(st.sampled_from(choices if depth > 0 else ["end"]))
    if kind == "end":
        return T.END
    if kind == "rec":
        var = f"X{len(bound)}"
        return T.Rec(var, draw(_guarded(depth - 1, bound + (var,))))
    return draw(_comm(kind, depth - 1, bound))


def _cont(depth: int, bound: tuple):
    options = [session_types(depth, bound)]
    if bound:
        options.append(st.sampled_from(bound).map(T.Var))
    return st.one_of(*options)


def _comm(kind: str, depth: int, bound: tuple):
    role = st.sampled_from(ROLES)
    ctor = T.Select if kind == "select" else T.Branch
    return st.builds(ctor, role, _branches(_cont(depth, bound)))


def _guarded(depth: int, bound: tuple):
    return st.sampled_from(["select", "branch"]).flatmap(lambda k: _comm(k, max(depth, 0), bound))


@st.composite
def global_types(draw, roles=("p", "q", "r"), depth: int = 4):
    """Finite global types where every choice is between distinct labels
    sent by one role to one other role."""
    if depth == 0 or draw(st.integers(0, 4)) == 0:
        return T.GEND
    sender = draw(st.sampled_from(roles))
    receiver = draw(st.sampled_from([r for r in roles if r != sender]))
    labels = draw(st.lists(st.sampled_from(LABELS), min_size=1, max_size=2, unique=True))
    branches = tuple(T.Msg(l, draw(st.sampled_from(PAYLOADS)), draw(global_types(roles, depth - 1)))
                     for l in labels)
    return T.GMsg(sender, receiver, branches)


def dual(t: T.SessionType, peer: str | None = None) -> T.SessionType:
    """The dual of a binary session type.  With ``peer`` given, every
    communication is addressed to ``peer`` instead."""
    match t:
        case T.Select(role, branches):
            return T.Branch(peer or role, tuple(T.Msg(m.label, m.payload, dual(m.cont, peer)) for m in branches))
        case T.Branch(role, branches):
            return T.Select(peer or role, tuple(T.Msg(m.label, m.payload, dual(m.cont, peer)) for m in branches))
        case T.Rec(var, body):
            return T.Rec(var, dual(body, peer))
        case _:
            return t


@st.composite
def binary_session_types(draw, peer: str, depth: int = 3, bound: tuple = ()):
    """Closed guarded types that only talk to ``peer``."""
    kinds = ["end", "select", "branch"] + (["rec"] if depth > 0 else [])
    kind = draw(st.sampled_from(kinds if depth > 0 else ["end"]))
    if kind == "end":
        return T.END
    if kind == "rec":
        var = f"X{len(bound)}"
        inner = draw(st.sampled_from(["select", "branch"]))
        return T.Rec(var, draw(_binary_comm(inner, peer, depth - 1, bound + (var,))))
    return draw(_binary_comm(kind, peer, depth - 1, bound))


def _binary_comm(kind, peer, depth, bound):
    cont = binary_session_types(peer, depth, bound)
    if bound:
        cont = st.one_of(cont, st.sampled_from(bound).map(T.Var))
    ctor = T.Select if kind == "select" else T.Branch
    return _branches(cont).map(lambda b: ctor(peer, b))
