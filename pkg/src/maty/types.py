"""Payload, session and global types, with equi-recursive helpers.

All type nodes are frozen dataclasses with a cached structural hash, so they
can key the state tables used by the model checker without re-hashing deep
trees on every lookup.  Branch maps are stored as tuples sorted by label,
which makes printing and hashing deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from functools import lru_cache
from typing import Iterable, Iterator, Mapping, Union

BASE_NAMES = ("Unit", "Bool", "Int", "String")


def node(cls):
    """Make ``cls`` a frozen dataclass whose hash is computed once."""
    cls = dataclass(frozen=True)(cls)
    structural_hash = cls.__hash__
    structural_eq = cls.__eq__

    def __hash__(self):
        try:
            return self.__dict__["_hash"]
        except KeyError:
            h = structural_hash(self)
            object.__setattr__(self, "_hash", h)
            return h

    def __eq__(self, other):
        if self is other:
            return True
        if type(self) is not type(other) or hash(self) != hash(other):
            return False
        return structural_eq(self, other)

    cls.__hash__ = __hash__
    cls.__eq__ = __eq__
    return cls


# ---------------------------------------------------------------------------
# Payload types


@node
class Base:
    name: str

    def __str__(self) -> str:
        return self.name


@node
class Fun:
    """``arg -> result @ state {pre => post}``."""

    arg: "PayloadType"
    result: "PayloadType"
    pre: "SessionType"
    post: "SessionType"
    state: "PayloadType"

    def __str__(self) -> str:
        return show_payload(self)


@node
class Pair:
    left: "PayloadType"
    right: "PayloadType"

    def __str__(self) -> str:
        return show_payload(self)


@node
class AccessPoint:
    protocol: "Protocol"

    def __str__(self) -> str:
        return show_payload(self)


@node
class Handler:
    session: "SessionType"
    state: "PayloadType"

    def __str__(self) -> str:
        return show_payload(self)


@node
class Pid:
    def __str__(self) -> str:
        return "Pid"


@node
class Bottom:
    """Type of computations that never return (suspend, raise, leave)."""

    def __str__(self) -> str:
        return "⊥"


PayloadType = Union[Base, Fun, Pair, AccessPoint, Handler, Pid, Bottom]

UNIT = Base("Unit")
BOOL = Base("Bool")
INT = Base("Int")
STRING = Base("String")
PID = Pid()
BOTTOM = Bottom()


# ---------------------------------------------------------------------------
# Session types


@node
class Msg:
    """One entry of a branch map: ``label(payload).cont``."""

    label: str
    payload: PayloadType
    cont: object


def _sorted_msgs(branches) -> tuple:
    if isinstance(branches, Mapping):
        branches = [Msg(label, payload, cont) for label, (payload, cont) in branches.items()]
    return tuple(sorted(branches, key=lambda m: m.label))


@node
class Select:
    role: str
    branches: tuple

    def __post_init__(self):
        object.__setattr__(self, "branches", _sorted_msgs(self.branches))

    def __str__(self) -> str:
        return show_session(self)


@node
class Branch:
    role: str
    branches: tuple

    def __post_init__(self):
        object.__setattr__(self, "branches", _sorted_msgs(self.branches))

    def __str__(self) -> str:
        return show_session(self)


@node
class Rec:
    var: str
    body: "SessionType"

    def __str__(self) -> str:
        return show_session(self)


@node
class Var:
    name: str

    def __str__(self) -> str:
        return self.name


@node
class End:
    def __str__(self) -> str:
        return "end"


@node
class BottomSession:
    """Postcondition of a computation that never returns."""

    def __str__(self) -> str:
        return "⊥"


SessionType = Union[Select, Branch, Rec, Var, End, BottomSession]

END = End()
BOTTOM_SESSION = BottomSession()


def lookup(branches: tuple, label: str) -> Msg | None:
    for m in branches:
        if m.label == label:
            return m
    return None


def labels(branches: tuple) -> tuple[str, ...]:
    return tuple(m.label for m in branches)


# ---------------------------------------------------------------------------
# Global types


@node
class GMsg:
    sender: str
    receiver: str
    branches: tuple

    def __post_init__(self):
        object.__setattr__(self, "branches", _sorted_msgs(self.branches))

    def __str__(self) -> str:
        return show_global(self)


@node
class GRec:
    var: str
    body: "GlobalType"

    def __str__(self) -> str:
        return show_global(self)


@node
class GVar:
    name: str

    def __str__(self) -> str:
        return self.name


@node
class GEnd:
    def __str__(self) -> str:
        return "end"


GlobalType = Union[GMsg, GRec, GVar, GEnd]
GEND = GEnd()


# ---------------------------------------------------------------------------
# Protocols and signature environments


@node
class Protocol:
    """A map from roles to local session types, sorted by role."""

    entries: tuple

    def __post_init__(self):
        entries = self.entries
        if isinstance(entries, Mapping):
            entries = entries.items()
        object.__setattr__(self, "entries", tuple(sorted(entries, key=lambda e: e[0])))

    @property
    def roles(self) -> tuple[str, ...]:
        return tuple(r for r, _ in self.entries)

    def __getitem__(self, role: str) -> SessionType:
        for r, t in self.entries:
            if r == role:
                return t
        raise KeyError(role)

    def __contains__(self, role: str) -> bool:
        return any(r == role for r, _ in self.entries)

    def items(self):
        return iter(self.entries)

    def __str__(self) -> str:
        return show_protocol(self)


@node
class SigEnv:
    """Static session names mapped to (output session type, payload type)."""

    entries: tuple = ()

    def __post_init__(self):
        entries = self.entries
        if isinstance(entries, Mapping):
            entries = [(k, s, p) for k, (s, p) in entries.items()]
        object.__setattr__(self, "entries", tuple(sorted(entries, key=lambda e: e[0])))

    def __getitem__(self, name: str) -> tuple[SessionType, PayloadType]:
        for n, s, p in self.entries:
            if n == name:
                return s, p
        raise KeyError(name)

    def __contains__(self, name: str) -> bool:
        return any(n == name for n, _, _ in self.entries)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(n for n, _, _ in self.entries)


# ---------------------------------------------------------------------------
# Substitution and unfolding


def substitute(t, var: str, replacement):
    """Replace free occurrences of ``var`` in a session or global type."""
    match t:
        case Var(name) | GVar(name):
            return replacement if name == var else t
        case Rec(v, body):
            return t if v == var else Rec(v, substitute(body, var, replacement))
        case GRec(v, body):
            return t if v == var else GRec(v, substitute(body, var, replacement))
        case Select(role, branches):
            return Select(role, tuple(Msg(m.label, m.payload, substitute(m.cont, var, replacement)) for m in branches))
        case Branch(role, branches):
            return Branch(role, tuple(Msg(m.label, m.payload, substitute(m.cont, var, replacement)) for m in branches))
        case GMsg(sender, receiver, branches):
            return GMsg(sender, receiver,
                        tuple(Msg(m.label, m.payload, substitute(m.cont, var, replacement)) for m in branches))
        case _:
            return t


@lru_cache(maxsize=None)
def unfold(t):
    """Unfold top-level recursion until the head is a communication or end.

    Works for both session and global types.  The argument must be closed
    and guarded; a bare variable at the head raises ``ValueError``.
    """
    seen = 0
    while isinstance(t, (Rec, GRec)):
        t = substitute(t.body, t.var, t)
        seen += 1
        if seen > 10_000:
            raise ValueError("unguarded recursion")
    if isinstance(t, (Var, GVar)):
        raise ValueError(f"free type variable {t.name}")
    return t


def session_equal(a: SessionType, b: SessionType) -> bool:
    """Equality of regular trees, decided by bisimulation with a visited set."""
    seen: set = set()
    todo = [(a, b)]
    while todo:
        x, y = todo.pop()
        if x == y or (x, y) in seen:
            continue
        seen.add((x, y))
        if isinstance(x, BottomSession) or isinstance(y, BottomSession):
            return False
        x, y = unfold(x), unfold(y)
        if isinstance(x, End) and isinstance(y, End):
            continue
        if type(x) is not type(y) or not isinstance(x, (Select, Branch)):
            return False
        if x.role != y.role or labels(x.branches) != labels(y.branches):
            return False
        for m, n in zip(x.branches, y.branches):
            if not payload_equal(m.payload, n.payload):
                return False
            todo.append((m.cont, n.cont))
    return True


def payload_equal(a: PayloadType, b: PayloadType) -> bool:
    """Structural payload equality; session components use bisimulation."""
    if a == b:
        return True
    match a, b:
        case Fun(), Fun():
            return (payload_equal(a.arg, b.arg) and payload_equal(a.result, b.result)
                    and payload_equal(a.state, b.state)
                    and session_equal(a.pre, b.pre) and session_equal(a.post, b.post))
        case Pair(), Pair():
            return payload_equal(a.left, b.left) and payload_equal(a.right, b.right)
        case AccessPoint(), AccessPoint():
            return protocol_equal(a.protocol, b.protocol)
        case Handler(), Handler():
            return session_equal(a.session, b.session) and payload_equal(a.state, b.state)
        case _:
            return False


def protocol_equal(p: Protocol, q: Protocol) -> bool:
    return p.roles == q.roles and all(session_equal(s, t) for (_, s), (_, t) in zip(p.entries, q.entries))


# ---------------------------------------------------------------------------
# Well-formedness


class IllFormedType(Exception):
    """A session or global type violates closedness, guardedness or label rules."""

    def __init__(self, kind: str, path: tuple[str, ...], detail: str = ""):
        self.kind = kind
        self.path = path
        self.detail = detail
        where = "/".join(path) or "<root>"
        super().__init__(f"{kind} at {where}" + (f": {detail}" if detail else ""))


def _check_branches(branches, path, kind_name):
    if not branches:
        raise IllFormedType("EmptyBranch", path, f"{kind_name} with no labels")
    seen = set()
    for m in branches:
        if m.label in seen:
            raise IllFormedType("DuplicateLabel", path, m.label)
        seen.add(m.label)


def well_formed_session(t: SessionType) -> None:
    """Raise ``IllFormedType`` unless ``t`` is closed, guarded and label-distinct."""

    def go(t, bound: frozenset, unguarded: frozenset, path: tuple):
        match t:
            case End():
                return
            case Var(name):
                if name not in bound:
                    raise IllFormedType("FreeTypeVariable", path, name)
                if name in unguarded:
                    raise IllFormedType("UnguardedRecursion", path, name)
            case Rec(var, body):
                go(body, bound | {var}, unguarded | {var}, path + (f"rec {var}",))
            case Select(role, branches) | Branch(role, branches):
                mark = "!" if isinstance(t, Select) else "?"
                _check_branches(branches, path, f"{role}{mark}")
                for m in branches:
                    step = path + (f"{role}{mark}{m.label}",)
                    well_formed_payload(m.payload, step)
                    go(m.cont, bound, frozenset(), step)
            case _:
                raise IllFormedType("NotASessionType", path, repr(t))

    go(t, frozenset(), frozenset(), ())


def well_formed_payload(a: PayloadType, path: tuple = ()) -> None:
    match a:
        case Fun(arg, result, pre, post, state):
            for sub in (arg, result, state):
                well_formed_payload(sub, path)
            _nested_session(pre, path)
            _nested_session(post, path)
        case Pair(left, right):
            well_formed_payload(left, path)
            well_formed_payload(right, path)
        case Handler(session, state):
            _nested_session(session, path)
            well_formed_payload(state, path)
        case AccessPoint(protocol):
            for _, s in protocol.entries:
                _nested_session(s, path)
        case _:
            return


def _nested_session(s, path):
    try:
        well_formed_session(s)
    except IllFormedType as err:
        raise IllFormedType(err.kind, path + err.path, err.detail) from None


def is_well_formed(t: SessionType) -> bool:
    try:
        well_formed_session(t)
    except IllFormedType:
        return False
    return True


def well_formed_global(g: GlobalType) -> None:
    """Raise ``IllFormedType`` unless ``g`` is closed, guarded, label-distinct
    and never has a role sending to itself."""

    def go(g, bound, unguarded, path):
        match g:
            case GEnd():
                return
            case GVar(name):
                if name not in bound:
                    raise IllFormedType("FreeTypeVariable", path, name)
                if name in unguarded:
                    raise IllFormedType("UnguardedRecursion", path, name)
            case GRec(var, body):
                go(body, bound | {var}, unguarded | {var}, path + (f"rec {var}",))
            case GMsg(sender, receiver, branches):
                if sender == receiver:
                    raise IllFormedType("SelfMessage", path, sender)
                _check_branches(branches, path, f"{sender}->{receiver}")
                for m in branches:
                    step = path + (f"{sender}->{receiver}:{m.label}",)
                    well_formed_payload(m.payload, step)
                    go(m.cont, bound, frozenset(), step)

    go(g, frozenset(), frozenset(), ())


def well_formed_protocol(p: Protocol) -> None:
    """Raise ``IllFormedType`` unless ``p`` has two or more roles, each entry is
    well formed, and every role mentioned by an entry belongs to ``p``."""
    if len(p.entries) < 2:
        raise IllFormedType("TooFewRoles", (), str(len(p.entries)))
    for role, s in p.entries:
        try:
            well_formed_session(s)
        except IllFormedType as err:
            raise IllFormedType(err.kind, (role,) + err.path, err.detail) from None
        for other in session_roles(s):
            if other not in p:
                raise IllFormedType("UnknownRole", (role,), other)
            if other == role:
                raise IllFormedType("SelfMessage", (role,), other)


def session_roles(t) -> set[str]:
    """Roles mentioned by a session type or a global type."""
    out: set[str] = set()
    stack = [t]
    while stack:
        match stack.pop():
            case Select(role, branches) | Branch(role, branches):
                out.add(role)
                stack.extend(m.cont for m in branches)
            case GMsg(sender, receiver, branches):
                out.update((sender, receiver))
                stack.extend(m.cont for m in branches)
            case Rec(_, body) | GRec(_, body):
                stack.append(body)
    return out


def subterms(t) -> Iterator:
    """All distinct unfolded states reachable from a closed session type."""
    seen = set()
    todo = [unfold(t)]
    while todo:
        s = todo.pop()
        if s in seen:
            continue
        seen.add(s)
        yield s
        if isinstance(s, (Select, Branch)):
            todo.extend(unfold(m.cont) for m in s.branches)


# ---------------------------------------------------------------------------
# Printing


def show_payload(a: PayloadType, nested: bool = False) -> str:
    match a:
        case Base(name):
            return name
        case Pid():
            return "Pid"
        case Bottom():
            return "⊥"
        case Pair(left, right):
            text = f"{show_payload(left, True)} * {show_payload(right, True)}"
            return f"({text})" if nested else text
        case AccessPoint(protocol):
            return f"AP({show_protocol(protocol, inline=True)})"
        case Handler(session, state):
            return f"Handler({show_session(session)}, {show_payload(state)})"
        case Fun(arg, result, pre, post, state):
            effect = ""
            if not (isinstance(pre, End) and isinstance(post, End)):
                effect = f" {{{show_session(pre)} => {show_session(post)}}}"
            text = f"{show_payload(arg, True)} -> {show_payload(result, True)} @ {show_payload(state, True)}{effect}"
            return f"({text})" if nested else text
    raise TypeError(f"not a payload type: {a!r}")


def _show_msgs(branches, show_cont) -> str:
    parts = []
    for m in branches:
        payload = "" if m.payload == UNIT else show_payload(m.payload)
        parts.append(f"{m.label}({payload}).{show_cont(m.cont)}")
    return ", ".join(parts)


def show_session(t: SessionType) -> str:
    match t:
        case End():
            return "end"
        case BottomSession():
            return "⊥"
        case Var(name):
            return name
        case Rec(var, body):
            return f"rec {var}. {show_session(body)}"
        case Select(role, branches):
            return f"{role}!{{{_show_msgs(branches, show_session)}}}"
        case Branch(role, branches):
            return f"{role}?{{{_show_msgs(branches, show_session)}}}"
    raise TypeError(f"not a session type: {t!r}")


def show_global(g: GlobalType) -> str:
    match g:
        case GEnd():
            return "end"
        case GVar(name):
            return name
        case GRec(var, body):
            return f"rec {var}. {show_global(body)}"
        case GMsg(sender, receiver, branches):
            return f"{sender}->{receiver}{{{_show_msgs(branches, show_global)}}}"
    raise TypeError(f"not a global type: {g!r}")


def show_protocol(p: Protocol, inline: bool = False) -> str:
    if inline:
        return "{" + ", ".join(f"{r}: {show_session(s)}" for r, s in p.entries) + "}"
    return "\n".join(f"{r}: {show_session(s)}" for r, s in p.entries)


def select(role: str, branches: Mapping[str, tuple] | Iterable[Msg]) -> Select:
    return Select(role, branches)


def branch(role: str, branches: Mapping[str, tuple] | Iterable[Msg]) -> Branch:
    return Branch(role, branches)
