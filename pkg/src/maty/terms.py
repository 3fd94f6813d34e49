"""Fine-grain call-by-value terms.

Values and computations are separate class families; every computation slot
that needs a value holds a value node, so sequencing is always explicit via
``Let``.  Nodes carry an optional source span that takes no part in equality.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Mapping, Union

from . import types as T
from .types import node

Span = tuple  # (line, column)


def _span():
    return field(default=None, compare=False, repr=False)


# ---------------------------------------------------------------------------
# Values


@node
class Var:
    name: str
    span: Span | None = _span()


@node
class Global:
    """Reference to a top-level definition of the program."""

    name: str
    span: Span | None = _span()


@node
class Const:
    """A base literal.  ``kind`` keeps ``True`` and ``1`` apart."""

    value: object
    kind: str
    span: Span | None = _span()


UNIT_VALUE = Const(None, "Unit")


def const(value) -> Const:
    if value is None:
        return UNIT_VALUE
    if isinstance(value, bool):
        return Const(value, "Bool")
    if isinstance(value, int):
        return Const(value, "Int")
    if isinstance(value, str):
        return Const(value, "String")
    raise TypeError(f"no literal form for {value!r}")


@node
class Pair:
    left: "Value"
    right: "Value"
    span: Span | None = _span()


@node
class Lam:
    param: str
    body: "Computation"
    ty: T.Fun
    span: Span | None = _span()


@node
class Fix:
    """Recursive function ``rec fname(param). body``."""

    fname: str
    param: str
    body: "Computation"
    ty: T.Fun
    span: Span | None = _span()


@node
class Clause:
    label: str
    binder: str
    body: "Computation"
    span: Span | None = _span()


@node
class Handler:
    role: str
    state_var: str
    clauses: tuple
    ty: T.Handler | None = None
    span: Span | None = _span()

    def __post_init__(self):
        object.__setattr__(self, "clauses", tuple(sorted(self.clauses, key=lambda c: c.label)))

    def clause(self, label: str) -> Clause | None:
        for c in self.clauses:
            if c.label == label:
                return c
        return None


@node
class APName:
    name: str
    span: Span | None = _span()


@node
class ActorName:
    name: str
    span: Span | None = _span()


Value = Union[Var, Global, Const, Pair, Lam, Fix, Handler, APName, ActorName]
VALUE_TYPES = (Var, Global, Const, Pair, Lam, Fix, Handler, APName, ActorName)


# ---------------------------------------------------------------------------
# Computations


@node
class Let:
    var: str
    comp: "Computation"
    body: "Computation"
    span: Span | None = _span()


@node
class Return:
    value: Value
    span: Span | None = _span()


@node
class App:
    fn: Value
    arg: Value
    span: Span | None = _span()


@node
class If:
    cond: Value
    then: "Computation"
    else_: "Computation"
    span: Span | None = _span()


@node
class LetPair:
    left: str
    right: str
    value: Value
    body: "Computation"
    span: Span | None = _span()


@node
class Prim:
    """Built-in operation on base values, e.g. ``+`` or ``==``."""

    op: str
    args: tuple
    span: Span | None = _span()


@node
class Spawn:
    body: "Computation"
    state_type: T.PayloadType
    span: Span | None = _span()


@node
class Send:
    role: str
    label: str
    value: Value
    span: Span | None = _span()


@node
class Suspend:
    """``suspend V W``; with ``on_fail`` set it is the exception-aware form."""

    handler: Value
    state: Value
    on_fail: Value | None = None
    span: Span | None = _span()


@node
class NewAP:
    protocol: T.Protocol
    name: str = ""
    span: Span | None = _span()


@node
class Register:
    ap: Value
    role: str
    callback: Value
    span: Span | None = _span()


@node
class Raise:
    span: Span | None = _span()


@node
class Monitor:
    pid: Value
    callback: Value
    span: Span | None = _span()


@node
class Leave:
    value: Value
    span: Span | None = _span()


@node
class SuspendSend:
    sname: str
    fn: Value
    state: Value
    span: Span | None = _span()


@node
class Become:
    sname: str
    value: Value
    span: Span | None = _span()


Computation = Union[Let, Return, App, If, LetPair, Prim, Spawn, Send, Suspend, NewAP,
                    Register, Raise, Monitor, Leave, SuspendSend, Become]

ZAP_CONSTRUCTS = (Raise, Monitor, Leave)
SWITCH_CONSTRUCTS = (SuspendSend, Become)

PRIM_OPS = {
    "+": (("Int", "Int"), "Int"),
    "-": (("Int", "Int"), "Int"),
    "*": (("Int", "Int"), "Int"),
    "/": (("Int", "Int"), "Int"),
    "%": (("Int", "Int"), "Int"),
    "<": (("Int", "Int"), "Bool"),
    "<=": (("Int", "Int"), "Bool"),
    ">": (("Int", "Int"), "Bool"),
    ">=": (("Int", "Int"), "Bool"),
    "&&": (("Bool", "Bool"), "Bool"),
    "||": (("Bool", "Bool"), "Bool"),
    "not": (("Bool",), "Bool"),
    "++": (("String", "String"), "String"),
    "show": (("Int",), "String"),
}
# ``==`` and ``!=`` compare any two base values of the same type.
EQUALITY_OPS = ("==", "!=")


# ---------------------------------------------------------------------------
# Free variables and substitution


@lru_cache(maxsize=None)
def free_vars(t) -> frozenset:
    match t:
        case Var(name):
            return frozenset((name,))
        case Global() | Const() | APName() | ActorName() | Raise() | NewAP():
            return frozenset()
        case Pair(left, right):
            return free_vars(left) | free_vars(right)
        case Lam(param, body):
            return free_vars(body) - {param}
        case Fix(fname, param, body):
            return free_vars(body) - {fname, param}
        case Handler(_, state_var, clauses):
            out = frozenset()
            for c in clauses:
                out |= free_vars(c.body) - {c.binder, state_var}
            return out
        case Let(var, comp, body):
            return free_vars(comp) | (free_vars(body) - {var})
        case Return(v) | Leave(v) | Become(_, v) | Send(_, _, v):
            return free_vars(v)
        case App(fn, arg):
            return free_vars(fn) | free_vars(arg)
        case If(cond, then, else_):
            return free_vars(cond) | free_vars(then) | free_vars(else_)
        case LetPair(left, right, value, body):
            return free_vars(value) | (free_vars(body) - {left, right})
        case Prim(_, args):
            out = frozenset()
            for a in args:
                out |= free_vars(a)
            return out
        case Spawn(body):
            return free_vars(body)
        case Suspend(handler, state, on_fail):
            out = free_vars(handler) | free_vars(state)
            return out | free_vars(on_fail) if on_fail is not None else out
        case Register(ap, _, callback):
            return free_vars(ap) | free_vars(callback)
        case Monitor(pid, callback):
            return free_vars(pid) | free_vars(callback)
        case SuspendSend(_, fn, state):
            return free_vars(fn) | free_vars(state)
    raise TypeError(f"not a term: {t!r}")


def subst(t, env: Mapping[str, Value]):
    """Substitute closed values for free variables.

    Substituted values are closed at runtime, so no capture can occur and
    binders only need to shadow.
    """
    if not env:
        return t
    fv = free_vars(t)
    if not any(name in fv for name in env):
        return t
    if isinstance(t, Var):
        return env[t.name]

    def without(*names):
        if any(n in env for n in names):
            return {k: v for k, v in env.items() if k not in names}
        return env

    s = subst
    match t:
        case Pair(left, right):
            return Pair(s(left, env), s(right, env), t.span)
        case Lam(param, body, ty):
            return Lam(param, s(body, without(param)), ty, t.span)
        case Fix(fname, param, body, ty):
            return Fix(fname, param, s(body, without(fname, param)), ty, t.span)
        case Handler(role, state_var, clauses, ty):
            new = tuple(Clause(c.label, c.binder, s(c.body, without(c.binder, state_var)), c.span) for c in clauses)
            return Handler(role, state_var, new, ty, t.span)
        case Let(var, comp, body):
            return Let(var, s(comp, env), s(body, without(var)), t.span)
        case Return(v):
            return Return(s(v, env), t.span)
        case App(fn, arg):
            return App(s(fn, env), s(arg, env), t.span)
        case If(cond, then, else_):
            return If(s(cond, env), s(then, env), s(else_, env), t.span)
        case LetPair(left, right, value, body):
            return LetPair(left, right, s(value, env), s(body, without(left, right)), t.span)
        case Prim(op, args):
            return Prim(op, tuple(s(a, env) for a in args), t.span)
        case Spawn(body, state_type):
            return Spawn(s(body, env), state_type, t.span)
        case Send(role, label, v):
            return Send(role, label, s(v, env), t.span)
        case Suspend(handler, state, on_fail):
            return Suspend(s(handler, env), s(state, env), None if on_fail is None else s(on_fail, env), t.span)
        case Register(ap, role, callback):
            return Register(s(ap, env), role, s(callback, env), t.span)
        case Monitor(pid, callback):
            return Monitor(s(pid, env), s(callback, env), t.span)
        case Leave(v):
            return Leave(s(v, env), t.span)
        case SuspendSend(sname, fn, state):
            return SuspendSend(sname, s(fn, env), s(state, env), t.span)
        case Become(sname, v):
            return Become(sname, s(v, env), t.span)
    raise TypeError(f"cannot substitute into {t!r}")


def children(t):
    """Immediate sub-terms, used by generic traversals."""
    match t:
        case Pair(left, right):
            return (left, right)
        case Lam(_, body) | Fix(_, _, body):
            return (body,)
        case Handler(_, _, clauses):
            return tuple(c.body for c in clauses)
        case Let(_, comp, body):
            return (comp, body)
        case Return(v) | Leave(v) | Become(_, v) | Send(_, _, v):
            return (v,)
        case App(fn, arg):
            return (fn, arg)
        case If(cond, then, else_):
            return (cond, then, else_)
        case LetPair(_, _, value, body):
            return (value, body)
        case Prim(_, args):
            return args
        case Spawn(body):
            return (body,)
        case Suspend(handler, state, on_fail):
            return (handler, state) if on_fail is None else (handler, state, on_fail)
        case Register(ap, _, callback):
            return (ap, callback)
        case Monitor(pid, callback):
            return (pid, callback)
        case SuspendSend(_, fn, state):
            return (fn, state)
    return ()


@lru_cache(maxsize=None)
def actor_names(t) -> frozenset:
    """Actor names occurring anywhere in a term."""
    if isinstance(t, ActorName):
        return frozenset((t.name,))
    out = frozenset()
    for c in children(t):
        out |= actor_names(c)
    return out


def walk(t):
    """Pre-order iteration over a term and all of its sub-terms."""
    stack = [t]
    while stack:
        cur = stack.pop()
        yield cur
        stack.extend(reversed(children(cur)))


def is_value(t) -> bool:
    return isinstance(t, VALUE_TYPES)


# ---------------------------------------------------------------------------
# Programs


@dataclass(frozen=True)
class Definition:
    name: str
    ty: T.PayloadType
    value: Value
    span: Span | None = None


@dataclass
class Program:
    """A parsed source unit: declarations plus an optional main computation."""

    defs: dict = field(default_factory=dict)
    main: Computation | None = None
    sig: T.SigEnv = field(default_factory=T.SigEnv)
    protocols: dict = field(default_factory=dict)
    globals: dict = field(default_factory=dict)
    aliases: dict = field(default_factory=dict)
    payload_aliases: dict = field(default_factory=dict)
