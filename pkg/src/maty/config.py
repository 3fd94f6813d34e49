"""Runtime configurations.

A configuration is a flat soup: every name (actor, access point, session,
token) is global and unique, which replaces explicit name restriction.
Actors and their parts are immutable; a reduction step builds a new
configuration that shares all unchanged parts with the old one.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable

from . import terms as M
from . import types as T

# ---------------------------------------------------------------------------
# Thread states


@dataclass(frozen=True)
class Idle:
    value: object

    def __str__(self) -> str:
        from .parser import show_value

        return f"idle({show_value(self.value)})"


@dataclass(frozen=True)
class InSession:
    session: str
    role: str
    comp: object

    def __str__(self) -> str:
        return f"({self.session}[{self.role}], ...)"


@dataclass(frozen=True)
class NoSession:
    comp: object

    def __str__(self) -> str:
        return "(-, ...)"


@dataclass(frozen=True)
class StoredHandler:
    """A handler installed for an endpoint; ``on_fail`` runs if the peer is cancelled."""

    handler: object
    on_fail: object | None = None


@dataclass(frozen=True)
class Actor:
    name: str
    thread: object
    state_type: T.PayloadType
    handlers: tuple = ()  # ((session, role), StoredHandler), sorted
    init: tuple = ()  # (token, callback), in registration order
    monitors: tuple = ()  # (watched actor, callback)
    theta: tuple = ()  # pending switch requests: (static name, payload)
    send_suspended: tuple = ()  # (static name, (((session, role), fn), ...)), sorted by name

    def handler_map(self) -> dict:
        return dict(self.handlers)

    def with_handler(self, key, stored) -> "Actor":
        table = dict(self.handlers)
        if stored is None:
            table.pop(key, None)
        else:
            table[key] = stored
        return replace(self, handlers=tuple(sorted(table.items())))

    def suspended_map(self) -> dict:
        return dict(self.send_suspended)

    def with_suspended(self, name, entries: tuple) -> "Actor":
        table = dict(self.send_suspended)
        if entries:
            table[name] = entries
        else:
            table.pop(name, None)
        return replace(self, send_suspended=tuple(sorted(table.items())))

    def endpoints(self) -> set:
        """Endpoints this actor holds: its thread, handlers and suspensions."""
        out = {key for key, _ in self.handlers}
        if isinstance(self.thread, InSession):
            out.add((self.thread.session, self.thread.role))
        for _, entries in self.send_suspended:
            out.update(key for key, _ in entries)
        return out

    def terms(self) -> Iterable:
        thread = self.thread
        if isinstance(thread, Idle):
            yield thread.value
        else:
            yield thread.comp
        for _, stored in self.handlers:
            yield stored.handler
            if stored.on_fail is not None:
                yield stored.on_fail
        for _, cb in self.init:
            yield cb
        for _, cb in self.monitors:
            yield cb
        for _, v in self.theta:
            yield v
        for _, entries in self.send_suspended:
            for _, fn in entries:
                yield fn


@dataclass(frozen=True)
class APState:
    protocol: T.Protocol
    pending: tuple = ()  # (role, ((token, actor), ...)) for every role

    @staticmethod
    def fresh(protocol: T.Protocol) -> "APState":
        return APState(protocol, tuple((r, ()) for r in protocol.roles))

    def pending_map(self) -> dict:
        return dict(self.pending)

    def with_pending(self, role, entries) -> "APState":
        return replace(self, pending=tuple((r, entries if r == role else e) for r, e in self.pending))


# ---------------------------------------------------------------------------
# Configurations


@dataclass
class Configuration:
    actors: dict = field(default_factory=dict)
    aps: dict = field(default_factory=dict)
    sessions: dict = field(default_factory=dict)  # s -> {(p, q): ((label, value), ...)}
    session_protocols: dict = field(default_factory=dict)  # s -> Protocol, recorded at session start
    zapped_actors: frozenset = frozenset()
    zapped_endpoints: frozenset = frozenset()
    zapped_tokens: frozenset = frozenset()
    counters: dict = field(default_factory=dict)
    defs: dict = field(default_factory=dict)  # global definitions, read-only
    zap: bool = False
    switch: bool = False

    def copy(self) -> "Configuration":
        return Configuration(dict(self.actors), dict(self.aps), dict(self.sessions), dict(self.session_protocols),
                             self.zapped_actors, self.zapped_endpoints, self.zapped_tokens, dict(self.counters),
                             self.defs, self.zap, self.switch)

    def fresh(self, prefix: str) -> str:
        n = self.counters.get(prefix, 0) + 1
        self.counters[prefix] = n
        return f"{prefix}{n}"

    def queue(self, s: str, sender: str, receiver: str) -> tuple:
        return self.sessions.get(s, {}).get((sender, receiver), ())

    def set_queue(self, s: str, sender: str, receiver: str, entries: tuple):
        table = dict(self.sessions[s])
        if entries:
            table[(sender, receiver)] = entries
        else:
            table.pop((sender, receiver), None)
        self.sessions[s] = table

    def live_endpoints(self) -> dict:
        """Map each endpoint held by an actor to that actor's name."""
        out = {}
        for name, actor in self.actors.items():
            for ep in actor.endpoints():
                out[ep] = name
        return out

    def signature(self) -> str:
        """A deterministic textual rendering, used to compare replays."""
        from .parser import show_term

        lines = []
        for name in sorted(self.actors):
            a = self.actors[name]
            thread = a.thread
            if isinstance(thread, Idle):
                t = f"idle {show_term(thread.value)}"
            elif isinstance(thread, InSession):
                t = f"{thread.session}[{thread.role}] {show_term(thread.comp)}"
            else:
                t = f"- {show_term(thread.comp)}"
            lines.append(f"actor {name}: {t}")
            for (s, r), h in a.handlers:
                lines.append(f"  handler {s}[{r}] {show_term(h.handler)}"
                             + (f" fail {show_term(h.on_fail)}" if h.on_fail is not None else ""))
            for tok, cb in a.init:
                lines.append(f"  init {tok} {show_term(cb)}")
            for b, cb in a.monitors:
                lines.append(f"  monitor {b} {show_term(cb)}")
            for n, v in a.theta:
                lines.append(f"  become {n} {show_term(v)}")
            for n, entries in a.send_suspended:
                for (s, r), fn in entries:
                    lines.append(f"  suspended {n} {s}[{r}] {show_term(fn)}")
        for name in sorted(self.aps):
            ap = self.aps[name]
            pend = " ".join(f"{r}:{','.join(t for t, _ in e)}" for r, e in ap.pending)
            lines.append(f"ap {name}: {pend}")
        for s in sorted(self.sessions):
            qs = " ".join(f"{p}->{q}:[{', '.join(f'{lab}({show_term(v)})' for lab, v in msgs)}]"
                          for (p, q), msgs in sorted(self.sessions[s].items()))
            lines.append(f"session {s}: {qs}")
        zaps = sorted(self.zapped_actors) + sorted(f"{s}[{r}]" for s, r in self.zapped_endpoints) \
            + sorted(self.zapped_tokens)
        if zaps:
            lines.append("zap " + " ".join(zaps))
        return "\n".join(lines)


def initial_config(main, defs: dict | None = None, *, zap: bool = False, switch: bool = False) -> Configuration:
    """A single actor named ``main`` evaluating ``main`` outside any session."""
    c = Configuration(defs=dict(defs or {}), zap=zap, switch=switch)
    c.actors["main"] = Actor("main", NoSession(main), T.UNIT)
    return c


def config_for_program(prog: M.Program, *, zap: bool = False, switch: bool = False) -> Configuration:
    if prog.main is None:
        raise ValueError("program has no main")
    return initial_config(prog.main, {name: d.value for name, d in prog.defs.items()}, zap=zap, switch=switch)


# ---------------------------------------------------------------------------
# Garbage collection


def _referenced_actor_names(c: Configuration) -> set:
    out = set()
    for actor in c.actors.values():
        for b, _ in actor.monitors:
            out.add(b)
        for t in actor.terms():
            out |= M.actor_names(t)
    for queues in c.sessions.values():
        for msgs in queues.values():
            for _, v in msgs:
                out |= M.actor_names(v)
    return out


def collect_garbage(c: Configuration) -> list[str]:
    """Drop finished sessions and unreferenced cancellation markers.

    A session is garbage once no actor holds any of its endpoints and its
    queues are empty.  Mutates ``c``; returns one description per item.
    """
    events = []
    live = c.live_endpoints()
    live_sessions = {s for s, _ in live}
    for s in sorted(c.sessions):
        if s in live_sessions or any(c.sessions[s].values()):
            continue
        del c.sessions[s]
        c.session_protocols.pop(s, None)
        c.zapped_endpoints = frozenset(e for e in c.zapped_endpoints if e[0] != s)
        events.append(f"session:{s}")
    if c.zapped_actors:
        referenced = _referenced_actor_names(c)
        for a in sorted(c.zapped_actors - referenced):
            events.append(f"actor:{a}")
        c.zapped_actors = frozenset(c.zapped_actors & referenced)
    if c.zapped_tokens:
        pending = {tok for ap in c.aps.values() for _, entries in ap.pending for tok, _ in entries}
        c.zapped_tokens = frozenset(c.zapped_tokens & pending)
    return events


def canonical_idle_check(c: Configuration) -> bool:
    """Whether a quiescent configuration has the canonical shape: only access
    points and idle actors (plus, with switching, sessions parked on a
    send-suspended endpoint that no pending request can activate)."""
    if any(not isinstance(a.thread, Idle) for a in c.actors.values()):
        return False
    if not c.sessions:
        return True
    if not c.switch:
        return False
    live = c.live_endpoints()
    for s, queues in c.sessions.items():
        if any(queues.values()):
            return False
        parked = False
        for (s2, r), owner in live.items():
            if s2 != s:
                continue
            actor = c.actors[owner]
            suspended = {key for _, entries in actor.send_suspended for key, _ in entries}
            if (s, r) in suspended:
                names = [n for n, entries in actor.send_suspended if any(k == (s, r) for k, _ in entries)]
                if actor.theta and actor.theta[0][0] in names:
                    return False
                parked = True
            elif (s, r) not in actor.handler_map():
                return False
        if not parked:
            return False
    return True
