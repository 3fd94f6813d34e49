"""Switching between sessions.

An actor can park a session endpoint that is ready to send with
``suspendSend Name fn st``, and later ask to resume some parked endpoint
with ``become Name V``.  Requests are kept in FIFO order per actor; when
the actor is idle and its oldest request names a static session with a
parked endpoint, ``EActivate`` resumes the oldest such endpoint by running
``fn (V, st)`` inside that session.  These rules are active only in
configurations built with ``switch=True``.
"""

from __future__ import annotations

from dataclasses import replace

from . import terms as M
from .config import Configuration, Idle, InSession
from .reduce import Stuck


def _live_entries(c: Configuration, entries: tuple) -> tuple:
    return tuple(e for e in entries if e[0] not in c.zapped_endpoints)


def switch_enabled_redexes(c: Configuration) -> list:
    from .runtime import Redex

    out = []
    for name in sorted(c.actors):
        actor = c.actors[name]
        if not isinstance(actor.thread, Idle) or not actor.theta:
            continue
        sname = actor.theta[0][0]
        if _live_entries(c, actor.suspended_map().get(sname, ())):
            out.append(Redex("EActivate", name, extra=sname))
    return out


def switch_thread_step(c: Configuration, r, frames, hole) -> tuple[str, str, str]:
    from .runtime import TAU, _with_hole

    actor = c.actors[r.actor]
    thread = actor.thread
    match r.rule:
        case "ESuspendSend":
            if not isinstance(thread, InSession):
                raise Stuck(f"{r.actor} parks an endpoint outside a session")
            key = (thread.session, thread.role)
            entries = actor.suspended_map().get(hole.sname, ()) + ((key, hole.fn),)
            actor = actor.with_suspended(hole.sname, entries)
            c.actors[r.actor] = replace(actor, thread=Idle(hole.state))
            return TAU, r.actor, f"name={hole.sname} {thread.session}[{thread.role}]"
        case "EBecome":
            actor = replace(actor, theta=actor.theta + ((hole.sname, hole.value),))
            c.actors[r.actor] = replace(actor, thread=_with_hole(thread, frames, M.Return(M.UNIT_VALUE)))
            return TAU, r.actor, f"name={hole.sname}"
    raise Stuck(f"unknown switching rule {r.rule}")


def switch_step(c: Configuration, r) -> tuple[str, str, str]:
    """Fire ``EActivate``.  Parked endpoints that were cancelled are dropped
    here; the detail field reports how many."""
    from .runtime import TAU

    actor = c.actors[r.actor]
    (sname, value), theta = actor.theta[0], actor.theta[1:]
    entries = actor.suspended_map()[sname]
    live = _live_entries(c, entries)
    dropped = len(entries) - len(live)
    ((s, p), fn), rest = live[0], live[1:]
    actor = actor.with_suspended(sname, rest)
    c.actors[r.actor] = replace(actor, theta=theta,
                                thread=InSession(s, p, M.App(fn, M.Pair(value, actor.thread.value))))
    detail = f"name={sname} {s}[{p}]"
    if dropped:
        detail += f" warning=dropped-{dropped}-cancelled"
    return TAU, r.actor, detail
