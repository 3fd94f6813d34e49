"""Failure handling: raising, monitoring, leaving, and cancellation.

These rules are active only in configurations built with ``zap=True``.
When an actor raises, the actor and every endpoint and registration token
it owns are marked as cancelled ("zapped").  Peers observe this through
``ECancelH`` (their handler's failure callback runs), messages addressed to
cancelled endpoints are discarded (``ECancelMsg``), registrations of dead
actors are withdrawn (``ECancelAP``), and monitors fire (``EInvokeM``).
"""

from __future__ import annotations

from dataclasses import replace

from . import terms as M
from .compliance import compliant_zap
from .config import Configuration, Idle, InSession, NoSession
from .reduce import Stuck, plug, resolve


def zap_enabled_redexes(c: Configuration) -> list:
    from .runtime import Redex

    out = []
    for name in sorted(c.actors):
        actor = c.actors[name]
        if not isinstance(actor.thread, Idle):
            continue
        for watched, _ in actor.monitors:
            if watched in c.zapped_actors:
                out.append(Redex("EInvokeM", name, extra=watched))
                break
        for (s, p), stored in actor.handlers:
            q = resolve(stored.handler, c.defs).role
            if (s, q) in c.zapped_endpoints and not c.queue(s, q, p):
                out.append(Redex("ECancelH", name, s, p))
    for s in sorted(c.sessions):
        for (p, q), msgs in sorted(c.sessions[s].items()):
            if msgs and (s, q) in c.zapped_endpoints:
                out.append(Redex("ECancelMsg", s, s, q, p))
    for ap_name in sorted(c.aps):
        for _, entries in c.aps[ap_name].pending:
            for token, _ in entries:
                if token in c.zapped_tokens:
                    out.append(Redex("ECancelAP", ap_name, extra=token))
    return out


def _raise(c: Configuration, name: str, in_session: bool) -> str:
    actor = c.actors.pop(name)
    endpoints = {key for key, _ in actor.handlers}
    for _, entries in actor.send_suspended:
        endpoints.update(key for key, _ in entries)
    if in_session:
        endpoints.add((actor.thread.session, actor.thread.role))
    c.zapped_actors = c.zapped_actors | {name}
    c.zapped_endpoints = c.zapped_endpoints | endpoints
    c.zapped_tokens = c.zapped_tokens | {tok for tok, _ in actor.init}
    zapped = ",".join(sorted(f"{s}[{r}]" for s, r in endpoints))
    return f"zapped={zapped or '-'}"


def zap_thread_step(c: Configuration, r, frames, hole) -> tuple[str, str, str]:
    """Fire a failure-mode thread rule for actor ``r.actor``."""
    from .runtime import TAU, _set_thread, _with_hole

    actor = c.actors[r.actor]
    thread = actor.thread
    match r.rule:
        case "ERaise" | "ERaiseS":
            return TAU, r.actor, _raise(c, r.actor, r.rule == "ERaiseS")
        case "EMonitor":
            watched = resolve(hole.pid, c.defs)
            if not isinstance(watched, M.ActorName):
                raise Stuck(f"monitor on {watched!r}")
            actor = replace(actor, monitors=actor.monitors + ((watched.name, hole.callback),))
            c.actors[r.actor] = replace(actor, thread=_with_hole(thread, frames, M.Return(M.UNIT_VALUE)))
            return TAU, r.actor, f"watched={watched.name}"
        case "ELeave":
            if isinstance(thread, InSession):
                c.zapped_endpoints = c.zapped_endpoints | {(thread.session, thread.role)}
                detail = f"left={thread.session}[{thread.role}]"
            else:
                detail = "left=-"
            _set_thread(c, r.actor, Idle(hole.value))
            return TAU, r.actor, detail
    raise Stuck(f"unknown failure rule {r.rule}")


def zap_step(c: Configuration, r) -> tuple[str, str, str]:
    """Fire a failure-mode rule that is not driven by a running thread."""
    from .runtime import TAU

    match r.rule:
        case "EInvokeM":
            actor = c.actors[r.actor]
            monitors = list(actor.monitors)
            index = next(i for i, (b, _) in enumerate(monitors) if b == r.extra)
            _, cb = monitors.pop(index)
            c.actors[r.actor] = replace(actor, monitors=tuple(monitors),
                                        thread=NoSession(M.App(cb, actor.thread.value)))
            return TAU, r.actor, f"watched={r.extra}"
        case "ECancelH":
            actor = c.actors[r.actor]
            stored = actor.handler_map()[(r.session, r.role)]
            if stored.on_fail is None:
                raise Stuck(f"handler for {r.session}[{r.role}] has no failure callback")
            actor = actor.with_handler((r.session, r.role), None)
            c.actors[r.actor] = replace(actor, thread=NoSession(plug([], M.App(stored.on_fail, actor.thread.value))))
            c.zapped_endpoints = c.zapped_endpoints | {(r.session, r.role)}
            return TAU, r.actor, f"{r.session}[{r.role}]"
        case "ECancelMsg":
            sender, receiver = r.extra, r.role
            msgs = c.queue(r.session, sender, receiver)
            label, _ = msgs[0]
            c.set_queue(r.session, sender, receiver, msgs[1:])
            return TAU, r.actor, f"{r.session}[{sender}->{receiver}] dropped={label}"
        case "ECancelAP":
            ap = c.aps[r.actor]
            for role, entries in ap.pending:
                if any(tok == r.extra for tok, _ in entries):
                    ap = ap.with_pending(role, tuple(e for e in entries if e[0] != r.extra))
            c.aps[r.actor] = ap
            c.zapped_tokens = c.zapped_tokens - {r.extra}
            return TAU, r.actor, f"token={r.extra}"
    raise Stuck(f"unknown failure rule {r.rule}")


__all__ = ["zap_enabled_redexes", "zap_thread_step", "zap_step", "compliant_zap"]
