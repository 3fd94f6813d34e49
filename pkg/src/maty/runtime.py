"""Configuration reduction, schedulers, and replayable traces.

``enabled_redexes`` lists every rule instance that can fire; ``step`` fires
one of them.  Each actor's thread contributes at most one redex, determined
by the computation in the hole of its evaluation context.  After every step
a garbage-collection pass removes finished sessions and unreferenced
cancellation markers, and reports them as ``GC`` trace lines.
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass, replace

from . import terms as M
from . import types as T
from .config import (Actor, APState, Configuration, Idle, InSession, NoSession, StoredHandler,
                     canonical_idle_check, collect_garbage)
from .reduce import Stuck, beta, decompose, is_beta_redex, plug, resolve

TAU = "τ"
DEFAULT_MAX_STEPS = 100_000
S_LABELLED = ("ESend", "EReact")


class StaleRedex(Exception):
    pass


@dataclass(frozen=True, order=True)
class Redex:
    """A rule instance.  ``actor`` names the acting actor, or the access point
    for ``EInit``/``ECancelAP`` and the session for ``ECancelMsg``."""

    rule: str
    actor: str
    session: str = ""
    role: str = ""
    extra: str = ""

    def tag(self) -> str:
        """The part of a trace line's detail that identifies this redex."""
        match self.rule:
            case "EReact" | "ECancelH":
                return f"{self.session}[{self.role}]"
            case "ECancelMsg":
                return f"{self.session}[{self.extra}->{self.role}]"
            case "ECancelAP":
                return f"token={self.extra}"
            case "EInvokeM":
                return f"watched={self.extra}"
            case "EActivate":
                return f"name={self.extra}"
        return ""


@dataclass(frozen=True)
class TraceEvent:
    index: int
    rule: str
    label: str
    actor: str
    detail: str = ""

    def line(self) -> str:
        return f"#{self.index} {self.rule} session={self.label} actor={self.actor} detail={self.detail}"


_LINE_RE = re.compile(r"^#(\d+) (\S+) session=(\S+) actor=(\S+) detail=(.*)$")


def parse_trace_line(line: str) -> TraceEvent:
    m = _LINE_RE.match(line.strip())
    if not m:
        raise ValueError(f"malformed trace line: {line!r}")
    return TraceEvent(int(m.group(1)), m.group(2), m.group(3), m.group(4), m.group(5))


def format_trace(events) -> str:
    return "".join(e.line() + "\n" for e in events)


def _show(v) -> str:
    from .parser import show_term

    return " ".join(show_term(v).split())


# ---------------------------------------------------------------------------
# Enabled redexes


THREAD_RULES = {
    M.Send: "ESend", M.Suspend: "ESuspend", M.Spawn: "ESpawn", M.NewAP: "ENewAP", M.Register: "ERegister",
    M.Monitor: "EMonitor", M.Leave: "ELeave", M.SuspendSend: "ESuspendSend", M.Become: "EBecome",
}


def thread_rule(actor: Actor) -> str | None:
    """The rule the actor's thread can fire next, if any."""
    thread = actor.thread
    if isinstance(thread, Idle):
        return None
    frames, hole = decompose(thread.comp)
    if is_beta_redex(frames, hole):
        return "ELift"
    if isinstance(hole, M.Return):
        return "EReset"
    if isinstance(hole, M.Raise):
        return "ERaiseS" if isinstance(thread, InSession) else "ERaise"
    rule = THREAD_RULES.get(type(hole))
    if rule is None:
        raise Stuck(f"actor {actor.name} is stuck on {hole!r}")
    return rule


def _ap_assignment(c: Configuration, ap: APState) -> list | None:
    """Pick one registration per role: lowest token first, distinct idle actors."""
    candidates = []
    for role, entries in ap.pending:
        ok = [(tok, a) for tok, a in entries
              if tok not in c.zapped_tokens and a in c.actors and isinstance(c.actors[a].thread, Idle)]
        if not ok:
            return None
        candidates.append((role, sorted(ok, key=lambda e: _token_number(e[0]))))

    def search(i, used, chosen):
        if i == len(candidates):
            return chosen
        role, options = candidates[i]
        for tok, a in options:
            if a not in used:
                found = search(i + 1, used | {a}, chosen + [(role, tok, a)])
                if found is not None:
                    return found
        return None

    return search(0, frozenset(), [])


def _token_number(tok: str) -> int:
    digits = re.sub(r"\D", "", tok)
    return int(digits) if digits else 0


def core_enabled_redexes(c: Configuration) -> list[Redex]:
    out = []
    for name in sorted(c.actors):
        actor = c.actors[name]
        rule = thread_rule(actor)
        if rule is not None:
            t = actor.thread
            out.append(Redex(rule, name, t.session if isinstance(t, InSession) else "",
                             t.role if isinstance(t, InSession) else ""))
            continue
        for (s, p), stored in actor.handlers:
            h = resolve(stored.handler, c.defs)
            head = c.queue(s, h.role, p)
            if head:
                out.append(Redex("EReact", name, s, p))
    for ap_name in sorted(c.aps):
        if _ap_assignment(c, c.aps[ap_name]) is not None:
            out.append(Redex("EInit", ap_name))
    return out


def enabled_redexes(c: Configuration) -> list[Redex]:
    """Every rule instance that can fire in ``c``, in a deterministic order."""
    out = core_enabled_redexes(c)
    if c.zap:
        from .failure import zap_enabled_redexes

        out += zap_enabled_redexes(c)
    if c.switch:
        from .switching import switch_enabled_redexes

        out += switch_enabled_redexes(c)
    return sorted(out)


# ---------------------------------------------------------------------------
# Steps


def _set_thread(c: Configuration, name: str, thread) -> Actor:
    actor = replace(c.actors[name], thread=thread)
    c.actors[name] = actor
    return actor


def _with_hole(thread, frames, hole):
    comp = plug(frames, hole)
    if isinstance(thread, InSession):
        return InSession(thread.session, thread.role, comp)
    return NoSession(comp)


def _spawn_label(body) -> str:
    for t in M.walk(body):
        if isinstance(t, M.Global):
            return t.name
    return "actor"


def default_on_fail(state_type: T.PayloadType):
    """``suspend V W`` abbreviates the exception-aware form with ``fun st -> raise``."""
    return M.Lam("st", M.Raise(), T.Fun(state_type, state_type, T.END, T.END, state_type))


def _thread_step(c: Configuration, r: Redex, corrupt_send: bool) -> tuple[str, str, str]:
    """Fire the thread redex ``r``; returns (label, actor field, detail)."""
    actor = c.actors[r.actor]
    thread = actor.thread
    frames, hole = decompose(thread.comp)
    unit = M.Return(M.UNIT_VALUE)
    match r.rule:
        case "ELift":
            comp, what = beta(frames, hole, c.defs)
            _set_thread(c, r.actor, _with_hole(thread, [], comp))
            return TAU, r.actor, what
        case "EReset":
            _set_thread(c, r.actor, Idle(hole.value))
            return TAU, r.actor, f"state={_show(hole.value)}"
        case "ESend":
            if not isinstance(thread, InSession):
                raise Stuck(f"{r.actor} sends outside a session")
            s, p = thread.session, thread.role
            value = M.const(0) if corrupt_send else hole.value
            c.set_queue(s, p, hole.role, c.queue(s, p, hole.role) + ((hole.label, value),))
            _set_thread(c, r.actor, _with_hole(thread, frames, unit))
            return s, r.actor, f"{p}->{hole.role}:{hole.label}({_show(value)})"
        case "ESuspend":
            if not isinstance(thread, InSession):
                raise Stuck(f"{r.actor} suspends outside a session")
            on_fail = hole.on_fail
            if on_fail is None and c.zap:
                on_fail = default_on_fail(actor.state_type)
            actor = actor.with_handler((thread.session, thread.role), StoredHandler(hole.handler, on_fail))
            c.actors[r.actor] = replace(actor, thread=Idle(hole.state))
            return TAU, r.actor, f"{thread.session}[{thread.role}]"
        case "ESpawn":
            name = c.fresh(_spawn_label(hole.body))
            c.actors[name] = Actor(name, NoSession(hole.body), hole.state_type)
            result = M.ActorName(name) if c.zap else M.UNIT_VALUE
            _set_thread(c, r.actor, _with_hole(thread, frames, M.Return(result)))
            return TAU, r.actor, f"spawned={name}"
        case "ENewAP":
            name = c.fresh("ap")
            c.aps[name] = APState.fresh(hole.protocol)
            _set_thread(c, r.actor, _with_hole(thread, frames, M.Return(M.APName(name))))
            return TAU, r.actor, f"ap={name}" + (f" protocol={hole.name}" if hole.name else "")
        case "ERegister":
            ap_value = resolve(hole.ap, c.defs)
            if not isinstance(ap_value, M.APName) or ap_value.name not in c.aps:
                raise Stuck(f"register on {ap_value!r}")
            ap = c.aps[ap_value.name]
            if hole.role not in ap.protocol:
                raise Stuck(f"role {hole.role} not in access point {ap_value.name}")
            token = c.fresh("t")
            c.aps[ap_value.name] = ap.with_pending(hole.role, ap.pending_map()[hole.role] + ((token, r.actor),))
            actor = replace(actor, init=actor.init + ((token, hole.callback),))
            c.actors[r.actor] = replace(actor, thread=_with_hole(thread, frames, unit))
            return TAU, r.actor, f"ap={ap_value.name} role={hole.role} token={token}"
    from .failure import zap_thread_step
    from .switching import switch_thread_step

    if r.rule in ("ERaise", "ERaiseS", "EMonitor", "ELeave"):
        if not c.zap:
            raise Stuck(f"{r.rule} needs failure mode")
        return zap_thread_step(c, r, frames, hole)
    if r.rule in ("ESuspendSend", "EBecome"):
        if not c.switch:
            raise Stuck(f"{r.rule} needs switching mode")
        return switch_thread_step(c, r, frames, hole)
    raise Stuck(f"unknown rule {r.rule}")


def _react(c: Configuration, r: Redex) -> tuple[str, str, str]:
    actor = c.actors[r.actor]
    stored = actor.handler_map()[(r.session, r.role)]
    h = resolve(stored.handler, c.defs)
    queue = c.queue(r.session, h.role, r.role)
    label, value = queue[0]
    clause = h.clause(label)
    if clause is None:
        raise Stuck(f"handler for {r.session}[{r.role}] has no clause for {label}")
    env = {n: v for n, v in ((clause.binder, value), (h.state_var, actor.thread.value)) if n != "_"}
    body = M.subst(clause.body, env)
    c.set_queue(r.session, h.role, r.role, queue[1:])
    actor = actor.with_handler((r.session, r.role), None)
    c.actors[r.actor] = replace(actor, thread=InSession(r.session, r.role, body))
    return r.session, r.actor, f"{r.session}[{r.role}] {h.role}->{r.role}:{label}({_show(value)})"


def _init(c: Configuration, r: Redex) -> tuple[str, str, str]:
    ap = c.aps[r.actor]
    chosen = _ap_assignment(c, ap)
    s = c.fresh("s")
    c.sessions[s] = {}
    c.session_protocols[s] = ap.protocol
    parts = []
    for role, token, a in chosen:
        ap = ap.with_pending(role, tuple(e for e in ap.pending_map()[role] if e[0] != token))
        actor = c.actors[a]
        cb = dict(actor.init)[token]
        actor = replace(actor, init=tuple(e for e in actor.init if e[0] != token))
        c.actors[a] = replace(actor, thread=InSession(s, role, M.App(cb, actor.thread.value)))
        parts.append(f"{role}:{a}")
    c.aps[r.actor] = ap
    return TAU, r.actor, f"session={s} " + ",".join(parts)


def step(c: Configuration, r: Redex, index: int = 0, *, check: bool = True,
         corrupt_send: bool = False) -> tuple[Configuration, list[TraceEvent]]:
    """Fire ``r`` and garbage-collect; returns the new configuration and the
    trace lines for the step (the rule itself followed by any GC lines)."""
    if check and r not in enabled_redexes(c):
        raise StaleRedex(str(r))
    c2 = c.copy()
    if r.rule == "EReact":
        label, actor, detail = _react(c2, r)
    elif r.rule == "EInit":
        label, actor, detail = _init(c2, r)
    elif r.rule in ("EInvokeM", "ECancelMsg", "ECancelAP", "ECancelH"):
        from .failure import zap_step

        label, actor, detail = zap_step(c2, r)
    elif r.rule == "EActivate":
        from .switching import switch_step

        label, actor, detail = switch_step(c2, r)
    else:
        label, actor, detail = _thread_step(c2, r, corrupt_send)
    tag = r.tag()
    if tag and not detail.startswith(tag):
        detail = f"{tag} {detail}"
    events = [TraceEvent(index, r.rule, label, actor, detail)]
    for item in collect_garbage(c2):
        events.append(TraceEvent(index, "GC", TAU, "-", item))
    return c2, events


# ---------------------------------------------------------------------------
# Schedulers


class Scheduler:
    name = "base"

    def __init__(self, seed: int = 0):
        self.rng = random.Random(seed)

    def choose(self, redexes: list[Redex], index: int) -> Redex:
        raise NotImplementedError

    def fired(self, r: Redex, index: int):
        pass


class UniformRandom(Scheduler):
    name = "random"

    def choose(self, redexes, index):
        return redexes[self.rng.randrange(len(redexes))]


class RoundRobin(Scheduler):
    """Cycles through redexes in their sorted order."""

    name = "roundrobin"

    def __init__(self, seed: int = 0):
        super().__init__(seed)
        self.last: Redex | None = None

    def choose(self, redexes, index):
        if self.last is not None:
            for r in redexes:
                if (r.actor, r.rule, r.session, r.role, r.extra) > (self.last.actor, self.last.rule, self.last.session,
                                                                       self.last.role, self.last.extra):
                    return r
        return min(redexes, key=lambda r: (r.actor, r.rule, r.session, r.role, r.extra))

    def fired(self, r, index):
        self.last = r


class FairQueue(Scheduler):
    """Oldest-enabled first: a redex that stays enabled gets older until it
    is the oldest and fires.  Ties are broken by the seeded generator."""

    name = "fair"

    def __init__(self, seed: int = 0):
        super().__init__(seed)
        self.since: dict = {}

    def choose(self, redexes, index):
        current = {}
        for r in redexes:
            current[r] = self.since.get(r, index)
        self.since = current
        oldest = min(current.values())
        candidates = [r for r in redexes if current[r] == oldest]
        return candidates[self.rng.randrange(len(candidates))]

    def fired(self, r, index):
        for other in list(self.since):
            if other.actor == r.actor:
                del self.since[other]


POLICIES = {"random": UniformRandom, "roundrobin": RoundRobin, "fair": FairQueue}


def make_scheduler(policy: str, seed: int) -> Scheduler:
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}; choose from {', '.join(POLICIES)}")
    return POLICIES[policy](seed)


# ---------------------------------------------------------------------------
# Running


@dataclass
class Injection:
    """Force ``raise`` into an actor's thread at the first step ``>= step``
    where the actor is running."""

    actor: str
    step: int
    done: bool = False

    def matches(self, name: str) -> bool:
        return name == self.actor or re.sub(r"\d+$", "", name) == self.actor


@dataclass
class RunResult:
    config: Configuration
    trace: list
    stop: str  # Quiescent, Budget or Aborted
    steps: int

    def trace_text(self) -> str:
        return format_trace(self.trace)


def _inject(c: Configuration, inj: Injection, index: int) -> tuple[Configuration, Redex, TraceEvent] | None:
    for name in sorted(c.actors):
        actor = c.actors[name]
        if inj.matches(name) and not isinstance(actor.thread, Idle):
            frames, _ = decompose(actor.thread.comp)
            c2 = c.copy()
            _set_thread(c2, name, _with_hole(actor.thread, frames, M.Raise()))
            inj.done = True
            rule = "ERaiseS" if isinstance(actor.thread, InSession) else "ERaise"
            r = Redex(rule, name, getattr(actor.thread, "session", ""), getattr(actor.thread, "role", ""))
            return c2, r, TraceEvent(index, "INJECT", TAU, name, "raise")
    return None


def run(c: Configuration, policy: str = "random", seed: int = 0, max_steps: int = DEFAULT_MAX_STEPS, *,
        inject: Injection | None = None, corrupt_send_at: int | None = None, observer=None) -> RunResult:
    """Reduce until no redex is enabled or ``max_steps`` steps have fired.

    ``observer(config, events)`` is called after every step; a true result
    stops the run with reason ``Aborted``.
    ``corrupt_send_at`` replaces the payload of the first send at or after
    that step by the constant ``0``; it exists to test the oracles.
    """
    sched = make_scheduler(policy, seed)
    trace = []
    corrupted = False
    for index in range(max_steps):
        forced = None
        if inject is not None and not inject.done and index >= inject.step and c.zap:
            injected = _inject(c, inject, index)
            if injected is not None:
                c, forced, event = injected
                trace.append(event)
        redexes = enabled_redexes(c)
        if not redexes:
            return RunResult(c, trace, "Quiescent", index)
        r = forced or sched.choose(redexes, index)
        corrupt = corrupt_send_at is not None and not corrupted and index >= corrupt_send_at and r.rule == "ESend"
        corrupted = corrupted or corrupt
        c, events = step(c, r, index, check=False, corrupt_send=corrupt)
        sched.fired(r, index)
        trace.extend(events)
        if observer is not None and observer(c, events):
            return RunResult(c, trace, "Aborted", index + 1)
    if not enabled_redexes(c):
        return RunResult(c, trace, "Quiescent", max_steps)
    return RunResult(c, trace, "Budget", max_steps)


def replay(c: Configuration, lines) -> Configuration:
    """Re-apply a trace to its initial configuration."""
    for line in lines:
        if not line.strip():
            continue
        ev = parse_trace_line(line)
        if ev.rule == "GC":
            continue
        if ev.rule == "INJECT":
            actor = c.actors[ev.actor]
            frames, _ = decompose(actor.thread.comp)
            c = c.copy()
            _set_thread(c, ev.actor, _with_hole(actor.thread, frames, M.Raise()))
            continue
        candidates = [r for r in enabled_redexes(c)
                      if r.rule == ev.rule and r.actor == ev.actor and ev.detail.startswith(r.tag())]
        if len(candidates) != 1:
            raise StaleRedex(f"cannot replay {line.strip()}")
        corrupt = False
        if ev.rule == "ESend":
            actor = c.actors[ev.actor]
            _, hole = decompose(actor.thread.comp)
            corrupt = not ev.detail.endswith(f":{hole.label}({_show(hole.value)})")
        c, _ = step(c, candidates[0], ev.index, check=False, corrupt_send=corrupt)
    return c


__all__ = [
    "Redex", "TraceEvent", "RunResult", "Injection", "StaleRedex", "Stuck", "enabled_redexes", "step", "run",
    "replay", "canonical_idle_check", "format_trace", "parse_trace_line", "make_scheduler", "POLICIES", "TAU",
]
