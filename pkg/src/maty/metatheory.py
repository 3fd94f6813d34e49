"""Configuration typing and the preservation oracle.

``type_config`` types a runtime configuration from the outside: every
endpoint held by an actor (in its running thread, a stored handler, or a
send-suspended entry) receives a session type, every queued message a
payload type, and every session's slice of the resulting environment must
itself be compliant.  ``env_advances`` decides whether one environment can
evolve into another by at most one communication step (plus cancellations
in failure mode).  ``preservation_harness`` runs a program and applies both
checks after every step; ``explore_interleavings`` applies them to every
reachable configuration of a small program.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from functools import lru_cache

from . import terms as M
from . import types as T
from .compliance import (CANCELLED, Cancelled, QueueType, RuntimeTypeEnv, env_step, explore,
                         DEFAULT_BOUND)
from .config import Configuration, Idle, InSession, canonical_idle_check, config_for_program
from .reduce import resolve
from .runtime import DEFAULT_MAX_STEPS, format_trace, run
from .typecheck import EMPTY_ENV, Checker, TypingError, program_checker


@dataclass(frozen=True)
class TypingVerdict:
    accepted: bool
    env: RuntimeTypeEnv | None = None
    failure: tuple | None = None  # (node, rule, reason)

    def __bool__(self) -> bool:
        return self.accepted


class Rejected(Exception):
    def __init__(self, node: str, rule: str, reason: str):
        super().__init__(f"{node}: {rule}: {reason}")
        self.node, self.rule, self.reason = node, rule, reason


def _canonical(t, states: tuple):
    """The structurally identical representative of ``t`` among ``states``."""
    for s in states:
        if s == T.unfold(t) or T.session_equal(s, t):
            return s
    return T.unfold(t)


@lru_cache(maxsize=4096)
def _states(session_type) -> tuple:
    return tuple(T.subterms(session_type)) + ((T.END,) if T.END not in set(T.subterms(session_type)) else ())


@lru_cache(maxsize=1024)
def _protocol_problem(protocol: T.Protocol) -> str:
    try:
        T.well_formed_protocol(protocol)
    except T.IllFormedType as err:
        return str(err)
    return ""


@lru_cache(maxsize=65536)
def _callback_fits(ty: T.Fun, pre, state) -> bool:
    return all(T.payload_equal(x, state) for x in (ty.arg, ty.result, ty.state)) \
        and T.session_equal(ty.pre, pre) and T.session_equal(ty.post, T.END)


@lru_cache(maxsize=65536)
def _session_verdict(env: RuntimeTypeEnv, bound: int, zap: bool):
    return explore(env, bound, zap=zap)


@dataclass
class _ActorTyping:
    endpoints: list = field(default_factory=list)  # ((s, p), candidate types, where)
    tokens: list = field(default_factory=list)  # (token, precondition)


class ConfigTyper:
    """Types configurations of one program; caches per-actor results."""

    def __init__(self, checker: Checker):
        self.checker = checker
        self.cache: dict = {}
        self.quick: dict = {}

    def _fail(self, node, rule, err):
        if isinstance(err, TypingError):
            raise Rejected(node, rule, err.line())
        raise Rejected(node, rule, str(err))

    def _states_for(self, c: Configuration, s: str, p: str) -> tuple:
        protocol = c.session_protocols.get(s)
        if protocol is None or p not in protocol:
            raise Rejected(f"{s}[{p}]", "T-SessionName", "endpoint of an unknown session or role")
        states = _states(protocol[p])
        if c.switch:
            states += tuple(T.unfold(st) for _, st, _ in self.checker.sig.entries if T.unfold(st) not in states)
        return states

    def _thread_candidates(self, actor, states):
        ch = self.checker
        thread = actor.thread
        out = []
        first_error = None
        for st in states:
            try:
                result, post = ch.check_computation(EMPTY_ENV, actor.state_type, st, thread.comp)
                ch.expect_result(thread.comp, actor.state_type, result, "StateTypeMismatch")
                ch.expect_post(thread.comp, T.END, post)
                out.append(st)
            except TypingError as err:
                first_error = first_error or err
        if not out:
            self._fail(f"{actor.name}/{thread.session}[{thread.role}]", "TT-Sess", first_error)
        return tuple(out)

    def _handler_candidates(self, actor, key, stored, states):
        ch = self.checker
        h = stored.handler
        if isinstance(h, M.Handler) and h.ty is None:
            out = []
            first_error = None
            for st in states:
                if not isinstance(st, T.Branch):
                    continue
                try:
                    ch.check_handler(EMPTY_ENV, h, T.Handler(st, actor.state_type))
                    out.append(st)
                except TypingError as err:
                    first_error = first_error or err
            if not out:
                self._fail(f"{actor.name}/{key[0]}[{key[1]}]", "TH-Handler",
                           first_error or "no input session type fits the handler")
            return tuple(out)
        try:
            ty = ch.check_value(EMPTY_ENV, h)
        except TypingError as err:
            self._fail(f"{actor.name}/{key[0]}[{key[1]}]", "TH-Handler", err)
        if not isinstance(ty, T.Handler) or not isinstance(T.unfold(ty.session), T.Branch):
            self._fail(f"{actor.name}/{key[0]}[{key[1]}]", "TH-Handler", f"not an input handler: {ty}")
        if not T.payload_equal(ty.state, actor.state_type):
            self._fail(f"{actor.name}/{key[0]}[{key[1]}]", "TH-Handler", "handler state type differs from actor's")
        return (_canonical(ty.session, states),)

    def type_actor(self, c: Configuration, actor) -> _ActorTyping:
        sessions = tuple(sorted((s, p, c.session_protocols.get(s)) for s, p in actor.endpoints()))
        # Unchanged actors are shared between consecutive configurations, so
        # an identity lookup avoids hashing the actor's terms.
        quick = self.quick.get(id(actor))
        if quick is not None and quick[0] is actor and quick[1] == sessions:
            hit = quick[2]
            if isinstance(hit, Rejected):
                raise hit
            return hit
        key = (actor, sessions)
        hit = self.cache.get(key)
        if hit is None:
            try:
                hit = self._type_actor(c, actor)
            except Rejected as err:
                hit = err
            self.cache[key] = hit
        self.quick[id(actor)] = (actor, sessions, hit)
        if isinstance(hit, Rejected):
            raise hit
        return hit

    def _type_actor(self, c: Configuration, actor) -> _ActorTyping:
        ch = self.checker
        out = _ActorTyping()
        thread = actor.thread
        name = actor.name
        try:
            T.well_formed_payload(actor.state_type)
            if isinstance(thread, Idle):
                ch.check_value_against(EMPTY_ENV, thread.value, actor.state_type, "StateTypeMismatch")
            elif not isinstance(thread, InSession):
                result, post = ch.check_computation(EMPTY_ENV, actor.state_type, T.END, thread.comp)
                ch.expect_result(thread.comp, actor.state_type, result, "StateTypeMismatch")
                ch.expect_post(thread.comp, T.END, post)
        except (TypingError, T.IllFormedType) as err:
            self._fail(name, "TT-Idle" if isinstance(thread, Idle) else "TT-NoSess", err)
        if isinstance(thread, InSession):
            states = self._states_for(c, thread.session, thread.role)
            out.endpoints.append(((thread.session, thread.role), self._thread_candidates(actor, states), "thread"))
        for key, stored in actor.handlers:
            states = self._states_for(c, *key)
            out.endpoints.append((key, self._handler_candidates(actor, key, stored, states), "handler"))
            if stored.on_fail is not None:
                try:
                    ch.expect_callback(stored.on_fail, stored.on_fail, EMPTY_ENV, actor.state_type, T.END)
                except TypingError as err:
                    self._fail(f"{name}/{key[0]}[{key[1]}]", "TH-Handler", err)
        for token, cb in actor.init:
            try:
                ty = ch.check_value(EMPTY_ENV, cb)
            except TypingError as err:
                self._fail(f"{name}/{token}", "TI-Callback", err)
            if not isinstance(ty, T.Fun):
                self._fail(f"{name}/{token}", "TI-Callback", f"not a function: {ty}")
            out.tokens.append((token, ty))
        for watched, cb in actor.monitors:
            try:
                ch.expect_callback(cb, cb, EMPTY_ENV, actor.state_type, T.END)
            except TypingError as err:
                self._fail(f"{name}/monitor {watched}", "T-Monitor", err)
        for sname, value in actor.theta:
            try:
                _, payload = ch.sig_entry(value, sname)
                ch.check_value_against(EMPTY_ENV, value, payload)
            except TypingError as err:
                self._fail(f"{name}/become {sname}", "T-Become", err)
        for sname, entries in actor.send_suspended:
            for key, fn in entries:
                try:
                    session, payload = ch.sig_entry(fn, sname)
                    expected = T.Fun(T.Pair(payload, actor.state_type), actor.state_type, session, T.END,
                                     actor.state_type)
                    ch.check_value_against(EMPTY_ENV, fn, expected)
                except TypingError as err:
                    self._fail(f"{name}/{key[0]}[{key[1]}]", "TH-SendHandler", err)
                out.endpoints.append((key, (_canonical(session, self._states_for(c, *key)),), "suspended"))
        return out

    # -- whole configurations ------------------------------------------------

    def type_config(self, c: Configuration, hint: RuntimeTypeEnv | None = None) -> TypingVerdict:
        try:
            return TypingVerdict(True, self._type_config(c, hint))
        except Rejected as err:
            return TypingVerdict(False, failure=(err.node, err.rule, err.reason))

    def _type_config(self, c: Configuration, hint) -> RuntimeTypeEnv:
        ch = self.checker
        ch.aps = {name: T.AccessPoint(ap.protocol) for name, ap in c.aps.items()}
        ch.actors = frozenset(c.actors) | c.zapped_actors
        previous = hint.endpoint_map() if hint is not None else {}
        endpoints: dict = {}
        owners: dict = {}
        tokens: dict = {}
        token_types: dict = {}
        for name in sorted(c.actors):
            typing = self.type_actor(c, c.actors[name])
            for key, candidates, where in typing.endpoints:
                if key in endpoints:
                    raise Rejected(f"{key[0]}[{key[1]}]", "T-Par", f"endpoint held twice ({owners[key]}, {name})")
                endpoints[key] = _choose(candidates, previous.get(key))
                owners[key] = f"{name}:{where}"
            for token, ty in typing.tokens:
                token_types[token] = (name, ty)
        for key in sorted(c.zapped_endpoints):
            if key in endpoints:
                raise Rejected(f"{key[0]}[{key[1]}]", "T-ZapRole", f"cancelled endpoint still held by {owners[key]}")
            endpoints[key] = CANCELLED
        # Access points and tokens.
        registered = set()
        for ap_name in sorted(c.aps):
            ap = c.aps[ap_name]
            problem = _protocol_problem(ap.protocol)
            if problem:
                raise Rejected(ap_name, "T-AP", problem)
            for role, entries in ap.pending:
                if role not in ap.protocol:
                    raise Rejected(ap_name, "T-AP", f"pending role {role} not in protocol")
                for token, owner in entries:
                    if token in registered:
                        raise Rejected(token, "T-InitName", "token registered twice")
                    registered.add(token)
                    tokens[(token, "+")] = ap.protocol[role]
                    if token in c.zapped_tokens:
                        continue
                    if token not in token_types or token_types[token][0] != owner:
                        raise Rejected(token, "T-InitName", f"{owner} holds no callback for the token")
                    ty = token_types[token][1]
                    actor = c.actors[owner]
                    if not _callback_fits(ty, ap.protocol[role], actor.state_type):
                        raise Rejected(f"{owner}/{token}", "TI-Callback",
                                       f"callback type {T.show_payload(ty)} does not fit role {role}")
                    tokens[(token, "-")] = ty.pre
        for token in token_types:
            if token not in registered:
                raise Rejected(token, "T-InitName", "callback for a token no access point knows")
        # Queues.
        queues = {}
        for s in sorted(c.sessions):
            entries = []
            for (p, q), msgs in sorted(c.sessions[s].items()):
                for label, value in msgs:
                    try:
                        payload = ch.check_value(EMPTY_ENV, value)
                    except TypingError as err:
                        raise Rejected(f"{s}:{p}->{q}:{label}", "T-ConsQueue", err.line())
                    entries.append((p, q, label, payload))
            queues[s] = QueueType.from_entries(entries)
        for s, _ in endpoints:
            if s not in queues:
                raise Rejected(s, "T-SessionName", "endpoint of a session without queues")
        env = RuntimeTypeEnv(endpoints, queues, tokens, frozenset(c.actors) | c.zapped_actors, frozenset(c.aps))
        for s in sorted(queues):
            verdict = _session_verdict(env.restrict(s), ch.bound, c.zap)
            if verdict.status == "Violation":
                raise Rejected(s, "T-SessionName",
                               f"session environment is not compliant: {verdict} {verdict.detail}".strip())
        return env


def _choose(candidates: tuple, previous):
    if previous is None or isinstance(previous, Cancelled):
        return candidates[0]
    for cand in candidates:
        if cand == previous:
            return cand
    succ = set()
    if isinstance(previous, (T.Select, T.Branch)):
        succ = {T.unfold(m.cont) for m in previous.branches}
    for cand in candidates:
        if cand in succ:
            return cand
    return candidates[0]


def type_config(c: Configuration, checker: Checker | None = None, hint: RuntimeTypeEnv | None = None) -> TypingVerdict:
    """Type ``c``; ``checker`` supplies definition types and modes."""
    if checker is None:
        checker = Checker(zap=c.zap, switch=c.switch)
    return ConfigTyper(checker).type_config(c, hint)


# ---------------------------------------------------------------------------
# Environment evolution


def _drop_ended(d: RuntimeTypeEnv, sessions) -> RuntimeTypeEnv:
    return RuntimeTypeEnv(
        tuple(e for e in d.endpoints if e[0][0] in sessions and not isinstance(e[1], T.End)),
        tuple(q for q in d.queues if q[0] in sessions),
    )


def env_advances(d1: RuntimeTypeEnv, d2: RuntimeTypeEnv, zap: bool = False) -> bool:
    """Whether ``d2`` is reachable from ``d1`` by at most one communication
    step, plus any number of cancellations when ``zap`` is set.

    Endpoints at type ``end`` are garbage and ignored.  Sessions present in
    only one of the environments were created or finished in between; the
    fresh-name discipline makes those unobservable to the other side, but a
    finished session must have been able to finish.
    """
    common = d1.sessions() & d2.sessions()
    gone = d1.sessions() - d2.sessions()
    for s in gone:
        if not _can_vanish(_drop_ended(d1, {s}), zap):
            return False
    return _advances(_drop_ended(d1, common), _drop_ended(d2, common), zap)


def _normal(d: RuntimeTypeEnv) -> RuntimeTypeEnv:
    return _drop_ended(d, d.sessions())


@lru_cache(maxsize=65536)
def _can_vanish(d: RuntimeTypeEnv, zap: bool) -> bool:
    """A session slice with no live endpoints left after at most one step."""
    def empty(x):
        return all(isinstance(t, Cancelled) for _, t in x.endpoints) and not any(q for _, q in x.queues)

    if empty(d):
        return True
    return any(empty(_normal(d2)) for _, d2 in env_step(d, zap=zap, spontaneous=zap))


@lru_cache(maxsize=65536)
def _advances(d1: RuntimeTypeEnv, d2: RuntimeTypeEnv, zap: bool) -> bool:
    if d1 == d2:
        return True
    seen = {(d1, False)}
    todo = [(d1, False)]
    while todo:
        d, used = todo.pop()
        for label, nxt in env_step(d, zap=zap, spontaneous=zap):
            free = label.kind in ("Zap", "End")
            if not free and used:
                continue
            nxt = _normal(nxt)
            state = (nxt, used or not free)
            if nxt == d2:
                return True
            if state not in seen and len(seen) < 100_000:
                seen.add(state)
                todo.append(state)
    return False


# ---------------------------------------------------------------------------
# Harness


@dataclass
class Violation:
    step: int
    kind: str  # type_config, env_advances or canonical
    node: str
    rule: str
    reason: str
    trace_prefix: str

    def as_dict(self) -> dict:
        return {"step": self.step, "kind": self.kind, "node": self.node, "rule": self.rule,
                "reason": self.reason, "trace_prefix": self.trace_prefix}


@dataclass
class HarnessReport:
    program: str
    seed: int
    policy: str
    steps: int
    stop: str
    canonical: bool | None
    violations: list
    error: str = ""
    trace: list = field(default_factory=list, repr=False)
    config: Configuration | None = field(default=None, repr=False)

    @property
    def ok(self) -> bool:
        return not self.violations and not self.error and self.canonical is not False

    def as_dict(self) -> dict:
        return {"program": self.program, "seed": self.seed, "policy": self.policy, "steps": self.steps,
                "stop": self.stop, "canonical": self.canonical, "violations": [v.as_dict() for v in self.violations],
                "error": self.error, "ok": self.ok}

    def json(self) -> str:
        return json.dumps(self.as_dict(), ensure_ascii=False, sort_keys=True)


def preservation_harness(program: M.Program, policy: str = "random", seed: int = 0,
                         max_steps: int = DEFAULT_MAX_STEPS, zap: bool = False, switch: bool = False, *,
                         name: str = "", checker: Checker | None = None, typer: ConfigTyper | None = None,
                         inject=None, corrupt_send_at: int | None = None, prefix_lines: int = 40) -> HarnessReport:
    """Run ``program`` checking typability and environment evolution after
    every step.  The run stops at the first violation."""
    if typer is None:
        typer = ConfigTyper(checker or program_checker(program, zap=zap, switch=switch, allow_unknown=True))
    c0 = config_for_program(program, zap=zap, switch=switch)
    violations: list = []
    trace: list = []
    first = typer.type_config(c0)
    if not first.accepted:
        violations.append(Violation(0, "type_config", *first.failure, ""))
        return HarnessReport(name, seed, policy, 0, "Aborted", None, violations, config=c0)
    state = {"env": first.env}

    def observe(c, events):
        trace.extend(events)
        verdict = typer.type_config(c, state["env"])
        index = events[0].index
        if not verdict.accepted:
            prefix = format_trace(trace[-prefix_lines:])
            violations.append(Violation(index, "type_config", *verdict.failure, prefix))
            return True
        if not env_advances(state["env"], verdict.env, zap):
            prefix = format_trace(trace[-prefix_lines:])
            violations.append(Violation(index, "env_advances", events[0].rule, "env-step",
                                        f"{state['env']}  ~/~>  {verdict.env}", prefix))
            return True
        state["env"] = verdict.env
        return False

    try:
        result = run(c0, policy, seed, max_steps, inject=inject, corrupt_send_at=corrupt_send_at, observer=observe)
    except Exception as err:  # a stuck or crashing run is itself a finding
        return HarnessReport(name, seed, policy, len(trace), "Error", None, violations,
                             error=f"{type(err).__name__}: {err}", trace=trace)
    canonical = canonical_idle_check(result.config) if result.stop == "Quiescent" else None
    return HarnessReport(name, seed, policy, result.steps, result.stop, canonical, violations,
                         trace=result.trace, config=result.config)


def verify(program: M.Program, seeds, max_steps: int = 10_000, zap: bool = False, switch: bool = False,
           policy: str = "random", name: str = "", inject=None) -> list[HarnessReport]:
    """Run the harness once per seed, sharing the per-actor typing cache."""
    typer = ConfigTyper(program_checker(program, zap=zap, switch=switch, allow_unknown=True))
    reports = []
    for seed in seeds:
        inj = None
        if inject is not None:
            from .runtime import Injection

            inj = Injection(inject.actor, inject.step)
        reports.append(preservation_harness(program, policy, seed, max_steps, zap, switch, name=name, typer=typer,
                                            inject=inj))
    return reports


@dataclass
class ExplorationReport:
    program: str
    states: int
    edges: int
    quiescent: int
    complete: bool  # false when the state limit cut the search short
    violations: list

    @property
    def ok(self) -> bool:
        return not self.violations

    def as_dict(self) -> dict:
        return {"program": self.program, "mode": "exhaustive", "states": self.states, "edges": self.edges,
                "quiescent": self.quiescent, "complete": self.complete,
                "violations": [v.as_dict() for v in self.violations], "ok": self.ok}

    def json(self) -> str:
        return json.dumps(self.as_dict(), ensure_ascii=False, sort_keys=True)


def explore_interleavings(program: M.Program, zap: bool = False, switch: bool = False,
                          max_states: int = 100_000, *, name: str = "") -> ExplorationReport:
    """Check every interleaving of ``program`` instead of sampling one.

    Explores the reachable configurations breadth first, identifying
    configurations with the same ``signature``.  Every edge is checked with
    ``type_config`` and ``env_advances`` and every quiescent configuration
    with ``canonical_idle_check``.  No injections happen here, so in failure
    mode only crashes the program itself raises are covered.
    """
    from .runtime import enabled_redexes, step

    typer = ConfigTyper(program_checker(program, zap=zap, switch=switch, allow_unknown=True))
    c0 = config_for_program(program, zap=zap, switch=switch)
    first = typer.type_config(c0)
    if not first.accepted:
        return ExplorationReport(name, 1, 0, 0, True, [Violation(0, "type_config", *first.failure, "")])
    seen = {c0.signature()}
    todo = deque([(c0, first.env, 0)])
    violations: list = []
    edges = quiescent = 0
    complete = True
    while todo and not violations:
        c, env, depth = todo.popleft()
        redexes = enabled_redexes(c)
        if not redexes:
            quiescent += 1
            if not canonical_idle_check(c):
                violations.append(Violation(depth, "canonical", "-", "canonical form", c.signature(), ""))
            continue
        for r in redexes:
            c2, events = step(c, r, depth, check=False)
            edges += 1
            verdict = typer.type_config(c2, env)
            prefix = format_trace(events)
            if not verdict.accepted:
                violations.append(Violation(depth, "type_config", *verdict.failure, prefix))
                break
            if not env_advances(env, verdict.env, zap):
                violations.append(Violation(depth, "env_advances", r.rule, "env-step",
                                            f"{env}  ~/~>  {verdict.env}", prefix))
                break
            key = c2.signature()
            if key in seen:
                continue
            if len(seen) >= max_states:
                complete = False
                continue
            seen.add(key)
            todo.append((c2, verdict.env, depth + 1))
    return ExplorationReport(name, len(seen), edges, quiescent, complete and not todo,
                             violations)


__all__ = ["TypingVerdict", "ConfigTyper", "type_config", "env_advances", "preservation_harness", "verify",
           "explore_interleavings", "ExplorationReport", "HarnessReport", "Violation", "DEFAULT_BOUND"]
