"""Runtime type environments, their labelled transitions, and bounded
compliance checking (safety plus deadlock freedom).

An environment records the current session type of every endpoint, the
types of queued messages per ordered role pair, and the bookkeeping entries
for tokens, actors and access points.  Exploration is breadth-first over
canonical environments; when a send would push a queue past the bound the
successor is discarded.  Such a cut is harmless when the bounded graph is
exhaustive: every blocked send can still fire after the other endpoints
alone have drained its queue.  In that case the bounded verdict carries over
to unbounded queues; otherwise the verdict degrades to ``Unknown`` unless a
violation is found elsewhere.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Mapping

from . import types as T
from .types import node

DEFAULT_BOUND = 4
SESSION = "s"


@node
class Cancelled:
    def __str__(self) -> str:
        return "⚡"


CANCELLED = Cancelled()


def _canon(t):
    return t if isinstance(t, Cancelled) else T.unfold(t)


@node
class QueueType:
    """Per-pair FIFO queues of ``(label, payload)``; empty pairs are omitted."""

    pairs: tuple = ()

    def __post_init__(self):
        pairs = self.pairs
        if isinstance(pairs, Mapping):
            pairs = pairs.items()
        cleaned = tuple(sorted(((k, tuple(v)) for k, v in pairs if v), key=lambda e: e[0]))
        object.__setattr__(self, "pairs", cleaned)

    @classmethod
    def from_entries(cls, entries: Iterable[tuple]) -> "QueueType":
        """Build from a flat list of ``(sender, receiver, label, payload)``."""
        table: dict = {}
        for sender, receiver, label, payload in entries:
            table.setdefault((sender, receiver), []).append((label, payload))
        return cls(table)

    def get(self, sender: str, receiver: str) -> tuple:
        for k, v in self.pairs:
            if k == (sender, receiver):
                return v
        return ()

    def push(self, sender, receiver, label, payload) -> "QueueType":
        table = dict(self.pairs)
        table[(sender, receiver)] = table.get((sender, receiver), ()) + ((label, payload),)
        return QueueType(table)

    def pop(self, sender, receiver) -> "QueueType":
        table = dict(self.pairs)
        table[(sender, receiver)] = table[(sender, receiver)][1:]
        return QueueType(table)

    def longest(self) -> int:
        return max((len(v) for _, v in self.pairs), default=0)

    def __bool__(self) -> bool:
        return bool(self.pairs)

    def __str__(self) -> str:
        if not self.pairs:
            return "ε"
        return "; ".join(f"{p}->{q}: " + " · ".join(f"{l}({a})" for l, a in msgs) for (p, q), msgs in self.pairs)


EMPTY_QUEUE = QueueType()


@node
class RuntimeTypeEnv:
    endpoints: tuple = ()
    queues: tuple = ()
    tokens: tuple = ()
    actors: frozenset = frozenset()
    aps: frozenset = frozenset()

    def __post_init__(self):
        def norm(entries, canon=lambda x: x):
            if isinstance(entries, Mapping):
                entries = entries.items()
            return tuple(sorted(((k, canon(v)) for k, v in entries), key=lambda e: e[0]))

        object.__setattr__(self, "endpoints", norm(self.endpoints, _canon))
        object.__setattr__(self, "queues", norm(self.queues))
        object.__setattr__(self, "tokens", norm(self.tokens))
        object.__setattr__(self, "actors", frozenset(self.actors))
        object.__setattr__(self, "aps", frozenset(self.aps))

    def endpoint_map(self) -> dict:
        return dict(self.endpoints)

    def queue_map(self) -> dict:
        return dict(self.queues)

    def sessions(self) -> set[str]:
        return {s for (s, _), _ in self.endpoints} | {s for s, _ in self.queues}

    def restrict(self, session: str) -> "RuntimeTypeEnv":
        return RuntimeTypeEnv(
            tuple(e for e in self.endpoints if e[0][0] == session),
            tuple(q for q in self.queues if q[0] == session),
        )

    def __str__(self) -> str:
        parts = [f"{s}[{r}]: {T.show_session(t) if not isinstance(t, Cancelled) else '⚡'}"
                 for (s, r), t in self.endpoints]
        parts += [f"{s}: {q}" for s, q in self.queues]
        parts += [f"{tok}{pol}: {T.show_session(t)}" for (tok, pol), t in self.tokens]
        parts += sorted(self.actors) + sorted(self.aps)
        return ", ".join(parts) or "·"


@node
class SyncLabel:
    kind: str  # Send, Recv, End, ZapMsg, ZapRecv, Zap
    session: str
    sender: str
    receiver: str = ""
    label: str = ""

    def __str__(self) -> str:
        if self.kind in ("Send", "Recv", "ZapMsg"):
            return f"{self.kind}({self.session},{self.sender},{self.receiver},{self.label})"
        if self.kind == "ZapRecv":
            return f"ZapRecv({self.session},{self.sender},{self.receiver})"
        return f"{self.kind}({self.session},{self.sender})"

    def actor_field(self) -> str:
        return self.receiver if self.kind == "Recv" else self.sender

    def mover(self) -> str:
        """The role whose endpoint type this transition changes."""
        return self.receiver if self.kind in ("Recv", "ZapMsg") else self.sender


def protocol_env(protocol: T.Protocol, session: str = SESSION) -> RuntimeTypeEnv:
    return RuntimeTypeEnv({(session, r): s for r, s in protocol.entries}, {session: EMPTY_QUEUE})


# ---------------------------------------------------------------------------
# One-step transitions


def _replace(entries: tuple, index: int, value) -> tuple:
    key = entries[index][0]
    return entries[:index] + ((key, _canon(value)),) + entries[index + 1:]


def _with_queue(queues: tuple, session: str, q: QueueType) -> tuple:
    return tuple((s, q if s == session else old) for s, old in queues)


def _env(d: RuntimeTypeEnv, endpoints: tuple, queues: tuple) -> RuntimeTypeEnv:
    new = object.__new__(RuntimeTypeEnv)
    object.__setattr__(new, "endpoints", endpoints)
    object.__setattr__(new, "queues", queues)
    object.__setattr__(new, "tokens", d.tokens)
    object.__setattr__(new, "actors", d.actors)
    object.__setattr__(new, "aps", d.aps)
    return new


def env_step(d: RuntimeTypeEnv, zap: bool = False, spontaneous: bool = False) -> list[tuple[SyncLabel, RuntimeTypeEnv]]:
    """All one-step successors of ``d``.

    ``zap`` enables the cancellation rules for message dropping and receive
    cancellation; ``spontaneous`` additionally lets any live endpoint cancel.
    """
    out = []
    queues = dict(d.queues)
    eps = d.endpoints
    ep_map = dict(eps)
    for i, ((s, p), t) in enumerate(eps):
        if isinstance(t, Cancelled):
            continue
        match t:
            case T.End():
                out.append((SyncLabel("End", s, p), _env(d, eps[:i] + eps[i + 1:], d.queues)))
            case T.Select(q, msgs):
                if s in queues:
                    for m in msgs:
                        new_q = queues[s].push(p, q, m.label, m.payload)
                        out.append((SyncLabel("Send", s, p, q, m.label),
                                    _env(d, _replace(eps, i, m.cont), _with_queue(d.queues, s, new_q))))
            case T.Branch(q, msgs):
                if s in queues:
                    pending = queues[s].get(q, p)
                    if pending:
                        label, payload = pending[0]
                        m = T.lookup(msgs, label)
                        if m is not None and T.payload_equal(m.payload, payload):
                            out.append((SyncLabel("Recv", s, q, p, label),
                                        _env(d, _replace(eps, i, m.cont), _with_queue(d.queues, s, queues[s].pop(q, p)))))
                    elif zap and isinstance(ep_map.get((s, q)), Cancelled):
                        out.append((SyncLabel("ZapRecv", s, p, q), _env(d, _replace(eps, i, CANCELLED), d.queues)))
        if spontaneous:
            out.append((SyncLabel("Zap", s, p), _env(d, _replace(eps, i, CANCELLED), d.queues)))
    if zap:
        for s, q in d.queues:
            for (p, r), msgs in q.pairs:
                if isinstance(ep_map.get((s, r)), Cancelled):
                    out.append((SyncLabel("ZapMsg", s, p, r, msgs[0][0]),
                                _env(d, eps, _with_queue(d.queues, s, q.pop(p, r)))))
    return out


def unsafe_reason(d: RuntimeTypeEnv) -> str | None:
    """Why ``d`` fails the local safety check, or ``None`` if it passes."""
    queues = dict(d.queues)
    for (s, p), t in d.endpoints:
        if isinstance(t, T.Branch) and s in queues:
            pending = queues[s].get(t.role, p)
            if pending:
                label, payload = pending[0]
                m = T.lookup(t.branches, label)
                if m is None:
                    return f"{s}[{p}] expects one of {', '.join(T.labels(t.branches))} from {t.role} but the queue holds {label}"
                if not T.payload_equal(m.payload, payload):
                    return f"{s}[{p}] expects {label}({m.payload}) but the queue holds {label}({payload})"
    return None


def terminal_problem(d: RuntimeTypeEnv, zap: bool = False) -> str | None:
    """Classify a state without successors: ``None`` if it is an accepted
    terminal, else ``"Deadlock"`` or ``"OrphanQueue"``."""
    for _, t in d.endpoints:
        if not (zap and isinstance(t, Cancelled)):
            return "Deadlock"
    if any(q for _, q in d.queues):
        return "OrphanQueue"
    return None


# ---------------------------------------------------------------------------
# Exploration


@dataclass(frozen=True)
class ComplianceVerdict:
    status: str  # Compliant, Violation, Unknown
    kind: str = ""  # UnsafeComm, Deadlock, OrphanQueue for violations
    trace: tuple = ()
    states: int = 0
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "Compliant"

    def __str__(self) -> str:
        if self.status == "Violation":
            return f"Violation({self.kind})"
        if self.status == "Unknown":
            return "Unknown(bound exceeded)"
        return "Compliant"


def _trace_to(parents: dict, d) -> tuple:
    out = []
    while parents[d] is not None:
        d, label = parents[d]
        out.append(label)
    return tuple(reversed(out))


def _exceeds(label: SyncLabel, d: RuntimeTypeEnv, bound: int) -> bool:
    if label.kind != "Send":
        return False
    for s, q in d.queues:
        if s == label.session:
            return len(q.get(label.sender, label.receiver)) > bound
    return False


def explore(d0: RuntimeTypeEnv, bound: int = DEFAULT_BOUND, *, check_safe: bool = True,
            check_deadlock: bool = True, zap: bool = False) -> ComplianceVerdict:
    """Breadth-first exploration from ``d0`` deciding the requested properties.

    In ``zap`` mode every live endpoint may cancel spontaneously, dropped
    messages and cancelled receives are explored, and all-cancelled
    terminals are accepted.
    """
    parents = {d0: None}
    edges: dict = {}
    blocked = []
    todo = deque([d0])
    while todo:
        d = todo.popleft()
        if check_safe:
            reason = unsafe_reason(d)
            if reason:
                return ComplianceVerdict("Violation", "UnsafeComm", _trace_to(parents, d), len(parents), reason)
        succ = env_step(d, zap=zap, spontaneous=zap)
        if not succ and check_deadlock:
            problem = terminal_problem(d, zap)
            if problem:
                return ComplianceVerdict("Violation", problem, _trace_to(parents, d), len(parents), str(d))
        kept = []
        for label, d2 in succ:
            if _exceeds(label, d2, bound):
                blocked.append((d, label))
                continue
            kept.append((label, d2))
            if d2 not in parents:
                parents[d2] = (d, label)
                todo.append(d2)
        edges[d] = kept
    for d, label in blocked:
        if not _send_unblocks(edges, d, label, bound):
            return ComplianceVerdict("Unknown", states=len(parents),
                                     detail=f"{label} stays blocked at queue bound {bound}")
    return ComplianceVerdict("Compliant", states=len(parents))


def _queue_len(d: RuntimeTypeEnv, session: str, sender: str, receiver: str) -> int:
    for s, q in d.queues:
        if s == session:
            return len(q.get(sender, receiver))
    return 0


def _send_unblocks(edges: dict, d0: RuntimeTypeEnv, label: SyncLabel, bound: int) -> bool:
    """Whether the other endpoints can drain the queue so the blocked send fits.

    Only transitions that leave the sender's endpoint untouched are followed,
    so the send stays enabled along the way.
    """
    seen = {d0}
    todo = [d0]
    while todo:
        d = todo.pop()
        if _queue_len(d, label.session, label.sender, label.receiver) < bound:
            return True
        for lab, d2 in edges.get(d, ()):
            if d2 in seen or (lab.session == label.session and lab.mover() == label.sender):
                continue
            seen.add(d2)
            todo.append(d2)
    return False


@lru_cache(maxsize=None)
def _check_protocol(protocol: T.Protocol, bound: int, safe_: bool, df: bool, zap: bool) -> ComplianceVerdict:
    return explore(protocol_env(protocol), bound, check_safe=safe_, check_deadlock=df, zap=zap)


def safe(p: T.Protocol, bound: int = DEFAULT_BOUND) -> ComplianceVerdict:
    return _check_protocol(p, bound, True, False, False)


def deadlock_free(p: T.Protocol, bound: int = DEFAULT_BOUND) -> ComplianceVerdict:
    return _check_protocol(p, bound, False, True, False)


def compliant(p: T.Protocol, bound: int = DEFAULT_BOUND) -> ComplianceVerdict:
    return _check_protocol(p, bound, True, True, False)


def compliant_zap(p: T.Protocol, bound: int = DEFAULT_BOUND) -> ComplianceVerdict:
    return _check_protocol(p, bound, True, True, True)


def reachable_envs(d0: RuntimeTypeEnv, bound: int, zap: bool = False) -> list[RuntimeTypeEnv]:
    """Every environment reachable from ``d0`` without exceeding ``bound``."""
    seen = {d0}
    order = [d0]
    todo = deque([d0])
    while todo:
        d = todo.popleft()
        for label, d2 in env_step(d, zap=zap, spontaneous=zap):
            if _exceeds(label, d2, bound) or d2 in seen:
                continue
            seen.add(d2)
            order.append(d2)
            todo.append(d2)
    return order


def format_witness(verdict: ComplianceVerdict) -> str:
    """Render a violation witness in the trace text format."""
    lines = []
    for i, label in enumerate(verdict.trace):
        detail = f"{label.sender}->{label.receiver}:{label.label}" if label.receiver else label.sender
        if label.kind == "Zap" or label.kind == "End":
            detail = label.sender
        lines.append(f"#{i} Lbl{label.kind} session={label.session} actor={label.actor_field()} detail={detail}")
    return "\n".join(lines)
