"""Checks the shape of a supervised-shop failure cascade in a trace."""

from __future__ import annotations

import re

STAGES = (
    "raise shop",
    "drop queued checkout",
    "cancel customer handler",
    "cancel payment processor handler",
    "collect session",
    "invoke supervisor monitor",
    "spawn replacement shop",
    "replacement shop registers",
)


def _base(actor: str) -> str:
    return re.sub(r"\d+$", "", actor)


def cascade_positions(trace) -> list[int] | None:
    """Return the trace positions of each cascade stage, or ``None``.

    Each stage is the first matching event after the previous stage, and
    the stages must refer to the session the shop was serving when it
    crashed.
    """
    events = list(trace)
    i = next((k for k, e in enumerate(events) if e.rule == "ERaiseS" and _base(e.actor) == "shop"), None)
    if i is None:
        return None
    shop = events[i].actor
    positions = [i]

    def find(start, pred):
        return next((k for k in range(start, len(events)) if pred(events[k])), None)

    k = find(i, lambda e: e.rule == "ECancelMsg" and "dropped=checkout" in e.detail)
    if k is None:
        return None
    session = events[k].actor
    positions.append(k)
    for pred in (
        lambda e: e.rule == "ECancelH" and _base(e.actor) == "customer" and e.detail.startswith(f"{session}["),
        lambda e: e.rule == "ECancelH" and _base(e.actor) == "paymentProcessor" and e.detail.startswith(f"{session}["),
        lambda e: e.rule == "GC" and e.detail == f"session:{session}",
        lambda e: e.rule == "EInvokeM" and e.detail == f"watched={shop}",
    ):
        k = find(k + 1, pred)
        if k is None:
            return None
        positions.append(k)
    sup = events[k].actor
    k = find(k + 1, lambda e: e.rule == "ESpawn" and e.actor == sup)
    if k is None:
        return None
    positions.append(k)
    new_shop = events[k].detail.split("=", 1)[1]
    k = find(k + 1, lambda e: e.rule == "ERegister" and e.actor == new_shop)
    if k is None:
        return None
    positions.append(k)
    return positions


def completed_sessions_after(trace, start: int, shop: str) -> list[str]:
    """Sessions started after ``start`` with ``shop`` that ran to completion."""
    events = list(trace)
    started = []
    for e in events[start:]:
        if e.rule == "EInit" and f"Shop:{shop}" in e.detail:
            started.append(re.search(r"session=(\S+)", e.detail).group(1))
    done = []
    for s in started:
        quit_sent = any(e.rule == "ESend" and e.label == s and ":quit(" in e.detail for e in events[start:])
        collected = any(e.rule == "GC" and e.detail == f"session:{s}" for e in events[start:])
        if quit_sent and collected:
            done.append(s)
    return done
