from collections import defaultdict, deque

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maty import terms as M
from maty import types as T
from maty.config import Actor, Configuration, Idle, InSession, canonical_idle_check, config_for_program
from maty.runtime import Redex, enabled_redexes, run, step
from programs import load


def parked_config(theta, parked):
    c = Configuration(switch=True)
    c.actors["a"] = Actor("a", Idle(M.const(0)), T.INT, theta=theta, send_suspended=parked)
    return c


FN_A, FN_B = M.Var("fnA"), M.Var("fnB")
PARKED = (("N", ((("s1", "p"), FN_A), (("s2", "p"), FN_B))),)


def test_activate_resumes_oldest_parked_endpoint():
    c = parked_config((("N", M.const(1)),), PARKED)
    (r,) = enabled_redexes(c)
    assert r == Redex("EActivate", "a", extra="N")
    c2, events = step(c, r)
    thread = c2.actors["a"].thread
    assert thread == InSession("s1", "p", M.App(FN_A, M.Pair(M.const(1), M.const(0))))
    assert c2.actors["a"].suspended_map()["N"] == ((("s2", "p"), FN_B),)
    assert c2.actors["a"].theta == ()
    assert events[0].detail == "name=N s1[p]"


def test_requests_are_served_strictly_in_order():
    c = parked_config((("M", M.const(1)), ("N", M.const(2))), PARKED)
    assert enabled_redexes(c) == []


def test_no_activation_without_request():
    assert enabled_redexes(parked_config((), PARKED)) == []


def test_no_activation_while_busy():
    c = parked_config((("N", M.const(1)),), PARKED)
    c.actors["a"] = Actor("a", InSession("s3", "q", M.Return(M.const(0))), T.INT,
                          theta=(("N", M.const(1)),), send_suspended=PARKED)
    assert all(r.rule != "EActivate" for r in enabled_redexes(c))


def in_session(comp, parked=()):
    c = Configuration(switch=True)
    c.actors["a"] = Actor("a", InSession("s3", "p", comp), T.INT, send_suspended=parked)
    c.sessions["s3"] = {}
    return c


def test_suspend_send_creates_fifo():
    c = in_session(M.SuspendSend("N", FN_A, M.const(4)))
    (r,) = enabled_redexes(c)
    assert r.rule == "ESuspendSend"
    c2, _ = step(c, r)
    actor = c2.actors["a"]
    assert actor.thread == Idle(M.const(4))
    assert actor.suspended_map() == {"N": ((("s3", "p"), FN_A),)}


def test_suspend_send_appends_to_fifo():
    c = in_session(M.SuspendSend("N", FN_B, M.const(4)), PARKED)
    c2, _ = step(c, enabled_redexes(c)[0])
    entries = c2.actors["a"].suspended_map()["N"]
    assert [key for key, _ in entries] == [("s1", "p"), ("s2", "p"), ("s3", "p")]


def test_become_queues_request_and_continues():
    c = in_session(M.Let("x", M.Become("N", M.const(9)), M.Return(M.const(1))))
    c2, events = step(c, enabled_redexes(c)[0])
    assert events[0].rule == "EBecome"
    actor = c2.actors["a"]
    assert actor.theta == (("N", M.const(9)),)
    assert actor.thread.comp == M.Let("x", M.Return(M.UNIT_VALUE), M.Return(M.const(1)))


def test_cancelled_parked_endpoints_are_skipped():
    c = Configuration(zap=True, switch=True, zapped_endpoints=frozenset({("s1", "p")}))
    c.actors["a"] = Actor("a", Idle(M.const(0)), T.INT, theta=(("N", M.const(1)),), send_suspended=PARKED)
    (r,) = [r for r in enabled_redexes(c) if r.rule == "EActivate"]
    c2, events = step(c, r)
    assert c2.actors["a"].thread.session == "s2"
    assert events[0].detail == "name=N s2[p] warning=dropped-1-cancelled"
    assert "N" not in c2.actors["a"].suspended_map()


def test_requests_for_only_cancelled_endpoints_wait():
    c = Configuration(zap=True, switch=True, zapped_endpoints=frozenset({("s1", "p"), ("s2", "p")}))
    c.actors["a"] = Actor("a", Idle(M.const(0)), T.INT, theta=(("N", M.const(1)),), send_suspended=PARKED)
    assert [r for r in enabled_redexes(c) if r.rule == "EActivate"] == []


@given(st.lists(st.sampled_from(["M", "N"]), max_size=4), st.lists(st.sampled_from(["M", "N"]), max_size=4))
def test_matching_head_request_is_always_served(requests, parked_names):
    parked = {}
    for i, name in enumerate(parked_names):
        parked[name] = parked.get(name, ()) + (((f"s{i}", "p"), FN_A),)
    c = parked_config(tuple((n, M.const(0)) for n in requests), tuple(sorted(parked.items())))
    enabled = [r for r in enabled_redexes(c) if r.rule == "EActivate"]
    expected = bool(requests) and requests[0] in parked
    assert bool(enabled) == expected


def test_switching_rules_are_inactive_in_core_mode():
    c = parked_config((("N", M.const(1)),), PARKED)
    core = Configuration(actors=c.actors)
    assert enabled_redexes(core) == []


def switch_events(trace):
    return [e for e in trace if e.rule in ("ESuspendSend", "EBecome", "EActivate")]


def check_fifo(trace):
    """Replays the switching events of a trace against per-actor queues."""
    requests = defaultdict(deque)
    parked = defaultdict(deque)
    activations = 0
    for e in switch_events(trace):
        name = e.detail.split()[0].split("=", 1)[1]
        if e.rule == "EBecome":
            requests[e.actor].append(name)
        elif e.rule == "ESuspendSend":
            parked[(e.actor, name)].append(e.detail.split()[1])
        else:
            assert requests[e.actor] and requests[e.actor].popleft() == name
            assert parked[(e.actor, name)].popleft() == e.detail.split()[1]
            activations += 1
    return activations


@settings(max_examples=20)
@given(st.integers(0, 2**32 - 1))
def test_restock_shop_switches_in_fifo_order(seed):
    r = run(config_for_program(load("shop_restock"), switch=True), "random", seed, 10_000)
    assert r.stop == "Quiescent" and canonical_idle_check(r.config)
    assert check_fifo(r.trace) >= 1


@pytest.mark.parametrize("policy", ["roundrobin", "fair"])
def test_restock_shop_under_other_policies(policy):
    r = run(config_for_program(load("shop_restock"), switch=True), policy, 5, 10_000)
    assert r.stop == "Quiescent" and canonical_idle_check(r.config)
    check_fifo(r.trace)


def test_two_pending_requests_are_served_in_order():
    for seed in range(40):
        r = run(config_for_program(load("shop_restock"), switch=True), "random", seed, 10_000)
        events = switch_events(r.trace)
        kinds = [e.rule for e in events]
        if any(a == b == "EBecome" for a, b in zip(kinds, kinds[1:])):
            break
    else:
        pytest.fail("no run with two pending restock requests")
    assert check_fifo(r.trace) >= 2
    exchange = [e.detail.split(":")[1].split("(")[0] for e in r.trace
                if e.rule == "ESend" and e.detail.split(":")[0] in ("Shop->Supplier", "Supplier->Shop")]
    assert exchange == ["order", "ordered"] * (len(exchange) // 2)
