import re
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maty import types as T
from maty.compliance import CANCELLED, EMPTY_QUEUE, QueueType, RuntimeTypeEnv, env_step, protocol_env
from maty.config import config_for_program
from maty.metatheory import env_advances, explore_interleavings, preservation_harness, type_config, verify
from maty.parser import parse_session_type as S
from maty.parser import parse_program
from maty.runtime import Injection, run
from maty.typecheck import program_checker
from programs import EXAMPLES, load

PING_PONG = T.Protocol({"Pinger": S("Ponger!{Ping().Ponger?{Pong().end}}"),
                        "Ponger": S("Pinger?{Ping().Pinger!{Pong().end}}")})


def test_initial_configuration_is_typable():
    for name, ex in EXAMPLES.items():
        c0 = config_for_program(load(name), zap=ex.zap, switch=ex.switch)
        verdict = type_config(c0, program_checker(load(name), zap=ex.zap, switch=ex.switch))
        assert verdict.accepted, (name, verdict.failure)
        assert not verdict.env.sessions()


@pytest.mark.parametrize("name", sorted(EXAMPLES))
def test_every_reached_configuration_is_typable(name):
    ex = EXAMPLES[name]
    checker = program_checker(load(name), zap=ex.zap, switch=ex.switch, allow_unknown=True)
    r = run(config_for_program(load(name), zap=ex.zap, switch=ex.switch), "random", 4, 300)
    assert type_config(r.config, checker).accepted


def test_corrupted_send_is_caught():
    report = preservation_harness(load("pingpong"), "random", 1, 100, corrupt_send_at=0)
    assert not report.ok
    (v,) = report.violations
    assert v.kind == "type_config" and v.step < 100
    assert "ESend" in v.trace_prefix


@settings(max_examples=10)
@given(st.integers(0, 60))
def test_ill_typed_corruption_is_always_caught(at):
    # The corruption swaps the payload for the integer 0, which is only
    # ill-typed when the message does not carry an Int.
    report = preservation_harness(load("idserver"), "random", 2, 300, corrupt_send_at=at)
    r = run(config_for_program(load("idserver")), "random", 2, 300)
    first = next((e for e in r.trace if e.rule == "ESend" and e.index >= at), None)
    ill_typed = first is not None and re.search(r"\(-?\d+\)$", first.detail) is None
    assert (not report.ok) == ill_typed


def test_env_advances_by_one_step():
    d0 = protocol_env(PING_PONG, "s")
    ((_, d1),) = env_step(d0)
    ((_, d2),) = env_step(d1)
    assert env_advances(d0, d0)
    assert env_advances(d0, d1)
    assert env_advances(d1, d2)
    assert not env_advances(d0, d2)
    assert not env_advances(d1, d0)


def test_env_advances_allows_fresh_sessions():
    empty = RuntimeTypeEnv({}, {})
    assert env_advances(empty, protocol_env(PING_PONG, "s"))


def test_finished_session_may_disappear_only_when_done():
    d = protocol_env(PING_PONG, "s")
    assert not env_advances(d, RuntimeTypeEnv({}, {}))
    done = RuntimeTypeEnv({("s", "Pinger"): T.END, ("s", "Ponger"): T.END}, {"s": EMPTY_QUEUE})
    assert env_advances(done, RuntimeTypeEnv({}, {}))


def test_cancellation_steps_are_free_only_with_zap():
    d0 = RuntimeTypeEnv({("s", "p"): S("q!{a().end}"), ("s", "q"): S("p?{a().end}")}, {"s": EMPTY_QUEUE})
    d1 = RuntimeTypeEnv({("s", "p"): CANCELLED, ("s", "q"): S("p?{a().end}")}, {"s": EMPTY_QUEUE})
    assert env_advances(d0, d1, zap=True)
    assert not env_advances(d0, d1, zap=False)


def test_message_payload_must_match():
    q = QueueType.from_entries([("p", "q", "a", T.UNIT)])
    bad = QueueType.from_entries([("p", "q", "a", T.INT)])
    d0 = RuntimeTypeEnv({("s", "p"): S("q!{a().end}"), ("s", "q"): S("p?{a().end}")}, {"s": EMPTY_QUEUE})
    ok = RuntimeTypeEnv({("s", "p"): T.END, ("s", "q"): S("p?{a().end}")}, {"s": q})
    wrong = RuntimeTypeEnv({("s", "p"): T.END, ("s", "q"): S("p?{a().end}")}, {"s": bad})
    assert env_advances(d0, ok)
    assert not env_advances(d0, wrong)


@pytest.mark.parametrize("name", sorted(EXAMPLES))
def test_verify_few_seeds(name):
    ex = EXAMPLES[name]
    for report in verify(load(name), range(3), 2000, zap=ex.zap, switch=ex.switch, name=name):
        assert report.ok, report.json()
        assert report.as_dict()["program"] == name


def config_after(name, rule, seed=1, inject=None):
    """The configurations just before and just after the first ``rule`` step."""
    ex = EXAMPLES[name]
    seen = {"last": config_for_program(load(name), zap=ex.zap, switch=ex.switch)}

    def observe(c, events):
        if any(e.rule == rule for e in events):
            seen["before"], seen["after"] = seen["last"], c
            return True
        seen["last"] = c
        return False

    run(seen["last"], "random", seed, 10_000, inject=inject, observer=observe)
    return seen["before"], seen["after"]


def test_queued_message_is_typed():
    _, c = config_after("pingpong", "ESend")
    verdict = type_config(c, program_checker(load("pingpong")))
    assert verdict.accepted
    assert verdict.env.endpoint_map()[("s1", "Pinger")] == S("Ponger?{Pong().end}")
    assert verdict.env.queue_map()["s1"].get("Pinger", "Ponger") == (("Ping", T.UNIT),)


def test_handler_at_output_type_is_rejected():
    _, c = config_after("pingpong", "ESuspend")
    (holder,) = [a for a in c.actors.values() if a.handlers]
    (s, role), _ = holder.handlers[0]
    protocol = dict(c.session_protocols[s].items())
    protocol[role] = S(f"{'Pinger' if role == 'Ponger' else 'Ponger'}!{{Ping().end}}")
    c.session_protocols[s] = T.Protocol(protocol)
    verdict = type_config(c, program_checker(load("pingpong")))
    assert not verdict.accepted
    assert verdict.failure[1] == "TH-Handler"


def test_raise_step_needs_zap_closure():
    before, after = config_after("supervised_shop", "ERaiseS", 0, Injection("shop", 148))
    checker = program_checker(load("supervised_shop"), zap=True, allow_unknown=True)
    d1 = type_config(before, checker).env
    d2 = type_config(after, checker).env
    assert d1 is not None and d2 is not None
    assert env_advances(d1, d2, zap=True)
    assert not env_advances(d1, d2, zap=False)


@pytest.mark.parametrize("name", sorted(EXAMPLES))
def test_typing_is_linear_and_stable(name):
    ex = EXAMPLES[name]
    checker = program_checker(load(name), zap=ex.zap, switch=ex.switch, allow_unknown=True)
    r = run(config_for_program(load(name), zap=ex.zap, switch=ex.switch), "random", 9, 150)
    first = type_config(r.config, checker)
    again = type_config(r.config, checker)
    assert first.env == again.env
    keys = [key for key, _ in first.env.endpoints]
    assert len(keys) == len(set(keys))
    live = {key for key in r.config.live_endpoints() if key not in r.config.zapped_endpoints}
    assert live <= set(keys)


def test_exhaustive_exploration_of_pingpong():
    report = explore_interleavings(load("pingpong"), name="pingpong")
    assert report.ok and report.complete
    assert report.quiescent == 1 and report.states > 24


def test_exhaustive_exploration_of_zap_program():
    path = Path(__file__).parent / "zap" / "crash.maty"
    report = explore_interleavings(parse_program(path.read_text(), str(path)), zap=True)
    assert report.ok and report.complete and report.quiescent >= 1


def test_exhaustive_exploration_respects_state_limit():
    report = explore_interleavings(load("robot"), max_states=300)
    assert report.ok and not report.complete and report.states == 300
