import re
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maty import types as T
from maty.compliance import CANCELLED, EMPTY_QUEUE, RuntimeTypeEnv, compliant_zap, explore
from maty.config import canonical_idle_check, config_for_program
from maty.metatheory import preservation_harness
from maty.parser import parse_program
from maty.parser import parse_session_type as S
from maty.runtime import Injection, run
from maty.typecheck import check_program
from cascade import cascade_positions, completed_sessions_after
from programs import CASCADE_SEED, CASCADE_STEP, load

ZAP = Path(__file__).parent / "zap"


def zap_program(name):
    path = ZAP / f"{name}.maty"
    return parse_program(path.read_text(), str(path))


def rules(trace):
    return [e.rule for e in trace]


@pytest.mark.parametrize("name", ["crash", "orphan", "leave", "replaced"])
def test_zap_programs_typecheck_only_with_zap(name):
    prog = zap_program(name)
    assert check_program(prog, zap=True).ok
    assert not check_program(prog).ok


def test_raise_outside_session_leaves_only_the_actor_zap():
    seen = {}

    def observe(c, events):
        if events[0].rule == "ERaise":
            seen["config"], seen["events"] = c, events
            return True
        return False

    run(config_for_program(zap_program("orphan"), zap=True), "random", 0, 200, observer=observe)
    c = seen["config"]
    # Nothing refers to the crashed actor, so its zap is collected at once.
    assert "loner1" not in c.actors and "loner1" not in c.zapped_actors
    assert [e.detail for e in seen["events"]] == ["zapped=-", "actor:loner1"]
    assert not c.zapped_endpoints and c.zapped_tokens == {"t1"}


@settings(max_examples=25)
@given(st.integers(0, 2**32 - 1))
def test_crash_in_session_cancels_peer(seed):
    r = run(config_for_program(zap_program("crash"), zap=True), "random", seed, 500)
    assert r.stop == "Quiescent" and canonical_idle_check(r.config)
    seen = rules(r.trace)
    assert seen.count("ERaiseS") == 1
    assert "ECancelMsg" in seen and "ECancelH" in seen
    assert "EInvokeM" in seen
    drop = next(e for e in r.trace if e.rule == "ECancelMsg")
    assert drop.detail.endswith("dropped=Ping")
    assert seen.index("ERaiseS") < seen.index("ECancelMsg")


def test_monitor_callback_runs_after_crash():
    r = run(config_for_program(zap_program("crash"), zap=True), "random", 1, 500)
    invoke = next(e for e in r.trace if e.rule == "EInvokeM")
    assert invoke.actor == "main" and invoke.detail == "watched=ponger1"


def test_crash_before_session_withdraws_registration():
    r = run(config_for_program(zap_program("orphan"), zap=True), "random", 0, 200)
    assert r.stop == "Quiescent"
    assert rules(r.trace)[-1] == "ECancelAP"
    assert not any(entries for _, entries in r.config.aps["ap1"].pending)
    assert canonical_idle_check(r.config)


def test_leave_cancels_peer_handler():
    r = run(config_for_program(zap_program("leave"), zap=True), "random", 1, 200)
    seen = rules(r.trace)
    assert seen.index("ELeave") < seen.index("ECancelH")
    assert canonical_idle_check(r.config)


@pytest.mark.parametrize("name", ["crash", "orphan", "leave", "replaced"])
def test_zap_programs_preserve_typing(name):
    for seed in range(10):
        report = preservation_harness(zap_program(name), "random", seed, 500, zap=True)
        assert report.ok, report.json()


def test_failure_rules_are_inactive_in_core_mode():
    r = run(config_for_program(load("pingpong")), "random", 0, 500, inject=Injection("pinger", 0))
    assert "INJECT" not in rules(r.trace)


def cascade_run():
    c0 = config_for_program(load("supervised_shop"), zap=True)
    return run(c0, "random", CASCADE_SEED, 10_000, inject=Injection("shop", CASCADE_STEP))


def test_supervised_shop_failure_cascade():
    r = cascade_run()
    positions = cascade_positions(r.trace)
    assert positions is not None and positions == sorted(positions)
    new_shop = r.trace[positions[-1]].actor
    assert new_shop != r.trace[positions[0]].actor
    assert completed_sessions_after(r.trace, positions[-1], new_shop)


def test_cascade_is_deterministic():
    assert cascade_run().trace_text() == cascade_run().trace_text()


def test_cascade_run_preserves_typing():
    report = preservation_harness(load("supervised_shop"), "random", CASCADE_SEED, 10_000, zap=True,
                                  inject=Injection("shop", CASCADE_STEP))
    assert report.ok, report.json()


def test_item_seven_crashes_the_shop_without_injection():
    r = run(config_for_program(load("supervised_shop"), zap=True), "random", 3, 10_000)
    assert any(e.rule == "ERaiseS" and e.actor.startswith("shop") for e in r.trace)
    assert any(e.rule == "EInvokeM" for e in r.trace)
    assert r.stop == "Quiescent" and canonical_idle_check(r.config)


@settings(max_examples=25)
@given(st.integers(0, 2**32 - 1))
def test_sessions_only_pair_live_registrants(seed):
    r = run(config_for_program(zap_program("replaced"), zap=True), "random", seed, 500)
    (init,) = [e for e in r.trace if e.rule == "EInit"]
    assert "loner" not in init.detail
    assert "ECancelAP" in rules(r.trace)
    assert r.stop == "Quiescent" and canonical_idle_check(r.config)


def zap_runs():
    c0 = config_for_program(load("supervised_shop"), zap=True)
    for seed in range(6):
        yield run(c0, "random", seed, 10_000, inject=Injection("shop", 40 + 30 * seed))
        yield run(c0, "random", seed, 10_000)


ENDPOINT = re.compile(r"\S+\[\w+\]")


def test_no_delivery_to_cancelled_endpoints():
    for r in zap_runs():
        zapped = set()
        for e in r.trace:
            if e.rule in ("ERaiseS", "ERaise", "ELeave"):
                zapped.update(ENDPOINT.findall(e.detail))
            elif e.rule == "ECancelH":
                zapped.add(e.detail.split()[0])
            elif e.rule == "EReact":
                assert e.detail.split()[0] not in zapped, e.line()


def test_monitors_fire_at_most_once():
    for r in zap_runs():
        installed, fired = {}, {}
        for e in r.trace:
            if e.rule in ("EMonitor", "EInvokeM"):
                table = installed if e.rule == "EMonitor" else fired
                key = (e.actor, e.detail)
                table[key] = table.get(key, 0) + 1
        for key, n in fired.items():
            assert n <= installed.get(key, 0)


def test_every_session_ends_in_quiescent_runs():
    for r in zap_runs():
        if r.stop != "Quiescent":
            continue
        started = {re.search(r"session=(\S+)", e.detail).group(1) for e in r.trace if e.rule == "EInit"}
        collected = {e.detail.split(":", 1)[1] for e in r.trace if e.rule == "GC" and e.detail.startswith("session:")}
        assert started == collected


def test_zaps_cannot_hide_unsafe_protocols():
    bad = T.Protocol({"p": S("q!{l(Int).end}"), "q": S("p?{l(Bool).end}")})
    v = compliant_zap(bad, 2)
    assert v.status == "Violation" and v.kind == "UnsafeComm"


def test_all_cancelled_environment_is_terminal():
    d = RuntimeTypeEnv({("s", "p"): CANCELLED, ("s", "q"): CANCELLED}, {"s": EMPTY_QUEUE})
    assert explore(d, 2, zap=True).ok
