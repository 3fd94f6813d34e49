from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from maty import terms as M
from maty import types as T
from maty.parser import parse_program
from maty.parser import parse_session_type as S
from maty.typecheck import (EMPTY_ENV, ERROR_CODES, Checker, TypeEnv, TypingError, check_computation,
                            check_program, check_value)
from programs import EXAMPLES, load

NEGATIVE = sorted((Path(__file__).parent / "negative").glob("*.maty"))

SERVER_TY = S("rec S. Client?{IDRequest().Client!{IDResponse(Int).S, Unavailable().S},"
              " LockRequest().Client!{Locked().Client?{Unlock().S}, Unavailable().S}, Quit().end}")
STATE = T.Pair(T.INT, T.BOOL)

ID_HANDLER = '''
import "idserver.scr"
type ServerTy = IDServer@Server

def requestHandler : Handler(ServerTy, Int * Bool) =
  handler Client st {
    IDRequest ->
      let (curID, locked) = st in
      if locked then
        Client ! Unavailable;
        suspend requestHandler st
      else
        Client ! IDResponse(curID);
        suspend requestHandler (curID + 1, locked)
  | LockRequest ->
      Client ! Unavailable;
      suspend requestHandler st
  | Quit -> return st
  }

main = return ()
'''


def expected_code(path: Path) -> str:
    return path.read_text().splitlines()[0].split("expect:")[1].strip()


def modes(path: Path) -> dict:
    text = path.read_text()
    return {"zap": "mode: zap" in text, "switch": "mode: switch" in text}


@pytest.mark.parametrize("name", sorted(EXAMPLES))
def test_examples_typecheck(name):
    ex = EXAMPLES[name]
    verdict = check_program(load(name), zap=ex.zap, switch=ex.switch)
    assert verdict.ok, [e.line() for e in verdict.errors]


def test_negative_suite_has_enough_programs():
    assert len(NEGATIVE) >= 10
    assert len({expected_code(p) for p in NEGATIVE}) >= 10


@pytest.mark.parametrize("path", NEGATIVE, ids=lambda p: p.stem)
def test_negative_program_rejected_with_code(path):
    verdict = check_program(parse_program(path.read_text(), str(path)), **modes(path))
    codes = [e.code for e in verdict.errors]
    assert codes and codes[0] == expected_code(path), codes
    assert all(e.span for e in verdict.errors)


def test_restock_needs_switch_mode():
    verdict = check_program(load("shop_restock"))
    assert {e.code for e in verdict.errors} == {"ExtensionNotEnabled"}


def test_supervised_shop_needs_zap_mode():
    verdict = check_program(load("supervised_shop"))
    assert "ExtensionNotEnabled" in {e.code for e in verdict.errors}


def test_handler_value_has_handler_type():
    prog = parse_program(ID_HANDLER)
    checker = Checker(globals={n: d.ty for n, d in prog.defs.items()})
    ty = checker.check_value(EMPTY_ENV, prog.defs["requestHandler"].value)
    assert T.payload_equal(ty, T.Handler(SERVER_TY, STATE))


def test_send_advances_session_type():
    select_ty = S("Client!{IDResponse(Int).rec S. Client?{IDRequest().Client!{IDResponse(Int).S, Unavailable().S},"
                  " LockRequest().Client!{Locked().Client?{Unlock().S}, Unavailable().S}, Quit().end},"
                  " Unavailable().end}")
    env = TypeEnv({"curID": T.INT})
    ty, post = check_computation(env, STATE, select_ty, M.Send("Client", "IDResponse", M.Var("curID")))
    assert ty == T.UNIT and T.session_equal(post, SERVER_TY)


@given(st.sampled_from([T.END, SERVER_TY, S("p!{a().end}")]))
def test_return_leaves_session_unchanged(pre):
    ty, post = check_computation(EMPTY_ENV, T.INT, pre, M.Return(M.const(5)))
    assert ty == T.INT and post == pre


def test_suspend_and_return_join_through_bottom():
    prog = parse_program(ID_HANDLER)
    verdict = check_program(prog)
    assert verdict.ok, [e.line() for e in verdict.errors]


def test_handler_ending_early_is_rejected():
    bad = ID_HANDLER.replace("suspend requestHandler (curID + 1, locked)", "return (curID + 1, locked)")
    verdict = check_program(parse_program(bad))
    assert [e.code for e in verdict.errors] == ["PrePostMismatch"]


def test_quit_not_offered_is_rejected():
    bad = ID_HANDLER.replace("Client ! Unavailable;\n      suspend requestHandler st\n  | Quit",
                             "Client ! Quit;\n      suspend requestHandler st\n  | Quit")
    verdict = check_program(parse_program(bad))
    assert [e.code for e in verdict.errors] == ["LabelNotInSelection"]


def test_spawn_returns_pid_only_in_zap_mode():
    body = M.Spawn(M.Return(M.UNIT_VALUE), T.UNIT)
    assert check_computation(EMPTY_ENV, T.UNIT, T.END, body)[0] == T.UNIT
    assert check_computation(EMPTY_ENV, T.UNIT, T.END, body, Checker(zap=True))[0] == T.PID


def test_value_typing():
    assert check_value(EMPTY_ENV, M.UNIT_VALUE) == T.UNIT
    assert check_value(EMPTY_ENV, M.Pair(M.const(1), M.const(True))) == T.Pair(T.INT, T.BOOL)
    with pytest.raises(TypingError) as info:
        check_value(EMPTY_ENV, M.Var("nope"))
    assert info.value.code == "UnboundVar"


def test_error_codes_are_fixed():
    assert set(ERROR_CODES) >= {"LabelNotInSelection", "PayloadMismatch", "StateTypeMismatch",
                                "PrePostMismatch", "NonCompliantProtocol", "ExtensionNotEnabled", "UnboundVar"}


@pytest.mark.parametrize("name", sorted(EXAMPLES))
def test_typechecking_is_deterministic(name):
    ex = EXAMPLES[name]
    first = check_program(load(name), zap=ex.zap, switch=ex.switch)
    second = check_program(load(name), zap=ex.zap, switch=ex.switch)
    assert [e.line() for e in first.errors] == [e.line() for e in second.errors]


@pytest.mark.parametrize("path", NEGATIVE, ids=lambda p: p.stem)
def test_negative_errors_are_deterministic(path):
    prog = parse_program(path.read_text(), str(path))
    assert ([e.line() for e in check_program(prog, **modes(path)).errors]
            == [e.line() for e in check_program(prog, **modes(path)).errors])
