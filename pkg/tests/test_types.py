import pytest
from hypothesis import given
from hypothesis import strategies as st

from maty import types as T
from maty.parser import parse_payload_type, parse_session_type
from strategies import session_types


def test_unfold_exposes_communication():
    t = T.Rec("X", T.Select("p", (T.Msg("a", T.UNIT, T.Var("X")),)))
    u = T.unfold(t)
    assert isinstance(u, T.Select)
    assert u.branches[0].cont == t


def test_unfold_rejects_free_variable():
    with pytest.raises(ValueError):
        T.unfold(T.Var("X"))


def test_equi_recursive_equality():
    loop = parse_session_type("rec X. p!{a(Int).X}")
    twice = parse_session_type("rec Y. p!{a(Int).p!{a(Int).Y}}")
    assert T.session_equal(loop, twice)
    assert not T.session_equal(loop, parse_session_type("p!{a(Int).end}"))


def test_equality_distinguishes_payloads_and_roles():
    assert not T.session_equal(parse_session_type("p!{a(Int).end}"), parse_session_type("p!{a(Bool).end}"))
    assert not T.session_equal(parse_session_type("p!{a().end}"), parse_session_type("q!{a().end}"))
    assert not T.session_equal(parse_session_type("p!{a().end}"), parse_session_type("p?{a().end}"))


def test_branch_order_is_irrelevant():
    assert parse_session_type("p?{b().end, a().end}") == parse_session_type("p?{a().end, b().end}")


def test_bottom_session_differs_from_end():
    assert not T.session_equal(T.BOTTOM_SESSION, T.END)
    assert not T.session_equal(T.END, T.BOTTOM_SESSION)


@pytest.mark.parametrize("t, kind", [
    (T.Rec("X", T.Var("X")), "UnguardedRecursion"),
    (T.Select("p", (T.Msg("a", T.UNIT, T.Var("Y")),)), "FreeTypeVariable"),
])
def test_ill_formed_sessions(t, kind):
    with pytest.raises(T.IllFormedType, match=kind):
        T.well_formed_session(t)


def test_duplicate_label_rejected():
    t = T.Select("p", (T.Msg("a", T.UNIT, T.END), T.Msg("a", T.INT, T.END)))
    with pytest.raises(T.IllFormedType, match="DuplicateLabel"):
        T.well_formed_session(t)


def test_protocol_roles_must_exist():
    p = T.Protocol({"A": parse_session_type("C!{a().end}"), "B": T.END})
    with pytest.raises(T.IllFormedType, match="UnknownRole"):
        T.well_formed_protocol(p)


def test_payload_parsing():
    ty = parse_payload_type("Int -> Bool @ Unit {p!{a().end} => end}")
    assert isinstance(ty, T.Fun)
    assert ty.state == T.UNIT
    assert T.payload_equal(ty, parse_payload_type("Int -> Bool @ Unit {p!{a().end} => end}"))


@given(session_types())
def test_generated_types_are_well_formed(t):
    T.well_formed_session(t)


@given(session_types())
def test_session_equal_is_reflexive_and_unfold_invariant(t):
    assert T.session_equal(t, t)
    assert T.session_equal(t, T.unfold(t))
    assert T.session_equal(T.unfold(t), t)


@given(session_types(), session_types())
def test_session_equal_is_symmetric(a, b):
    assert T.session_equal(a, b) == T.session_equal(b, a)


@given(session_types())
def test_show_parse_round_trip(t):
    assert parse_session_type(T.show_session(t)) == t


@given(session_types())
def test_subterms_are_unfolded_and_closed(t):
    for s in T.subterms(t):
        assert not isinstance(s, T.Rec)
        T.well_formed_session(s)


@given(st.sampled_from(["Unit", "Int", "Bool", "String", "Int * Bool", "(Int * Bool) * Unit", "Pid"]))
def test_payload_show_parse_round_trip(text):
    ty = parse_payload_type(text)
    assert parse_payload_type(T.show_payload(ty)) == ty
