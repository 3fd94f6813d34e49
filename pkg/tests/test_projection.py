import pytest
from hypothesis import assume, given

from maty import corpus
from maty import types as T
from maty.compliance import compliant
from maty.parser import parse_global_type, parse_protocol_file, parse_session_type
from maty.projection import ProjectionError, merge, project, project_all
from programs import GLOBAL_PROTOCOL_FILES
from strategies import dual, global_types, session_types

SERVER_TY = parse_session_type(
    "rec S. Client?{IDRequest().Client!{IDResponse(Int).S, Unavailable().S},"
    " LockRequest().Client!{Locked().Client?{Unlock().S}, Unavailable().S},"
    " Quit().end}")

PING_PONG = T.Protocol({
    "Pinger": parse_session_type("Ponger!{Ping().Ponger?{Pong().end}}"),
    "Ponger": parse_session_type("Pinger?{Ping().Pinger!{Pong().end}}"),
})


def globals_in(name):
    return {gp.name: gp for gp in parse_protocol_file(corpus.read(name), name)}


def test_idserver_projects_to_server_type():
    g = globals_in("idserver.scr")["IDServer"]
    assert T.session_equal(project(g.body, "Server"), SERVER_TY)


def test_idserver_client_type_is_dual_of_server():
    g = globals_in("idserver.scr")["IDServer"]
    assert T.session_equal(project(g.body, "Client"), dual(SERVER_TY, "Server"))


def test_pingpong_projects_to_protocol_map():
    g = globals_in("pingpong.scr")["PingPong"]
    assert T.protocol_equal(project_all(g.body, {"Pinger", "Ponger"}), PING_PONG)


def test_uninvolved_role_projects_to_end():
    g = parse_global_type("l(Int) from p to q;")
    assert project(g, "r") == T.END


def test_shop_payment_processor_projection():
    g = globals_in("shop.scr")["Shop"]
    pp = T.unfold(project(g.body, "PaymentProcessor"))
    assert isinstance(pp, T.Branch) and pp.role == "Shop"
    (buy,) = pp.branches
    assert buy.label == "buy"
    reply = T.unfold(buy.cont)
    assert isinstance(reply, T.Select) and T.labels(reply.branches) == ("ok", "paymentDeclined")
    for m in reply.branches:
        assert T.session_equal(m.cont, project(g.body, "PaymentProcessor"))


def test_robot_has_one_choice_at_d():
    g = globals_in("robot.scr")["Robot"].body
    assert isinstance(g, T.GMsg) and (g.sender, g.receiver) == ("R", "D")
    choices = []
    todo = [g]
    while todo:
        x = todo.pop()
        if isinstance(x, T.GMsg):
            if len(x.branches) > 1:
                choices.append(x.sender)
            todo.extend(m.cont for m in x.branches)
    assert choices == ["D"]


def test_chat_server_is_recursive_with_four_way_choice_at_c():
    g = globals_in("chat.scr")["ChatServer"].body
    assert isinstance(g, T.GRec)
    head = T.unfold(g)
    assert head.sender == "C" and len(head.branches) == 4


def test_empty_protocol_body_is_end():
    (gp,) = parse_protocol_file("global protocol P(role A, role B) { }")
    assert gp.body == T.GEND


@pytest.mark.parametrize("name", GLOBAL_PROTOCOL_FILES)
def test_bundled_globals_project_compliantly(name):
    for gp in parse_protocol_file(corpus.read(name), name):
        protocol = project_all(gp.body, set(gp.roles) & T.session_roles(gp.body))
        assert compliant(protocol, 4).status == "Compliant", gp.name


def test_merge_examples():
    assert merge(T.END, T.END) == T.END
    a = parse_session_type("p?{a(Int).end}")
    b = parse_session_type("p?{b(Bool).end}")
    assert T.session_equal(merge(a, b), parse_session_type("p?{a(Int).end, b(Bool).end}"))
    with pytest.raises(ProjectionError):
        merge(parse_session_type("p!{a(Int).end}"), parse_session_type("p!{b(Int).end}"))


def test_full_merge_is_used_and_compliant():
    # r learns the outcome of p's choice from q, with different labels.
    g = parse_global_type("""
        choice at p { a() from p to q; x() from q to r; } or { b() from p to q; y() from q to r; }
    """)
    assert T.session_equal(project(g, "r"), parse_session_type("q?{x().end, y().end}"))
    assert compliant(project_all(g), 4).ok


def test_output_divergence_is_not_projectable():
    g = parse_global_type("""
        choice at p { a() from p to q; x() from r to q; } or { b() from p to q; y() from r to q; }
    """)
    with pytest.raises(ProjectionError):
        project(g, "r")


def test_role_outside_requested_set_is_an_error():
    g = parse_global_type("l() from p to q;")
    with pytest.raises(ProjectionError):
        project_all(g, {"p"})


def test_recursion_not_involving_role_collapses_to_end():
    g = parse_global_type("a() from p to r; rec X { ping() from p to q; continue X; }")
    assert project(g, "r") == T.Branch("p", (T.Msg("a", T.UNIT, T.END),))


@given(session_types(depth=2))
def test_merge_idempotent(t):
    assert T.session_equal(merge(t, t), t)


@given(session_types(depth=2), session_types(depth=2))
def test_merge_commutative(a, b):
    try:
        ab = merge(a, b)
    except ProjectionError:
        with pytest.raises(ProjectionError):
            merge(b, a)
        return
    assert T.session_equal(ab, merge(b, a))


@given(global_types(roles=("p", "q")))
def test_two_role_projections_are_duals(g):
    assume(len(T.session_roles(g)) == 2)
    assert T.session_equal(project(g, "p"), dual(project(g, "q"), "q"))


@given(global_types())
def test_projected_protocols_are_compliant(g):
    roles = T.session_roles(g)
    assume(len(roles) >= 2)
    try:
        protocol = project_all(g, roles)
    except ProjectionError:
        assume(False)
    assert compliant(protocol, 4).status == "Compliant"
