"""Flow-sensitive effect typechecker.

A computation is checked in an actor whose state has type ``C`` and whose
current session type is the precondition ``S``; checking yields the result
type and the postcondition.  ``suspend``, ``raise`` and ``leave`` never
return, so they synthesise the absorbing pair ``(Bottom, BottomSession)``:
at an ``if`` it yields to the other branch, and a ``let`` whose bound
computation diverges is itself divergent.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

from . import compliance
from . import terms as M
from . import types as T

ERROR_CODES = (
    "UnboundVar", "LabelNotInSelection", "PayloadMismatch", "NotASelection", "NotABranch",
    "HandlerRoleMismatch", "StateTypeMismatch", "PrePostMismatch", "NonCompliantProtocol",
    "RegisterRoleUnknown", "BranchJoinMismatch", "ExtensionNotEnabled",
)

BOTTOM_PAIR = (T.BOTTOM, T.BOTTOM_SESSION)


class TypingError(Exception):
    def __init__(self, code: str, span, expected="", found="", message: str = ""):
        assert code in ERROR_CODES, code
        super().__init__(code)
        self.code = code
        self.span = span
        self._expected = expected
        self._found = found
        self.message = message

    # Types are rendered on demand: the configuration typer discards most errors.
    @property
    def expected(self) -> str:
        return self._expected if isinstance(self._expected, str) else show_type(self._expected)

    @property
    def found(self) -> str:
        return self._found if isinstance(self._found, str) else show_type(self._found)

    def __str__(self) -> str:
        return self.line()

    def location(self) -> str:
        if not self.span:
            return "?:?"
        return f"{self.span[0]}:{self.span[1]}"

    def line(self) -> str:
        text = f"{self.code} at {self.location()}: expected {self.expected or '-'}; found {self.found or '-'}"
        return text + (f" ({self.message})" if self.message else "")


def show_type(t) -> str:
    if t is None:
        return "-"
    if isinstance(t, (T.Base, T.Fun, T.Pair, T.AccessPoint, T.Handler, T.Pid, T.Bottom)):
        return T.show_payload(t)
    if isinstance(t, T.Protocol):
        return T.show_protocol(t, inline=True)
    if isinstance(t, compliance.Cancelled):
        return "⚡"
    return T.show_session(t)


def _is_bottom(pair) -> bool:
    return isinstance(pair[0], T.Bottom)


class TypeEnv:
    """Unrestricted variable bindings; later bindings shadow earlier ones."""

    __slots__ = ("_bindings",)

    def __init__(self, bindings: Mapping[str, T.PayloadType] | None = None):
        self._bindings = dict(bindings or {})

    def extend(self, **bindings) -> "TypeEnv":
        new = TypeEnv(self._bindings)
        new._bindings.update(bindings)
        return new

    def bind(self, name: str, ty: T.PayloadType) -> "TypeEnv":
        if name == "_":
            return self
        new = TypeEnv(self._bindings)
        new._bindings[name] = ty
        return new

    def lookup(self, name: str):
        return self._bindings.get(name)

    def __contains__(self, name: str) -> bool:
        return name in self._bindings


EMPTY_ENV = TypeEnv()


@dataclass
class Checker:
    """Typechecking context shared by every judgement of one program.

    ``globals`` types top-level definitions; ``aps`` and ``actors`` type the
    runtime names that appear inside configurations.
    """

    globals: dict = field(default_factory=dict)
    sig: T.SigEnv = field(default_factory=T.SigEnv)
    zap: bool = False
    switch: bool = False
    bound: int = compliance.DEFAULT_BOUND
    allow_unknown: bool = False
    aps: dict = field(default_factory=dict)
    actors: frozenset = frozenset()

    # -- errors ------------------------------------------------------------

    def fail(self, code, term, expected=None, found=None, message=""):
        span = getattr(term, "span", None)
        raise TypingError(code, span, expected, found, message)

    def require_mode(self, term, mode: str):
        enabled = self.zap if mode == "zap" else self.switch
        if not enabled:
            flag = "--zap" if mode == "zap" else "--switch"
            self.fail("ExtensionNotEnabled", term, f"{flag} mode", type(term).__name__,
                      f"{type(term).__name__} needs {flag}")

    def expect_payload(self, term, expected, found, code="PayloadMismatch", message=""):
        if not T.payload_equal(expected, found):
            self.fail(code, term, expected, found, message)

    # -- values ------------------------------------------------------------

    def check_value(self, env: TypeEnv, v) -> T.PayloadType:
        match v:
            case M.Var(name):
                ty = env.lookup(name)
                if ty is None:
                    self.fail("UnboundVar", v, "a bound variable", name)
                return ty
            case M.Global(name):
                if name not in self.globals:
                    self.fail("UnboundVar", v, "a definition", name)
                return self.globals[name]
            case M.Const(_, kind):
                return T.Base(kind)
            case M.Pair(left, right):
                return T.Pair(self.check_value(env, left), self.check_value(env, right))
            case M.Lam(param, body, ty):
                self.check_function(env.bind(param, ty.arg), body, ty)
                return ty
            case M.Fix(fname, param, body, ty):
                self.check_function(env.bind(fname, ty).bind(param, ty.arg), body, ty)
                return ty
            case M.Handler(_, _, _, ty):
                if ty is None:
                    self.fail("NotABranch", v, "a handler type annotation", "none",
                              "annotate the handler or pass it directly to suspend")
                self.check_handler(env, v, ty)
                return ty
            case M.APName(name):
                if name not in self.aps:
                    self.fail("UnboundVar", v, "an access point", name)
                return self.aps[name]
            case M.ActorName(name):
                if name not in self.actors:
                    self.fail("UnboundVar", v, "an actor", name)
                return T.PID
        raise TypeError(f"not a value: {v!r}")

    def check_value_against(self, env: TypeEnv, v, expected: T.PayloadType, code="PayloadMismatch"):
        """Check ``v`` against ``expected``; unannotated handlers take it as annotation."""
        if isinstance(v, M.Handler) and v.ty is None and isinstance(expected, T.Handler):
            self.check_handler(env, v, expected)
            return expected
        found = self.check_value(env, v)
        self.expect_payload(v, expected, found, code)
        return found

    def check_function(self, env: TypeEnv, body, ty: T.Fun):
        for part in (ty.arg, ty.result, ty.state):
            T.well_formed_payload(part)
        result, post = self.check_computation(env, ty.state, ty.pre, body)
        self.expect_result(body, ty.result, result, "StateTypeMismatch" if ty.result == ty.state else "PayloadMismatch")
        self.expect_post(body, ty.post, post)

    def expect_result(self, term, expected, found, code="PayloadMismatch"):
        if not isinstance(found, T.Bottom):
            self.expect_payload(term, expected, found, code)

    def expect_post(self, term, expected, found):
        if not isinstance(found, T.BottomSession) and not T.session_equal(expected, found):
            self.fail("PrePostMismatch", term, expected, found)

    def check_handler(self, env: TypeEnv, h: M.Handler, ty: T.Handler):
        session = T.unfold(ty.session)
        if not isinstance(session, T.Branch):
            self.fail("NotABranch", h, "an input session type", ty.session)
        if session.role != h.role:
            self.fail("HandlerRoleMismatch", h, session.role, h.role)
        expected = T.labels(session.branches)
        found = tuple(c.label for c in h.clauses)
        if expected != found:
            extra = [lab for lab in found if lab not in expected]
            self.fail("LabelNotInSelection", h.clause(extra[0]) if extra else h, ", ".join(expected),
                      ", ".join(found), "handler clauses must match the input labels")
        for c in h.clauses:
            m = T.lookup(session.branches, c.label)
            inner = env.bind(c.binder, m.payload).bind(h.state_var, ty.state)
            result, post = self.check_computation(inner, ty.state, m.cont, c.body)
            self.expect_result(c.body, ty.state, result, "StateTypeMismatch")
            self.expect_post(c.body, T.END, post)

    def expect_callback(self, term, v, env, state: T.PayloadType, pre: T.SessionType):
        """A callback runs on the actor's state: ``C -> C @ C {pre => end}``."""
        ty = self.check_value(env, v)
        if not isinstance(ty, T.Fun):
            self.fail("PayloadMismatch", v, "a function", ty)
        for part in (ty.arg, ty.result, ty.state):
            if not T.payload_equal(part, state):
                self.fail("StateTypeMismatch", v, T.Fun(state, state, pre, T.END, state), ty)
        if not T.session_equal(ty.pre, pre) or not T.session_equal(ty.post, T.END):
            self.fail("PrePostMismatch", v, T.Fun(state, state, pre, T.END, state), ty)

    # -- computations --------------------------------------------------------

    def check_computation(self, env: TypeEnv, state: T.PayloadType, pre: T.SessionType, m):
        """Synthesise ``(result type, postcondition)`` for ``m``."""
        match m:
            case M.Let(var, comp, body):
                first = self.check_computation(env, state, pre, comp)
                if _is_bottom(first):
                    return BOTTOM_PAIR
                return self.check_computation(env.bind(var, first[0]), state, first[1], body)
            case M.Return(v):
                return self.check_value(env, v), pre
            case M.App(fn, arg):
                ty = self.check_value(env, fn)
                if not isinstance(ty, T.Fun):
                    self.fail("PayloadMismatch", fn, "a function", ty)
                self.check_value_against(env, arg, ty.arg)
                if not T.payload_equal(ty.state, state):
                    self.fail("StateTypeMismatch", m, state, ty.state, "function runs at a different state type")
                if not T.session_equal(ty.pre, pre):
                    self.fail("PrePostMismatch", m, pre, ty.pre, "function precondition")
                return ty.result, ty.post
            case M.If(cond, then, else_):
                self.check_value_against(env, cond, T.BOOL)
                a = self.check_computation(env, state, pre, then)
                b = self.check_computation(env, state, pre, else_)
                return self.join(m, a, b)
            case M.LetPair(left, right, value, body):
                ty = self.check_value(env, value)
                if not isinstance(ty, T.Pair):
                    self.fail("PayloadMismatch", value, "a pair", ty)
                return self.check_computation(env.bind(left, ty.left).bind(right, ty.right), state, pre, body)
            case M.Prim(op, args):
                return self.check_prim(env, m, op, args), pre
            case M.Spawn(body, st):
                T.well_formed_payload(st)
                result, post = self.check_computation(env, st, T.END, body)
                self.expect_result(body, st, result, "StateTypeMismatch")
                self.expect_post(body, T.END, post)
                return (T.PID if self.zap else T.UNIT), pre
            case M.Send(role, label, v):
                s = T.unfold(pre)
                if not isinstance(s, T.Select) or s.role != role:
                    self.fail("NotASelection", m, f"{role}!{{...}}", pre)
                msg = T.lookup(s.branches, label)
                if msg is None:
                    self.fail("LabelNotInSelection", m, ", ".join(T.labels(s.branches)), label)
                self.check_value_against(env, v, msg.payload)
                return T.UNIT, msg.cont
            case M.Suspend(h, st, on_fail):
                s = T.unfold(pre)
                if not isinstance(s, T.Branch):
                    self.fail("NotABranch", m, "an input session type", pre)
                self.check_suspended_handler(env, m, h, state, pre)
                self.check_value_against(env, st, state, "StateTypeMismatch")
                if on_fail is not None:
                    self.require_mode(m, "zap")
                    self.expect_callback(m, on_fail, env, state, T.END)
                return BOTTOM_PAIR
            case M.NewAP(protocol):
                self.check_protocol(m, protocol)
                return T.AccessPoint(protocol), pre
            case M.Register(ap, role, cb):
                ty = self.check_value(env, ap)
                if not isinstance(ty, T.AccessPoint):
                    self.fail("PayloadMismatch", ap, "an access point", ty)
                if role not in ty.protocol:
                    self.fail("RegisterRoleUnknown", m, ", ".join(ty.protocol.roles), role)
                self.expect_callback(m, cb, env, state, ty.protocol[role])
                return T.UNIT, pre
            case M.Raise():
                self.require_mode(m, "zap")
                return BOTTOM_PAIR
            case M.Monitor(pid, cb):
                self.require_mode(m, "zap")
                self.check_value_against(env, pid, T.PID)
                self.expect_callback(m, cb, env, state, T.END)
                return T.UNIT, pre
            case M.Leave(v):
                self.require_mode(m, "zap")
                self.check_value_against(env, v, state, "StateTypeMismatch")
                return BOTTOM_PAIR
            case M.SuspendSend(name, fn, st):
                self.require_mode(m, "switch")
                session, payload = self.sig_entry(m, name)
                if not T.session_equal(pre, session):
                    self.fail("PrePostMismatch", m, session, pre, f"session {name}")
                expected = T.Fun(T.Pair(payload, state), state, session, T.END, state)
                self.check_value_against(env, fn, expected)
                self.check_value_against(env, st, state, "StateTypeMismatch")
                return BOTTOM_PAIR
            case M.Become(name, v):
                self.require_mode(m, "switch")
                _, payload = self.sig_entry(m, name)
                self.check_value_against(env, v, payload)
                return T.UNIT, pre
        raise TypeError(f"not a computation: {m!r}")

    def check_suspended_handler(self, env, m, h, state, pre):
        if isinstance(h, M.Handler) and h.ty is None:
            self.check_handler(env, h, T.Handler(pre, state))
            return
        ty = self.check_value(env, h)
        if not isinstance(ty, T.Handler):
            self.fail("PayloadMismatch", h, T.Handler(pre, state), ty)
        if not T.session_equal(ty.session, pre):
            self.fail("PrePostMismatch", m, pre, ty.session, "handler session type")
        if not T.payload_equal(ty.state, state):
            self.fail("StateTypeMismatch", m, state, ty.state, "handler state type")

    def sig_entry(self, m, name):
        if name not in self.sig:
            self.fail("UnboundVar", m, "a declared session name", name)
        return self.sig[name]

    def check_protocol(self, m, protocol: T.Protocol):
        try:
            T.well_formed_protocol(protocol)
        except T.IllFormedType as err:
            self.fail("NonCompliantProtocol", m, "a well-formed protocol", str(err))
        check = compliance.compliant_zap if self.zap else compliance.compliant
        verdict = check(protocol, self.bound)
        if verdict.status == "Violation" or (verdict.status == "Unknown" and not self.allow_unknown):
            witness = compliance.format_witness(verdict).replace("\n", " | ")
            self.fail("NonCompliantProtocol", m, "Compliant", str(verdict),
                      f"witness: {witness}" if witness else verdict.detail)

    def check_prim(self, env, m, op, args) -> T.PayloadType:
        types = [self.check_value(env, a) for a in args]
        if op in M.EQUALITY_OPS:
            a, b = types
            if not isinstance(a, T.Base):
                self.fail("PayloadMismatch", args[0], "a base type", a)
            self.expect_payload(args[1], a, b)
            return T.BOOL
        if op not in M.PRIM_OPS:
            self.fail("UnboundVar", m, "a primitive operation", op)
        kinds, result = M.PRIM_OPS[op]
        if len(kinds) != len(args):
            self.fail("PayloadMismatch", m, f"{len(kinds)} arguments", f"{len(args)}")
        for arg, kind, ty in zip(args, kinds, types):
            self.expect_payload(arg, T.Base(kind), ty)
        return T.Base(result)

    def join(self, m, a, b):
        if _is_bottom(a):
            return b
        if _is_bottom(b):
            return a
        if not T.payload_equal(a[0], b[0]):
            self.fail("BranchJoinMismatch", m, a[0], b[0], "branch result types differ")
        if not T.session_equal(a[1], b[1]):
            self.fail("BranchJoinMismatch", m, a[1], b[1], "branch postconditions differ")
        return a


# ---------------------------------------------------------------------------
# Public entry points


def check_value(env: TypeEnv, v, checker: Checker | None = None) -> T.PayloadType:
    return (checker or Checker()).check_value(env, v)


def check_computation(env: TypeEnv, state: T.PayloadType, pre: T.SessionType, m,
                      checker: Checker | None = None) -> tuple:
    return (checker or Checker()).check_computation(env, state, pre, m)


@dataclass
class ProgramVerdict:
    errors: list
    checker: Checker

    @property
    def ok(self) -> bool:
        return not self.errors


def program_checker(prog: M.Program, *, zap=False, switch=False, bound=compliance.DEFAULT_BOUND,
                    allow_unknown=False) -> Checker:
    return Checker(globals={name: d.ty for name, d in prog.defs.items()}, sig=prog.sig, zap=zap,
                   switch=switch, bound=bound, allow_unknown=allow_unknown)


def check_program(prog: M.Program, *, zap=False, switch=False, bound=compliance.DEFAULT_BOUND,
                  allow_unknown=False) -> ProgramVerdict:
    """Check every definition against its declared type and ``main`` at state
    ``Unit`` with pre- and postcondition ``end``; one error per failing item."""
    checker = program_checker(prog, zap=zap, switch=switch, bound=bound, allow_unknown=allow_unknown)
    errors = []
    for d in prog.defs.values():
        try:
            T.well_formed_payload(d.ty)
            checker.check_value_against(EMPTY_ENV, d.value, d.ty)
        except TypingError as err:
            errors.append(err)
    if prog.main is not None:
        try:
            result, post = checker.check_computation(EMPTY_ENV, T.UNIT, T.END, prog.main)
            if not T.payload_equal(result, T.UNIT):
                checker.fail("StateTypeMismatch", prog.main, T.UNIT, result, "main must return unit")
            checker.expect_post(prog.main, T.END, post)
        except TypingError as err:
            errors.append(err)
    return ProgramVerdict(errors, checker)
