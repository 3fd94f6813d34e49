"""Hand-written lexer and recursive-descent parsers.

Three file formats share one lexer:

* ``.scr`` files hold Scribble-style global protocols;
* ``.mpst`` files hold declarations only (type aliases and protocol maps);
* ``.maty`` files hold declarations, top-level definitions and ``main``.

Program text may nest computations where values are expected, for example
``f (g x)`` or ``n + 1`` as an argument; such sub-computations are bound to
fresh variables with ``let`` so the resulting terms stay in fine-grain form.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from . import terms as M
from . import types as T
from .projection import ProjectionError, project_all
from .types import node


class ParseError(Exception):
    def __init__(self, message: str, line: int = 0, col: int = 0, filename: str = ""):
        self.message = message
        self.line = line
        self.col = col
        self.filename = filename
        prefix = f"{filename}:" if filename else ""
        super().__init__(f"{prefix}{line}:{col}: {message}")


# ---------------------------------------------------------------------------
# Lexer


@dataclass(frozen=True)
class Token:
    kind: str  # ident, int, string, sym, eof
    value: str
    line: int
    col: int


_SYMBOLS = sorted("""-> => == != <= >= && || ++ ! ? { } ( ) [ ] , ; : . * + - / % < > = @ |""".split(),
                  key=len, reverse=True)
_TOKEN_RE = re.compile(
    r"(?P<ws>[ \t\r]+)|(?P<nl>\n)|(?P<line>//[^\n]*)|(?P<block>/\*.*?\*/)"
    r"|(?P<ident>[A-Za-z_][A-Za-z0-9_']*)|(?P<int>[0-9]+)|(?P<string>\"(?:[^\"\\\n]|\\.)*\")"
    r"|(?P<sym>" + "|".join(re.escape(s) for s in _SYMBOLS) + ")",
    re.S,
)


def tokenize(text: str, filename: str = "") -> list[Token]:
    tokens = []
    pos, line, line_start = 0, 1, 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m:
            raise ParseError(f"unexpected character {text[pos]!r}", line, pos - line_start + 1, filename)
        kind = m.lastgroup
        value = m.group()
        col = pos - line_start + 1
        if kind == "nl":
            line += 1
            line_start = m.end()
        elif kind == "block":
            newlines = value.count("\n")
            if newlines:
                line += newlines
                line_start = pos + value.rfind("\n") + 1
        elif kind == "string":
            tokens.append(Token("string", _unescape(value[1:-1]), line, col))
        elif kind in ("ident", "int", "sym"):
            tokens.append(Token(kind, value, line, col))
        pos = m.end()
    tokens.append(Token("eof", "", line, pos - line_start + 1))
    return tokens


def _unescape(s: str) -> str:
    return re.sub(r"\\(.)", lambda m: {"n": "\n", "t": "\t"}.get(m.group(1), m.group(1)), s)


def quote(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n").replace("\t", "\\t") + '"'


KEYWORDS = {
    "let", "in", "if", "then", "else", "fun", "rec", "return", "spawn", "suspend", "suspendSend",
    "become", "newAP", "register", "raise", "monitor", "leave", "handler", "true", "false", "not", "show",
    "def", "main", "type", "protocol", "session", "import", "carrying", "end",
}


class _Stream:
    def __init__(self, tokens: list[Token], filename: str = ""):
        self.tokens = tokens
        self.pos = 0
        self.filename = filename

    def peek(self, k: int = 0) -> Token:
        return self.tokens[min(self.pos + k, len(self.tokens) - 1)]

    def next(self) -> Token:
        tok = self.peek()
        self.pos += 1
        return tok

    def at(self, value: str, k: int = 0) -> bool:
        tok = self.peek(k)
        return tok.kind in ("sym", "ident") and tok.value == value

    def accept(self, value: str) -> bool:
        if self.at(value):
            self.pos += 1
            return True
        return False

    def expect(self, value: str) -> Token:
        if not self.at(value):
            self.fail(f"expected {value!r}")
        return self.next()

    def ident(self, what: str = "identifier") -> str:
        tok = self.peek()
        if tok.kind != "ident" or tok.value in KEYWORDS:
            self.fail(f"expected {what}")
        self.pos += 1
        return tok.value

    def fail(self, message: str):
        tok = self.peek()
        found = tok.value if tok.kind != "eof" else "end of input"
        raise ParseError(f"{message}, found {found!r}", tok.line, tok.col, self.filename)


# ---------------------------------------------------------------------------
# Global protocols (.scr)


@dataclass
class _ScrMessage:
    label: str
    payloads: list
    sender: str
    receivers: list
    pos: tuple


@dataclass
class _ScrChoice:
    at: str
    blocks: list
    pos: tuple


@dataclass
class _ScrDo:
    name: str
    roles: list
    pos: tuple


@dataclass
class _ScrRec:
    var: str
    body: list
    pos: tuple


@dataclass
class _ScrContinue:
    var: str
    pos: tuple


@dataclass(frozen=True)
class GlobalProtocol:
    name: str
    roles: tuple
    body: T.GlobalType


_SCR_KEYWORDS = {"from", "to", "choice", "at", "or", "do", "rec", "continue", "global", "protocol", "role"}


def parse_protocol_file(text: str, filename: str = "") -> list[GlobalProtocol]:
    """Parse Scribble-style global protocols into global types."""
    s = _Stream(tokenize(text, filename), filename)
    raw: dict[str, tuple] = {}
    order = []
    while s.peek().kind != "eof":
        if s.at("module") or s.at("import") or s.at("type") or s.at("sig"):
            while not s.accept(";"):
                if s.peek().kind == "eof":
                    s.fail("expected ';'")
                s.next()
            continue
        s.accept("explicit")
        s.expect("global")
        s.expect("protocol")
        tok = s.peek()
        name = s.ident("protocol name")
        if name in raw:
            raise ParseError(f"duplicate protocol {name}", tok.line, tok.col, filename)
        s.expect("(")
        roles = []
        while True:
            s.expect("role")
            roles.append(s.ident("role"))
            if not s.accept(","):
                break
        s.expect(")")
        body = _scr_block(s)
        raw[name] = (roles, body, (tok.line, tok.col))
        order.append(name)
    return [GlobalProtocol(n, tuple(raw[n][0]), _scr_build_protocol(n, raw, filename)) for n in order]


def _scr_block(s: _Stream) -> list:
    s.expect("{")
    stmts = []
    while not s.accept("}"):
        stmts.append(_scr_stmt(s))
    return stmts


def _scr_payload_type(s: _Stream) -> T.PayloadType:
    name = s.ident("payload type")
    if s.accept(":"):  # named payload field ``x: T``
        name = s.ident("payload type")
    if s.accept("<"):
        args = [_scr_payload_type(s)]
        while s.accept(","):
            args.append(_scr_payload_type(s))
        s.expect(">")
        name = f"{name}<{','.join(str(a) for a in args)}>"
    return T.Base(name)


def _scr_stmt(s: _Stream):
    tok = s.peek()
    pos = (tok.line, tok.col)
    if s.accept("choice"):
        s.expect("at")
        at = s.ident("role")
        blocks = [_scr_block(s)]
        while s.accept("or"):
            blocks.append(_scr_block(s))
        return _ScrChoice(at, blocks, pos)
    if s.accept("do"):
        name = s.ident("protocol name")
        s.expect("(")
        roles = []
        if not s.at(")"):
            roles.append(s.ident("role"))
            while s.accept(","):
                roles.append(s.ident("role"))
        s.expect(")")
        s.expect(";")
        return _ScrDo(name, roles, pos)
    if s.accept("rec"):
        var = s.ident("recursion label")
        return _ScrRec(var, _scr_block(s), pos)
    if s.accept("continue"):
        var = s.ident("recursion label")
        s.expect(";")
        return _ScrContinue(var, pos)
    label = s.ident("message label")
    s.expect("(")
    payloads = []
    if not s.at(")"):
        payloads.append(_scr_payload_type(s))
        while s.accept(","):
            payloads.append(_scr_payload_type(s))
    s.expect(")")
    s.expect("from")
    sender = s.ident("role")
    s.expect("to")
    receivers = [s.ident("role")]
    while s.accept(","):
        receivers.append(s.ident("role"))
    s.expect(";")
    return _ScrMessage(label, payloads, sender, receivers, pos)


def _payload_of(payloads: list) -> T.PayloadType:
    if not payloads:
        return T.UNIT
    out = payloads[0]
    for p in payloads[1:]:
        out = T.Pair(out, p)
    return out


def _rename_global(g: T.GlobalType, mapping: dict) -> T.GlobalType:
    match g:
        case T.GMsg(sender, receiver, branches):
            return T.GMsg(mapping.get(sender, sender), mapping.get(receiver, receiver),
                          tuple(T.Msg(m.label, m.payload, _rename_global(m.cont, mapping)) for m in branches))
        case T.GRec(var, body):
            return T.GRec(var, _rename_global(body, mapping))
    return g


def _free_gvars(g) -> set:
    match g:
        case T.GVar(name):
            return {name}
        case T.GRec(var, body):
            return _free_gvars(body) - {var}
        case T.GMsg(_, _, branches):
            out = set()
            for m in branches:
                out |= _free_gvars(m.cont)
            return out
    return set()


def _scr_build_protocol(name: str, raw: dict, filename: str) -> T.GlobalType:
    def err(message, pos):
        raise ParseError(message, pos[0], pos[1], filename)

    def build_protocol(pname, stack, pos):
        if pname not in raw:
            err(f"unknown protocol {pname}", pos)
        roles, stmts, _ = raw[pname]
        body = build(stmts, T.GEND, stack + (pname,), set())
        return T.GRec(pname, body) if pname in _free_gvars(body) else body

    def build(stmts, k, stack, rec_vars):
        if not stmts:
            return k
        head, rest = stmts[0], stmts[1:]
        match head:
            case _ScrMessage(label, payloads, sender, receivers, pos):
                cont = build(rest, k, stack, rec_vars)
                for receiver in reversed(receivers[1:]):
                    cont = T.GMsg(sender, receiver, (T.Msg(label, _payload_of(payloads), cont),))
                if sender == receivers[0]:
                    err(f"role {sender} sends to itself", pos)
                return T.GMsg(sender, receivers[0], (T.Msg(label, _payload_of(payloads), cont),))
            case _ScrChoice(at, blocks, pos):
                cont = build(rest, k, stack, rec_vars)
                msgs, receiver = [], None
                for block in blocks:
                    g = build(block, cont, stack, rec_vars)
                    if not isinstance(g, T.GMsg) or g.sender != at:
                        err(f"every branch of a choice at {at} must start with a message from {at}", pos)
                    if receiver is not None and g.receiver != receiver:
                        err(f"branches of a choice at {at} address different roles ({receiver}, {g.receiver})", pos)
                    receiver = g.receiver
                    msgs.extend(g.branches)
                labels = [m.label for m in msgs]
                if len(set(labels)) != len(labels):
                    err(f"choice at {at} repeats a label", pos)
                return T.GMsg(at, receiver, tuple(msgs))
            case _ScrDo(callee, roles, pos):
                if callee in stack:
                    formal = raw[callee][0]
                    if list(roles) != list(formal):
                        err(f"recursive do {callee} must pass its roles unchanged", pos)
                    if rest:
                        err(f"statements after a recursive do {callee} are unreachable", pos)
                    return T.GVar(callee)
                if callee not in raw:
                    err(f"unknown protocol {callee}", pos)
                formal = raw[callee][0]
                if len(formal) != len(roles):
                    err(f"do {callee} expects {len(formal)} roles", pos)
                inner = build_protocol(callee, stack, pos)
                inner = _rename_global(inner, dict(zip(formal, roles)))
                if rest:
                    err(f"statements after do {callee} are not supported", pos)
                return inner
            case _ScrRec(var, body, pos):
                g = build(body, build(rest, k, stack, rec_vars), stack, rec_vars | {var})
                return T.GRec(var, g) if var in _free_gvars(g) else g
            case _ScrContinue(var, pos):
                if var not in rec_vars:
                    err(f"continue {var} outside rec {var}", pos)
                return T.GVar(var)
        raise AssertionError(head)

    return build_protocol(name, (), raw[name][2])


def _scr_payloads(a: T.PayloadType) -> list:
    if a == T.UNIT:
        return []
    if isinstance(a, T.Pair):
        return _scr_payloads(a.left) + [a.right] if a.left != T.UNIT else [a.left, a.right]
    return [a]


def show_scribble(gp: GlobalProtocol) -> str:
    """Render a global protocol in the ``.scr`` syntax."""

    def stmts(g, indent: str) -> list[str]:
        match g:
            case T.GEnd():
                return []
            case T.GVar(name):
                return [f"{indent}continue {name};"]
            case T.GRec(var, body):
                return [f"{indent}rec {var} {{", *stmts(body, indent + "  "), f"{indent}}}"]
            case T.GMsg(sender, receiver, branches):
                def message(m, ind):
                    args = ", ".join(T.show_payload(p) for p in _scr_payloads(m.payload))
                    return [f"{ind}{m.label}({args}) from {sender} to {receiver};", *stmts(m.cont, ind)]

                if len(branches) == 1:
                    return message(branches[0], indent)
                out = [f"{indent}choice at {sender} {{"]
                for i, m in enumerate(branches):
                    if i:
                        out.append(f"{indent}}} or {{")
                    out.extend(message(m, indent + "  "))
                out.append(f"{indent}}}")
                return out
        raise TypeError(f"not a global type: {g!r}")

    roles = ", ".join(f"role {r}" for r in gp.roles)
    return "\n".join([f"global protocol {gp.name}({roles}) {{", *stmts(gp.body, "  "), "}"]) + "\n"


# ---------------------------------------------------------------------------
# Local types and declarations


@node
class _AliasRef:
    """A capitalised name in payload position awaiting alias resolution."""

    name: str


@node
class _ProtoRef:
    name: str


@node
class _LocalRef:
    protocol: str
    role: str


_BASE = {"Unit": T.UNIT, "Bool": T.BOOL, "Int": T.INT, "String": T.STRING}


class _TypeParser:
    """Parses type syntax into raw types with unresolved alias references."""

    def __init__(self, s: _Stream):
        self.s = s

    def session(self):
        s = self.s
        if s.accept("rec"):
            var = s.ident("type variable")
            s.expect(".")
            return T.Rec(var, self.session())
        if s.accept("end"):
            return T.END
        if s.accept("("):
            t = self.session()
            s.expect(")")
            return t
        name = s.ident("session type")
        if s.accept("!"):
            return T.Select(name, self.msgs())
        if s.accept("?"):
            return T.Branch(name, self.msgs())
        if s.accept("@"):
            return _LocalRef(name, s.ident("role"))
        return T.Var(name)

    def msgs(self):
        s = self.s
        s.expect("{")
        out = []
        while True:
            label = s.ident("label")
            payload = T.UNIT
            if s.accept("("):
                if not s.at(")"):
                    payload = self.payload()
                s.expect(")")
            s.expect(".")
            out.append(T.Msg(label, payload, self.session()))
            if not s.accept(","):
                break
        s.expect("}")
        return tuple(out)

    def payload(self):
        left = self.pay_pair()
        if self.s.accept("->"):
            result = self.pay_pair()
            self.s.expect("@")
            state = self.pay_atom()
            pre = post = T.END
            if self.s.at("{") and not self._clause_block_ahead():
                pre, post = self.effect()
            return T.Fun(left, result, pre, post, state)
        return left

    def _clause_block_ahead(self) -> bool:
        # ``{ label (x)? ->`` starts a handler body rather than an effect.
        s = self.s
        return s.peek(1).kind == "ident" and (s.at("->", 2) or s.at("(", 2) and s.at("->", 5) or s.at("|", 2))

    def effect(self):
        self.s.expect("{")
        pre = self.session()
        self.s.expect("=>")
        post = self.session()
        self.s.expect("}")
        return pre, post

    def pay_pair(self):
        out = self.pay_atom()
        while self.s.accept("*"):
            out = T.Pair(out, self.pay_atom())
        return out

    def pay_atom(self):
        s = self.s
        if s.accept("("):
            t = self.payload()
            s.expect(")")
            return t
        name = s.ident("payload type")
        if name in _BASE:
            return _BASE[name]
        if name == "Pid":
            return T.PID
        if name == "AP":
            s.expect("(")
            if s.at("{"):
                ref = self.protocol_map()
            else:
                ref = _ProtoRef(s.ident("protocol name"))
            s.expect(")")
            return T.AccessPoint(ref)
        if name == "Handler":
            s.expect("(")
            session = self.session()
            s.expect(",")
            state = self.payload()
            s.expect(")")
            return T.Handler(session, state)
        return _AliasRef(name)

    def protocol_map(self):
        s = self.s
        s.expect("{")
        entries = []
        while True:
            role = s.ident("role")
            s.expect(":")
            entries.append((role, self.session()))
            if not s.accept(","):
                break
        s.expect("}")
        return T.Protocol(entries)


def _starts_session(s: _Stream) -> bool:
    if s.at("rec") or s.at("end"):
        return True
    return s.peek().kind == "ident" and (s.at("!", 1) or s.at("?", 1) or s.at("@", 1))


class _Resolver:
    """Expands aliases, protocol names and ``Proto@Role`` references."""

    def __init__(self, filename: str = ""):
        self.session_aliases: dict = {}
        self.payload_aliases: dict = {}
        self.name_aliases: dict = {}
        self.raw_protocols: dict = {}
        self.protocols: dict = {}
        self.globals: dict = {}
        self.filename = filename
        self._payload_cache: dict = {}

    def fail(self, message, pos=(0, 0)):
        raise ParseError(message, pos[0], pos[1], self.filename)

    def is_session_alias(self, name, seen=()):
        if name in self.session_aliases:
            return True
        if name in self.name_aliases and name not in seen:
            return self.is_session_alias(self.name_aliases[name][0], seen + (name,))
        return False

    def session(self, t, bound=frozenset(), stack=(), pos=(0, 0)):
        match t:
            case T.Var(name):
                if name in bound or name in stack:
                    return t
                return self.expand_session_alias(name, stack, pos)
            case T.Rec(var, body):
                return T.Rec(var, self.session(body, bound | {var}, stack, pos))
            case T.Select(role, msgs) | T.Branch(role, msgs):
                new = tuple(T.Msg(m.label, self.payload(m.payload, pos), self.session(m.cont, bound, stack, pos))
                            for m in msgs)
                return type(t)(role, new)
            case _LocalRef(proto, role):
                p = self.protocol(proto, pos)
                if role not in p:
                    self.fail(f"protocol {proto} has no role {role}", pos)
                return p[role]
        return t

    def expand_session_alias(self, name, stack, pos):
        if name in self.name_aliases and name not in self.session_aliases:
            target, tpos = self.name_aliases[name]
            if not self.is_session_alias(name):
                self.fail(f"{name} does not name a session type", pos)
            body = self.session(T.Var(target), frozenset(), stack + (name,), tpos)
        elif name in self.session_aliases:
            raw, tpos = self.session_aliases[name]
            body = self.session(raw, frozenset(), stack + (name,), tpos)
        else:
            self.fail(f"unknown session type {name}", pos)
        return T.Rec(name, body) if name in _free_tvars(body) else body

    def payload(self, a, pos=(0, 0), seen=()):
        match a:
            case _AliasRef(name):
                if name in seen:
                    self.fail(f"payload alias {name} is recursive", pos)
                if name in self.payload_aliases:
                    raw, tpos = self.payload_aliases[name]
                    return self.payload(raw, tpos, seen + (name,))
                if name in self.name_aliases and not self.is_session_alias(name):
                    target, tpos = self.name_aliases[name]
                    return self.payload(_AliasRef(target), tpos, seen + (name,))
                self.fail(f"unknown type {name}", pos)
            case T.Fun(arg, result, pre, post, state):
                return T.Fun(self.payload(arg, pos, seen), self.payload(result, pos, seen), self.closed(pre, pos),
                             self.closed(post, pos), self.payload(state, pos, seen))
            case T.Pair(left, right):
                return T.Pair(self.payload(left, pos, seen), self.payload(right, pos, seen))
            case T.Handler(session, state):
                return T.Handler(self.closed(session, pos), self.payload(state, pos, seen))
            case T.AccessPoint(_ProtoRef(name)):
                return T.AccessPoint(self.protocol(name, pos))
            case T.AccessPoint(p):
                return T.AccessPoint(self.protocol_value(p, pos))
        return a

    def closed(self, t, pos=(0, 0)):
        t = self.session(t, pos=pos)
        try:
            T.well_formed_session(t)
        except T.IllFormedType as err:
            self.fail(str(err), pos)
        return t

    def protocol_value(self, p: T.Protocol, pos=(0, 0)) -> T.Protocol:
        out = T.Protocol({r: self.closed(s, pos) for r, s in p.entries})
        try:
            T.well_formed_protocol(out)
        except T.IllFormedType as err:
            self.fail(str(err), pos)
        return out

    def protocol(self, name, pos=(0, 0)) -> T.Protocol:
        if name in self.protocols:
            return self.protocols[name]
        if name in self.raw_protocols:
            raw, ppos = self.raw_protocols.pop(name)
            self.protocols[name] = self.protocol_value(raw, ppos)
            return self.protocols[name]
        self.fail(f"unknown protocol {name}", pos)


def _free_tvars(t) -> set:
    match t:
        case T.Var(name):
            return {name}
        case T.Rec(var, body):
            return _free_tvars(body) - {var}
        case T.Select(_, msgs) | T.Branch(_, msgs):
            out = set()
            for m in msgs:
                out |= _free_tvars(m.cont)
            return out
    return set()


# ---------------------------------------------------------------------------
# Programs


_TOP_LEVEL = {"import", "type", "protocol", "session", "def", "main"}


def _default_loader(path: Path) -> str:
    return path.read_text(encoding="utf-8")


def parse_program(text: str, filename: str = "", search: tuple = (), loader: Callable = _default_loader) -> M.Program:
    """Parse a ``.maty`` or ``.mpst`` source into a ``Program``."""
    return _ProgramParser(text, filename, search, loader).parse()


def parse_local_protocols(text: str, filename: str = "") -> dict[str, T.Protocol]:
    """Parse a ``.mpst`` file; returns its protocol declarations."""
    return parse_program(text, filename).protocols


def parse_session_type(text: str, aliases: dict | None = None) -> T.SessionType:
    """Parse a single closed local type such as ``p!{l(Int).end}``."""
    s = _Stream(tokenize(text))
    raw = _TypeParser(s).session()
    if s.peek().kind != "eof":
        s.fail("unexpected trailing input")
    r = _Resolver()
    for name, t in (aliases or {}).items():
        r.session_aliases[name] = (t, (0, 0))
    return r.closed(raw)


def parse_payload_type(text: str) -> T.PayloadType:
    s = _Stream(tokenize(text))
    raw = _TypeParser(s).payload()
    if s.peek().kind != "eof":
        s.fail("unexpected trailing input")
    return _Resolver().payload(raw)


def parse_global_type(text: str) -> T.GlobalType:
    """Parse a single protocol body given as Scribble statements."""
    protocols = parse_protocol_file(f"global protocol Main(role _) {{ {text} }}".replace("(role _)", "(role A)"))
    return protocols[0].body


class _ProgramParser:
    def __init__(self, text, filename, search, loader):
        self.filename = filename
        self.s = _Stream(tokenize(text, filename), filename)
        self.types = _TypeParser(self.s)
        self.res = _Resolver(filename)
        self.search = tuple(Path(p) for p in search)
        self.loader = loader
        self.def_names: set[str] = set()
        self.scope: list[str] = []
        self.taken = {t.value for t in self.s.tokens if t.kind == "ident"}
        self.counter = 0
        self.sig_raw: list = []

    # -- helpers -----------------------------------------------------------

    def pos(self):
        tok = self.s.peek()
        return (tok.line, tok.col)

    def fail_at(self, message, pos):
        raise ParseError(message, pos[0], pos[1], self.filename)

    def fresh(self) -> str:
        while True:
            self.counter += 1
            name = f"_t{self.counter}"
            if name not in self.taken:
                self.taken.add(name)
                return name

    def value(self, t, binds: list):
        if M.is_value(t):
            return t
        if isinstance(t, M.Return):
            return t.value
        name = self.fresh()
        binds.append((name, t))
        return M.Var(name, t.span)

    @staticmethod
    def comp(t):
        return t if not M.is_value(t) else M.Return(t, t.span)

    @staticmethod
    def wrap(binds: list, comp):
        for name, c in reversed(binds):
            comp = M.Let(name, c, comp, c.span)
        return comp

    def session_type(self):
        pos = self.pos()
        return self.res.closed(self.types.session(), pos)

    def payload_type(self):
        pos = self.pos()
        return self.res.payload(self.types.payload(), pos)

    # -- declarations ------------------------------------------------------

    def parse(self) -> M.Program:
        s = self.s
        body_starts = []
        while s.peek().kind != "eof":
            pos = self.pos()
            if s.accept("import"):
                tok = s.next()
                if tok.kind != "string":
                    self.fail_at("expected a quoted file name after import", pos)
                self.do_import(tok.value, pos)
            elif s.accept("type"):
                name = s.ident("type name")
                if not s.accept("="):  # ``type Name`` declares an opaque base type
                    self.res.payload_aliases[name] = (T.Base(name), pos)
                    continue
                if s.peek().kind == "ident" and s.peek().value not in KEYWORDS and not _starts_session(s) \
                        and not s.at("*", 1) and not s.at("->", 1) and s.peek().value not in _BASE \
                        and s.peek().value not in ("AP", "Handler", "Pid"):
                    self.res.name_aliases[name] = (s.ident(), pos)
                elif _starts_session(s) or s.at("("):
                    save = s.pos
                    try:
                        raw = self.types.session()
                        self.res.session_aliases[name] = (raw, pos)
                    except ParseError:
                        s.pos = save
                        self.res.payload_aliases[name] = (self.types.payload(), pos)
                else:
                    self.res.payload_aliases[name] = (self.types.payload(), pos)
            elif s.accept("protocol"):
                name = s.ident("protocol name")
                s.expect("=")
                self.res.raw_protocols[name] = (self.types.protocol_map(), pos)
            elif s.accept("session"):
                name = s.ident("session name")
                s.expect(":")
                st = self.types.session()
                s.expect("carrying")
                self.sig_raw.append((name, st, self.types.payload(), pos))
            elif s.at("def") or s.at("main"):
                body_starts.append(s.pos)
                if s.accept("def"):
                    name = s.ident("definition name")
                    if name in self.def_names:
                        self.fail_at(f"duplicate definition {name}", pos)
                    self.def_names.add(name)
                else:
                    s.next()
                self.skip_body()
            else:
                s.fail("expected a declaration")

        for name in list(self.res.raw_protocols):
            self.res.protocol(name)
        sig = []
        for name, st, payload, pos in self.sig_raw:
            session = self.res.closed(st, pos)
            if not isinstance(T.unfold(session), T.Select):
                self.fail_at(f"session {name} must have an output type", pos)
            sig.append((name, session, self.res.payload(payload, pos)))

        prog = M.Program(sig=T.SigEnv(sig), protocols=dict(self.res.protocols), globals=dict(self.res.globals))
        for start in body_starts:
            s.pos = start
            pos = self.pos()
            if s.accept("main"):
                if prog.main is not None:
                    self.fail_at("duplicate main", pos)
                s.expect("=")
                prog.main = self.comp(self.expr())
            else:
                s.expect("def")
                name = s.ident()
                s.expect(":")
                ty = self.payload_type()
                s.expect("=")
                value = self.expr(expected=ty)
                if not M.is_value(value):
                    self.fail_at(f"definition {name} must be a value", pos)
                prog.defs[name] = M.Definition(name, ty, value, pos)
            if s.peek().kind != "eof" and s.peek().value not in _TOP_LEVEL:
                s.fail("expected a declaration")
        prog.aliases = {n: self.res.session(T.Var(n)) for n in self.res.session_aliases}
        return prog

    def skip_body(self):
        s = self.s
        depth = 0
        while s.peek().kind != "eof":
            tok = s.peek()
            if depth == 0 and tok.kind == "ident" and tok.value in _TOP_LEVEL:
                return
            if tok.value in ("(", "{", "[") and tok.kind == "sym":
                depth += 1
            elif tok.value in (")", "}", "]") and tok.kind == "sym":
                depth -= 1
            s.next()

    def do_import(self, name: str, pos):
        candidates = []
        if self.filename:
            candidates.append(Path(self.filename).parent / name)
        candidates += [d / name for d in self.search]
        from . import corpus

        candidates.append(corpus.CORPUS_DIR / name)
        for path in candidates:
            if path.is_file():
                text = self.loader(path)
                break
        else:
            self.fail_at(f"cannot find imported file {name}", pos)
        if name.endswith(".scr"):
            for gp in parse_protocol_file(text, str(path)):
                try:
                    T.well_formed_global(gp.body)
                    protocol = project_all(gp.body, set(gp.roles) & T.session_roles(gp.body) or None)
                except (ProjectionError, T.IllFormedType) as err:
                    self.fail_at(f"protocol {gp.name}: {err}", pos)
                self.res.globals[gp.name] = gp
                self.res.protocols[gp.name] = protocol
        else:
            sub = parse_program(text, str(path), self.search, self.loader)
            self.res.protocols.update(sub.protocols)
            self.res.globals.update(sub.globals)
            for alias, t in sub.aliases.items():
                self.res.session_aliases.setdefault(alias, (t, pos))

    # -- expressions ---------------------------------------------------------

    def bind(self, *names):
        self.scope.extend(names)

    def unbind(self, *names):
        for _ in names:
            self.scope.pop()

    def expr(self, expected=None):
        s = self.s
        pos = self.pos()
        if s.accept("let"):
            if s.accept("("):
                left = s.ident("variable")
                s.expect(",")
                right = s.ident("variable")
                s.expect(")")
                s.expect("=")
                binds = []
                v = self.value(self.expr(), binds)
                s.expect("in")
                self.bind(left, right)
                body = self.comp(self.expr())
                self.unbind(left, right)
                return self.wrap(binds, M.LetPair(left, right, v, body, pos))
            name = s.ident("variable")
            s.expect("=")
            rhs = self.comp(self.expr())
            s.expect("in")
            self.bind(name)
            body = self.comp(self.expr())
            self.unbind(name)
            return M.Let(name, rhs, body, pos)
        if s.accept("if"):
            binds = []
            cond = self.value(self.expr(), binds)
            s.expect("then")
            then = self.comp(self.expr())
            s.expect("else")
            else_ = self.comp(self.expr())
            return self.wrap(binds, M.If(cond, then, else_, pos))
        if s.at("fun") or s.at("rec"):
            return self.function(expected)
        if s.at("handler"):
            first = self.handler(expected)
        else:
            first = self.opexpr()
        if s.accept(";"):
            rest = self.comp(self.expr())
            return M.Let("_", self.comp(first), rest, pos)
        return first

    def function(self, expected):
        s = self.s
        pos = self.pos()
        recursive = s.accept("rec")
        if not recursive:
            s.expect("fun")
        fname = s.ident("function name") if recursive else None
        if s.accept("("):
            param = s.ident("parameter")
            s.expect(":")
            arg = self.payload_type()
            s.expect(")")
            s.expect(":")
            rpos = self.pos()
            result = self.res.payload(self.types.pay_pair(), rpos)
            s.expect("@")
            state = self.res.payload(self.types.pay_atom(), rpos)
            pre = post = T.END
            if s.at("{"):
                raw_pre, raw_post = self.types.effect()
                pre, post = self.res.closed(raw_pre, rpos), self.res.closed(raw_post, rpos)
            ty = T.Fun(arg, result, pre, post, state)
        else:
            param = s.ident("parameter")
            if not isinstance(expected, T.Fun):
                self.fail_at("a function needs a type ascription: fun (x : A) : B @ C {S => T} -> M", pos)
            ty = expected
        s.expect("->")
        names = (fname, param) if recursive else (param,)
        self.bind(*names)
        body = self.comp(self.expr())
        self.unbind(*names)
        if recursive:
            return M.Fix(fname, param, body, ty, pos)
        return M.Lam(param, body, ty, pos)

    def handler(self, expected):
        s = self.s
        pos = self.pos()
        s.expect("handler")
        role = s.ident("role")
        state_var = s.ident("state variable")
        ty = expected if isinstance(expected, T.Handler) else None
        if s.accept(":"):
            tok = s.peek()
            if tok.kind == "ident" and s.at("@", 1) and tok.value not in self.res.raw_protocols \
                    and tok.value not in self.res.protocols:
                # ``Alias @ State``: the ``@`` separates the state type.
                session = self.res.closed(T.Var(s.ident()), self.pos())
            else:
                session = self.session_type()
            s.expect("@")
            ty = T.Handler(session, self.payload_type())
        s.expect("{")
        clauses = []
        while True:
            cpos = self.pos()
            label = s.ident("label")
            binder = "_"
            if s.accept("("):
                if not s.at(")"):
                    binder = s.ident("binder")
                s.expect(")")
            s.expect("->")
            self.bind(binder, state_var)
            body = self.comp(self.expr())
            self.unbind(binder, state_var)
            clauses.append(M.Clause(label, binder, body, cpos))
            if not s.accept("|"):
                break
        s.expect("}")
        labels = [c.label for c in clauses]
        if len(set(labels)) != len(labels):
            self.fail_at("handler repeats a label", pos)
        return M.Handler(role, state_var, tuple(clauses), ty, pos)

    _LEVELS = [("||",), ("&&",), ("==", "!=", "<", "<=", ">", ">="), ("+", "-", "++"), ("*", "/", "%")]

    def opexpr(self, level: int = 0):
        if level == len(self._LEVELS):
            return self.unary()
        s = self.s
        left = self.opexpr(level + 1)
        while True:
            tok = s.peek()
            if tok.kind == "sym" and tok.value in self._LEVELS[level]:
                s.next()
                right = self.opexpr(level + 1)
                binds = []
                a = self.value(left, binds)
                b = self.value(right, binds)
                left = self.wrap(binds, M.Prim(tok.value, (a, b), (tok.line, tok.col)))
                if level == 2:
                    return left
            else:
                return left

    def unary(self):
        pos = self.pos()
        for op in ("not", "show"):
            if self.s.accept(op):
                binds = []
                v = self.value(self.unary(), binds)
                return self.wrap(binds, M.Prim(op, (v,), pos))
        return self.app()

    def starts_atom(self) -> bool:
        tok = self.s.peek()
        if tok.kind in ("int", "string"):
            return True
        if tok.kind == "sym":
            return tok.value == "("
        if tok.kind == "ident":
            if tok.value in ("true", "false", "handler"):
                return True
            return tok.value not in KEYWORDS and not self.s.at("!", 1)
        return False

    def app(self):
        s = self.s
        pos = self.pos()
        binds: list = []
        if s.accept("return"):
            return self.wrap(binds, M.Return(self.value(self.atom(), binds), pos))
        if s.accept("spawn"):
            s.expect("[")
            ty = self.payload_type()
            s.expect("]")
            return M.Spawn(self.comp(self.atom()), ty, pos)
        if s.accept("suspend"):
            h = self.value(self.atom(), binds)
            st = self.value(self.atom(), binds)
            fail = self.value(self.atom(), binds) if self.starts_atom() else None
            return self.wrap(binds, M.Suspend(h, st, fail, pos))
        if s.accept("suspendSend"):
            name = s.ident("session name")
            fn = self.value(self.atom(), binds)
            st = self.value(self.atom(), binds)
            return self.wrap(binds, M.SuspendSend(name, fn, st, pos))
        if s.accept("become"):
            name = s.ident("session name")
            return self.wrap(binds, M.Become(name, self.value(self.atom(), binds), pos))
        if s.accept("newAP"):
            if s.at("{"):
                return M.NewAP(self.res.protocol_value(self.types.protocol_map(), pos), "", pos)
            name = s.ident("protocol name")
            return M.NewAP(self.res.protocol(name, pos), name, pos)
        if s.accept("register"):
            ap = self.value(self.atom(), binds)
            role = s.ident("role")
            cb = self.value(self.atom(), binds)
            return self.wrap(binds, M.Register(ap, role, cb, pos))
        if s.accept("raise"):
            return M.Raise(pos)
        if s.accept("monitor"):
            pid = self.value(self.atom(), binds)
            cb = self.value(self.atom(), binds)
            return self.wrap(binds, M.Monitor(pid, cb, pos))
        if s.accept("leave"):
            return self.wrap(binds, M.Leave(self.value(self.atom(), binds), pos))
        if s.peek().kind == "ident" and s.at("!", 1):
            role = s.ident("role")
            s.expect("!")
            label = s.ident("label")
            payload = self.value(self.atom(), binds) if s.at("(") else M.UNIT_VALUE
            return self.wrap(binds, M.Send(role, label, payload, pos))
        head = self.atom()
        while self.starts_atom():
            apos = self.pos()
            arg = self.atom()
            fn = self.value(head, binds)
            a = self.value(arg, binds)
            head = M.App(fn, a, apos)
        return self.wrap(binds, head) if binds else head

    def atom(self):
        s = self.s
        tok = s.peek()
        pos = (tok.line, tok.col)
        if tok.kind == "int":
            s.next()
            return M.Const(int(tok.value), "Int", pos)
        if tok.kind == "string":
            s.next()
            return M.Const(tok.value, "String", pos)
        if s.accept("true"):
            return M.Const(True, "Bool", pos)
        if s.accept("false"):
            return M.Const(False, "Bool", pos)
        if s.at("handler"):
            return self.handler(None)
        if s.accept("("):
            if s.accept(")"):
                return M.Const(None, "Unit", pos)
            if s.at("-") and s.peek(1).kind == "int" and s.at(")", 2):
                s.next()
                n = int(s.next().value)
                s.expect(")")
                return M.Const(-n, "Int", pos)
            first = self.expr()
            if s.accept(","):
                second = self.expr()
                s.expect(")")
                binds = []
                a = self.value(first, binds)
                b = self.value(second, binds)
                return self.wrap(binds, M.Return(M.Pair(a, b, pos), pos)) if binds else M.Pair(a, b, pos)
            s.expect(")")
            return first
        name = s.ident("expression")
        if name in self.scope:
            return M.Var(name, pos)
        if name in self.def_names:
            return M.Global(name, pos)
        return M.Var(name, pos)


# ---------------------------------------------------------------------------
# Printing programs back to source


def show_value(v) -> str:
    match v:
        case M.Var(name) | M.Global(name):
            return name
        case M.Const(value, kind):
            if kind == "Unit":
                return "()"
            if kind == "Bool":
                return "true" if value else "false"
            if kind == "Int":
                return str(value) if value >= 0 else f"(-{-value})"
            return quote(value)
        case M.Pair(left, right):
            return f"({show_value(left)}, {show_value(right)})"
        case M.Lam(param, body, ty):
            return f"(fun ({param} : {T.show_payload(ty.arg)}) : {_show_sig(ty)} -> {show_comp(body)})"
        case M.Fix(fname, param, body, ty):
            return f"(rec {fname} ({param} : {T.show_payload(ty.arg)}) : {_show_sig(ty)} -> {show_comp(body)})"
        case M.Handler(role, state_var, clauses, ty):
            asc = f" : {T.show_session(ty.session)} @ {T.show_payload(ty.state, True)}" if ty is not None else ""
            parts = []
            for c in clauses:
                binder = "" if c.binder == "_" else f"({c.binder})"
                parts.append(f"{c.label}{binder} -> {show_comp(c.body)}")
            return f"(handler {role} {state_var}{asc} {{ {' | '.join(parts)} }})"
        case M.APName(name) | M.ActorName(name):
            return f"<{name}>"
    raise TypeError(f"not a value: {v!r}")


def _show_sig(ty: T.Fun) -> str:
    effect = ""
    if not (isinstance(ty.pre, T.End) and isinstance(ty.post, T.End)):
        effect = f" {{{T.show_session(ty.pre)} => {T.show_session(ty.post)}}}"
    return f"{T.show_payload(ty.result, True)} @ {T.show_payload(ty.state, True)}{effect}"


def _nested(c) -> str:
    text = show_comp(c)
    return f"({text})" if isinstance(c, (M.Let, M.If, M.LetPair)) else text


def show_comp(c) -> str:
    match c:
        case M.Let("_", comp, body):
            return f"{_nested(comp)}; {show_comp(body)}"
        case M.Let(var, comp, body):
            return f"let {var} = {_nested(comp)} in {show_comp(body)}"
        case M.Return(v):
            return f"return {show_value(v)}"
        case M.App(fn, arg):
            return f"{show_value(fn)} {show_value(arg)}"
        case M.If(cond, then, else_):
            return f"if {show_value(cond)} then {_nested(then)} else {_nested(else_)}"
        case M.LetPair(left, right, value, body):
            return f"let ({left}, {right}) = {show_value(value)} in {show_comp(body)}"
        case M.Prim(op, (a,)):
            return f"{op} {show_value(a)}"
        case M.Prim(op, (a, b)):
            return f"{show_value(a)} {op} {show_value(b)}"
        case M.Spawn(body, ty):
            return f"spawn[{T.show_payload(ty)}] ({show_comp(body)})"
        case M.Send(role, label, v):
            return f"{role} ! {label}" + ("()" if v == M.UNIT_VALUE else f"({show_value(v)})")
        case M.Suspend(h, st, fail):
            extra = f" {show_value(fail)}" if fail is not None else ""
            return f"suspend {show_value(h)} {show_value(st)}{extra}"
        case M.NewAP(protocol, name):
            return f"newAP {name}" if name else f"newAP {T.show_protocol(protocol, inline=True)}"
        case M.Register(ap, role, cb):
            return f"register {show_value(ap)} {role} {show_value(cb)}"
        case M.Raise():
            return "raise"
        case M.Monitor(pid, cb):
            return f"monitor {show_value(pid)} {show_value(cb)}"
        case M.Leave(v):
            return f"leave {show_value(v)}"
        case M.SuspendSend(name, fn, st):
            return f"suspendSend {name} {show_value(fn)} {show_value(st)}"
        case M.Become(name, v):
            return f"become {name} {show_value(v)}"
    raise TypeError(f"not a computation: {c!r}")


def show_term(t) -> str:
    return show_value(t) if M.is_value(t) else show_comp(t)


def _protocol_payloads(p: T.Protocol):
    """Base payload types mentioned anywhere in a protocol."""

    def bases(a):
        match a:
            case T.Base():
                yield a
            case T.Pair(left, right):
                yield from bases(left)
                yield from bases(right)

    for _, t in p.entries:
        for state in T.subterms(t):
            if isinstance(state, (T.Select, T.Branch)):
                for m in state.branches:
                    yield from bases(m.payload)


def show_program(prog: M.Program) -> str:
    """Render a program as self-contained source (aliases expanded)."""
    lines = []
    opaque = sorted({a.name for p in prog.protocols.values() for a in _protocol_payloads(p)} - set(_BASE))
    if opaque:
        lines.append("\n".join(f"type {name}" for name in opaque))
    for name, p in prog.protocols.items():
        lines.append(f"protocol {name} = {T.show_protocol(p, inline=True)}")
    for name, session, payload in prog.sig.entries:
        lines.append(f"session {name} : {T.show_session(session)} carrying {T.show_payload(payload)}")
    for d in prog.defs.values():
        text = show_value(d.value)
        if isinstance(d.value, (M.Lam, M.Fix, M.Handler)) and text.startswith("("):
            text = text[1:-1]
        lines.append(f"def {d.name} : {T.show_payload(d.ty)} =\n  {text}")
    if prog.main is not None:
        lines.append(f"main =\n  {show_comp(prog.main)}")
    return "\n\n".join(lines) + "\n"
