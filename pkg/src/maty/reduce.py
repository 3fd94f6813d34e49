"""Term reduction inside a single thread.

A computation is split into an evaluation context (a spine of ``let``
frames) and the computation in its hole.  Pure redexes in the hole are
contracted by ``beta``; everything else is an effect handled by the
configuration-level rules.
"""

from __future__ import annotations

from . import terms as M


class Stuck(Exception):
    """A thread cannot take a step; only possible for ill-typed terms."""


def resolve(v, defs: dict):
    """Replace a top-level definition reference by its value."""
    seen = 0
    while isinstance(v, M.Global):
        if v.name not in defs:
            raise Stuck(f"undefined global {v.name}")
        v = defs[v.name]
        seen += 1
        if seen > 1000:
            raise Stuck("cyclic definitions")
    return v


def decompose(m):
    """Return ``(frames, hole)``: the ``let`` frames from outermost inwards."""
    frames = []
    while isinstance(m, M.Let):
        frames.append(m)
        m = m.comp
    return frames, m


def plug(frames: list, m):
    for frame in reversed(frames):
        m = M.Let(frame.var, m, frame.body, frame.span)
    return m


def _bind(body, name, value):
    return body if name == "_" else M.subst(body, {name: value})


def _const(v, kind: str):
    if not isinstance(v, M.Const) or v.kind != kind:
        raise Stuck(f"expected a {kind} value, found {v!r}")
    return v.value


def eval_prim(op: str, args: tuple) -> M.Const:
    if op in M.EQUALITY_OPS:
        a, b = args
        if not (isinstance(a, M.Const) and isinstance(b, M.Const) and a.kind == b.kind):
            raise Stuck(f"cannot compare {a!r} and {b!r}")
        same = a.value == b.value
        return M.const(same if op == "==" else not same)
    kinds, _ = M.PRIM_OPS[op]
    vals = [_const(a, k) for a, k in zip(args, kinds)]
    match op:
        case "+":
            return M.const(vals[0] + vals[1])
        case "-":
            return M.const(vals[0] - vals[1])
        case "*":
            return M.const(vals[0] * vals[1])
        case "/":
            return M.const(vals[0] // vals[1] if vals[1] else 0)
        case "%":
            return M.const(vals[0] % vals[1] if vals[1] else 0)
        case "<":
            return M.const(vals[0] < vals[1])
        case "<=":
            return M.const(vals[0] <= vals[1])
        case ">":
            return M.const(vals[0] > vals[1])
        case ">=":
            return M.const(vals[0] >= vals[1])
        case "&&":
            return M.const(vals[0] and vals[1])
        case "||":
            return M.const(vals[0] or vals[1])
        case "not":
            return M.const(not vals[0])
        case "++":
            return M.const(vals[0] + vals[1])
        case "show":
            return M.const(str(vals[0]))
    raise Stuck(f"unknown primitive {op}")


def apply(fn, arg, defs: dict, span=None):
    """The computation ``fn arg`` reduces to."""
    f = resolve(fn, defs)
    match f:
        case M.Lam(param, body):
            return _bind(body, param, arg)
        case M.Fix(fname, param, body):
            return M.subst(body, {n: v for n, v in ((fname, f), (param, arg)) if n != "_"})
    raise Stuck(f"cannot apply {f!r}")


def is_beta_redex(frames: list, hole) -> bool:
    if isinstance(hole, M.Return):
        return bool(frames)
    return isinstance(hole, (M.App, M.If, M.LetPair, M.Prim))


def beta(frames: list, hole, defs: dict) -> tuple[object, str]:
    """Contract the pure redex in the hole; returns the new thread term and
    a short description of the step."""
    match hole:
        case M.Return(v):
            frame = frames[-1]
            return plug(frames[:-1], _bind(frame.body, frame.var, v)), f"let {frame.var}"
        case M.App(fn, arg):
            name = fn.name if isinstance(fn, M.Global) else "fun"
            return plug(frames, apply(fn, arg, defs)), f"app {name}"
        case M.If(cond, then, else_):
            b = _const(resolve(cond, defs), "Bool")
            return plug(frames, then if b else else_), f"if {'then' if b else 'else'}"
        case M.LetPair(left, right, value, body):
            v = resolve(value, defs)
            if not isinstance(v, M.Pair):
                raise Stuck(f"expected a pair, found {v!r}")
            env = {n: x for n, x in ((left, v.left), (right, v.right)) if n != "_"}
            return plug(frames, M.subst(body, env)), "let pair"
        case M.Prim(op, args):
            result = eval_prim(op, tuple(resolve(a, defs) for a in args))
            return plug(frames, M.Return(result, hole.span)), f"prim {op}"
    raise Stuck(f"no reduction for {hole!r}")
