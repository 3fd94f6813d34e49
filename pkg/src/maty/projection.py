"""Projection of global types onto roles, with full merging.

Projection is computed on the graph of global states rather than on the
μ-term syntax.  For a role ``r``, a local state is the set of global states
at which ``r`` acts next; states reachable only through messages that do not
involve ``r`` are merged into one local state.  Cycles that never involve
``r`` contribute no behaviour, which is what lets a ``rec`` whose body never
mentions ``r`` collapse to ``end``.  The local graph is turned back into a
μ-term by placing a ``rec`` binder at every back edge.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import types as T

END_ATOM = "<end>"


class ProjectionError(Exception):
    def __init__(self, role: str, path: tuple[str, ...], reason: str, detail: str = ""):
        self.role = role
        self.path = path
        self.reason = reason
        self.detail = detail
        where = "/".join(path) or "<root>"
        super().__init__(f"{reason} projecting onto {role} at {where}" + (f": {detail}" if detail else ""))


@dataclass(frozen=True)
class _View:
    kind: str  # "sel" or "bra"
    peer: str
    msgs: tuple  # (label, payload, frozenset of successor atoms)


@dataclass(frozen=True)
class _Node:
    kind: str  # "end", "sel" or "bra"
    peer: str = ""
    msgs: tuple = ()  # (label, payload, successor key)


class _MergeGraph:
    """Builds merged local states from sets of atoms.

    ``view`` maps a non-end atom to the communication it offers together
    with the atom sets its continuations lead to.
    """

    def __init__(self, role: str, view):
        self.role = role
        self.view = view
        self.nodes: dict[frozenset, _Node] = {}
        self.merged = False

    def build(self, root: frozenset) -> frozenset:
        todo = [(root, ())]
        while todo:
            key, path = todo.pop()
            if key in self.nodes:
                continue
            node = self._combine(key, path)
            self.nodes[key] = node
            for label, _, succ in node.msgs:
                todo.append((succ, path + (label,)))
        return root

    def _combine(self, key: frozenset, path) -> _Node:
        atoms = [a for a in key if a != END_ATOM]
        if not atoms:
            return _Node("end")
        if END_ATOM in key:
            raise ProjectionError(self.role, path, "NonMergeable", "end merged with a communication")
        if len(atoms) > 1:
            self.merged = True
        views = [self.view(a) for a in sorted(atoms, key=repr)]
        kinds = {(v.kind, v.peer) for v in views}
        if len(kinds) != 1:
            raise ProjectionError(self.role, path, "NonMergeable",
                                  "branches disagree on direction or peer: " + ", ".join(sorted(f"{k}:{p}" for k, p in kinds)))
        kind, peer = kinds.pop()
        table: dict[str, list] = {}
        for v in views:
            for label, payload, succ in v.msgs:
                entry = table.get(label)
                if entry is None:
                    table[label] = [payload, set(succ)]
                else:
                    if not T.payload_equal(entry[0], payload):
                        raise ProjectionError(self.role, path + (label,), "NonMergeable",
                                              f"payloads {entry[0]} and {payload} differ")
                    entry[1] |= succ
        if kind == "sel":
            label_sets = {tuple(m[0] for m in v.msgs) for v in views}
            if len(label_sets) != 1:
                raise ProjectionError(self.role, path, "NonMergeable", "selections offer different labels")
        msgs = tuple((label, payload, frozenset(succ)) for label, (payload, succ) in sorted(table.items()))
        return _Node(kind, peer, msgs)

    def to_term(self, root: frozenset) -> T.SessionType:
        names: dict[frozenset, str] = {}
        recursive: set[frozenset] = set()

        def name_of(key):
            if key not in names:
                names[key] = _var_name(len(names))
            return names[key]

        def go(key, active):
            node = self.nodes[key]
            if node.kind == "end":
                return T.END
            if key in active:
                recursive.add(key)
                return T.Var(name_of(key))
            active.add(key)
            msgs = tuple(T.Msg(label, payload, go(succ, active)) for label, payload, succ in node.msgs)
            active.discard(key)
            body = T.Select(node.peer, msgs) if node.kind == "sel" else T.Branch(node.peer, msgs)
            if key in recursive:
                recursive.discard(key)
                return T.Rec(name_of(key), body)
            return body

        return go(root, set())


def _var_name(i: int) -> str:
    letters = "XYZW"
    return letters[i % 4] + (str(i // 4) if i >= 4 else "")


# ---------------------------------------------------------------------------
# Global projection


def _first_actions(g: T.GlobalType, role: str) -> frozenset:
    """Global states where ``role`` acts next, plus END_ATOM if it may finish."""
    out = set()
    seen = set()
    todo = [T.unfold(g)]
    while todo:
        cur = todo.pop()
        if cur in seen:
            continue
        seen.add(cur)
        match cur:
            case T.GEnd():
                out.add(END_ATOM)
            case T.GMsg(sender, receiver, branches):
                if role in (sender, receiver):
                    out.add(cur)
                else:
                    todo.extend(T.unfold(m.cont) for m in branches)
    return frozenset(out)


def _global_view(role: str):
    def view(g: T.GMsg) -> _View:
        kind, peer = ("sel", g.receiver) if g.sender == role else ("bra", g.sender)
        return _View(kind, peer, tuple((m.label, m.payload, _first_actions(m.cont, role)) for m in g.branches))

    return view


def project_with_info(g: T.GlobalType, role: str) -> tuple[T.SessionType, bool]:
    """Project ``g`` onto ``role``; also report whether any merge was needed."""
    graph = _MergeGraph(role, _global_view(role))
    root = graph.build(_first_actions(g, role))
    return graph.to_term(root), graph.merged


def project(g: T.GlobalType, role: str) -> T.SessionType:
    return project_with_info(g, role)[0]


def project_all(g: T.GlobalType, roles=None) -> T.Protocol:
    present = T.session_roles(g)
    if roles is None:
        roles = present
    roles = set(roles)
    if roles != present:
        missing = sorted(present - roles)
        extra = sorted(roles - present)
        detail = "; ".join(filter(None, [
            f"roles not requested: {', '.join(missing)}" if missing else "",
            f"roles absent from the global type: {', '.join(extra)}" if extra else "",
        ]))
        role = (extra or missing)[0]
        raise ProjectionError(role, (), "RoleAbsent", detail)
    return T.Protocol({r: project(g, r) for r in sorted(roles)})


# ---------------------------------------------------------------------------
# Merging local types


def _local_atom(t: T.SessionType):
    t = T.unfold(t)
    return END_ATOM if isinstance(t, T.End) else t


def _local_view(t) -> _View:
    kind = "sel" if isinstance(t, T.Select) else "bra"
    return _View(kind, t.role, tuple((m.label, m.payload, frozenset((_local_atom(m.cont),))) for m in t.branches))


def merge(a: T.SessionType, b: T.SessionType) -> T.SessionType:
    """Full merge: inputs from the same peer unite their branches, recursively
    merging shared continuations; outputs must agree on labels and payloads."""
    graph = _MergeGraph("?", _local_view)
    root = graph.build(frozenset((_local_atom(a), _local_atom(b))))
    return graph.to_term(root)
