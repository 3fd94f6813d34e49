"""Command-line front end.

Exit codes: 0 on success, 1 when a verdict fails (a violation, a type
error, a failed oracle), 2 on usage or parse errors.
"""

from __future__ import annotations

import argparse
import shutil
import sys
from pathlib import Path

from . import __version__, corpus
from . import types as T
from .compliance import DEFAULT_BOUND, compliant, compliant_zap, format_witness
from .config import config_for_program
from .metatheory import explore_interleavings, preservation_harness, verify
from .parser import ParseError, parse_local_protocols, parse_program, parse_protocol_file
from .projection import ProjectionError, project, project_all
from .runtime import DEFAULT_MAX_STEPS, POLICIES, Injection, format_trace, run
from .typecheck import check_program

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _resolve(name: str, suffix: str = "") -> Path:
    """A path on disk, or failing that the name of a bundled example.  A
    bundled name may omit ``suffix``."""
    path = Path(name)
    if path.is_file():
        return path
    candidates = [name] + ([name + suffix] if suffix and not name.endswith(suffix) else [])
    for candidate in candidates:
        try:
            return corpus.corpus_path(candidate)
        except FileNotFoundError:
            pass
    raise UsageError(f"no such file or bundled example: {name}")


def _load_program(args):
    path = _resolve(args.program, ".maty")
    search = tuple(args.protocols or ())
    return parse_program(path.read_text(encoding="utf-8"), str(path), search), path


def _protocols_of(path: Path) -> list[tuple[str, T.Protocol]]:
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".scr":
        out = []
        for gp in parse_protocol_file(text, str(path)):
            T.well_formed_global(gp.body)
            out.append((gp.name, project_all(gp.body, set(gp.roles) & T.session_roles(gp.body) or None)))
        return out
    return sorted(parse_local_protocols(text, str(path)).items())


def _inject_arg(items: list[str] | None) -> Injection | None:
    if not items:
        return None
    fields = dict(item.split("=", 1) for item in items if "=" in item)
    if "actor" not in fields or len(fields) != len(items):
        raise UsageError("--inject-raise expects actor=<name> [step=<n>]")
    try:
        step = int(fields.get("step", "0"))
    except ValueError:
        raise UsageError("--inject-raise step must be an integer") from None
    return Injection(fields["actor"], step)


# ---------------------------------------------------------------------------
# Commands


def cmd_project(args) -> int:
    path = _resolve(args.file, ".scr")
    protocols = parse_protocol_file(path.read_text(encoding="utf-8"), str(path))
    if args.protocol:
        protocols = [gp for gp in protocols if gp.name == args.protocol]
        if not protocols:
            raise UsageError(f"no protocol named {args.protocol} in {path.name}")
    status = EXIT_OK
    for gp in protocols:
        roles = [args.role] if args.role else list(gp.roles)
        missing = [role for role in roles if role not in gp.roles]
        if missing:
            raise UsageError(f"protocol {gp.name} has no role {missing[0]}")
        print(f"protocol {gp.name}")
        for role in roles:
            try:
                print(f"  {role}: {T.show_session(project(gp.body, role))}")
            except ProjectionError as err:
                print(f"  {role}: ProjectionError: {err}")
                status = EXIT_FAIL
    return status


def cmd_check(args) -> int:
    path = _resolve(args.file, ".scr")
    status = EXIT_OK
    check = compliant_zap if args.zap else compliant
    try:
        protocols = _protocols_of(path)
    except (ProjectionError, T.IllFormedType) as err:
        print(f"ProjectionError: {err}")
        return EXIT_FAIL
    for name, protocol in protocols:
        verdict = check(protocol, args.bound)
        print(f"{name}: {verdict}")
        if verdict.status == "Violation":
            if verdict.detail:
                print(f"  {verdict.detail}")
            witness = format_witness(verdict)
            if witness:
                print(witness)
        if not verdict.ok:
            status = EXIT_FAIL
    return status


def cmd_typecheck(args) -> int:
    prog, path = _load_program(args)
    verdict = check_program(prog, zap=args.zap, switch=args.switch, bound=args.bound)
    if verdict.ok:
        print(f"{path.name}: ok")
        return EXIT_OK
    for err in verdict.errors:
        print("\t".join((err.code, f"{path.name}:{err.location()}", err.expected or "-", err.found or "-",
                         err.message or "-")))
    return EXIT_FAIL


def cmd_run(args) -> int:
    prog, path = _load_program(args)
    inject = _inject_arg(args.inject_raise)
    if inject is not None and not args.zap:
        raise UsageError("--inject-raise needs --zap")
    verdict = check_program(prog, zap=args.zap, switch=args.switch)
    if not verdict.ok:
        for err in verdict.errors:
            print(f"{path.name}: {err.line()}", file=sys.stderr)
        return EXIT_FAIL
    if args.assert_preservation:
        report = preservation_harness(prog, args.policy, args.seed, args.max_steps, args.zap, args.switch,
                                      name=path.name, inject=inject)
        trace, stop, steps = report.trace, report.stop, report.steps
    else:
        report = None
        result = run(config_for_program(prog, zap=args.zap, switch=args.switch), args.policy, args.seed,
                     args.max_steps, inject=inject)
        trace, stop, steps = result.trace, result.stop, result.steps
    text = format_trace(trace).rstrip("\n")
    if args.trace:
        Path(args.trace).write_text(text + "\n" if text else "", encoding="utf-8")
    elif text:
        print(text)
    print(f"stop={stop} steps={steps}")
    if report is not None:
        for v in report.violations:
            print(f"violation step={v.step} kind={v.kind} rule={v.rule} node={v.node}: {v.reason}")
        if report.error:
            print(f"error: {report.error}")
        if report.canonical is False:
            print("violation: quiescent configuration is not in canonical form")
        if not report.ok:
            return EXIT_FAIL
        print("preservation: ok")
    return EXIT_OK


def cmd_verify(args) -> int:
    prog, path = _load_program(args)
    inject = _inject_arg(args.inject_raise)
    if inject is not None and not args.zap:
        raise UsageError("--inject-raise needs --zap")
    if args.exhaustive:
        if inject is not None:
            raise UsageError("--exhaustive does not combine with --inject-raise")
        result = explore_interleavings(prog, args.zap, args.switch, args.max_states, name=path.name)
        print(result.json())
        return EXIT_OK if result.ok else EXIT_FAIL
    reports = verify(prog, range(args.seed, args.seed + args.seeds), args.max_steps, zap=args.zap,
                     switch=args.switch, policy=args.policy, name=path.name, inject=inject)
    for report in reports:
        print(report.json())
    return EXIT_OK if all(r.ok for r in reports) else EXIT_FAIL


def cmd_examples(args) -> int:
    names = corpus.corpus_files()
    if args.extract:
        dest = Path(args.extract)
        dest.mkdir(parents=True, exist_ok=True)
        for name in names if not args.name else [args.name]:
            shutil.copyfile(corpus.corpus_path(name), dest / name)
            print(dest / name)
        return EXIT_OK
    if args.name:
        sys.stdout.write(corpus.read(args.name))
        return EXIT_OK
    for name in names:
        print(name)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing


def _nonneg(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError("must be non-negative")
    return value


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="maty", description="Multiparty-session-typed actors: "
                                 "projection, compliance, typing, execution and verification.")
    ap.add_argument("--version", action="version", version=f"maty {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("project", help="project global protocols onto roles")
    p.add_argument("file", help=".scr file or bundled example name")
    p.add_argument("--role")
    p.add_argument("--protocol", help="only this protocol of the file")
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("check", help="check protocol compliance")
    p.add_argument("file", help=".scr or .mpst file, or bundled example name")
    p.add_argument("--bound", type=_nonneg, default=DEFAULT_BOUND, help="queue bound (default %(default)s)")
    p.add_argument("--zap", action="store_true", help="allow roles to fail")
    p.set_defaults(func=cmd_check)

    def program_args(p, modes=True):
        p.add_argument("program", help=".maty file or bundled example name")
        p.add_argument("--protocols", action="append", metavar="DIR", help="extra directory for imports")
        if modes:
            p.add_argument("--zap", action="store_true", help="enable failure handling")
            p.add_argument("--switch", action="store_true", help="enable session switching")

    p = sub.add_parser("typecheck", help="typecheck a program")
    program_args(p)
    p.add_argument("--bound", type=_nonneg, default=DEFAULT_BOUND)
    p.set_defaults(func=cmd_typecheck)

    def exec_args(p):
        program_args(p)
        p.add_argument("--seed", type=_nonneg, default=0)
        p.add_argument("--policy", choices=sorted(POLICIES), default="random")
        p.add_argument("--max-steps", type=_nonneg, default=None)
        p.add_argument("--inject-raise", nargs="+", metavar="KEY=VALUE",
                       help="force a raise: actor=<name> step=<n> (needs --zap)")

    p = sub.add_parser("run", help="run a program")
    exec_args(p)
    p.add_argument("--trace", metavar="FILE", help="write the trace here instead of stdout")
    p.add_argument("--assert-preservation", action="store_true",
                   help="check configuration typing after every step")
    p.set_defaults(func=cmd_run, default_steps=DEFAULT_MAX_STEPS)

    p = sub.add_parser("verify", help="run the preservation harness over many seeds (JSON lines)")
    exec_args(p)
    p.add_argument("--seeds", type=_nonneg, default=100, help="number of seeds, starting at --seed")
    p.add_argument("--exhaustive", action="store_true",
                   help="check every interleaving instead of sampling seeds (small programs only)")
    p.add_argument("--max-states", type=_nonneg, default=100_000,
                   help="state limit for --exhaustive (default %(default)s)")
    p.set_defaults(func=cmd_verify, default_steps=10_000)

    p = sub.add_parser("examples", help="list, print or extract the bundled examples")
    p.add_argument("name", nargs="?")
    p.add_argument("--extract", metavar="DIR", help="copy examples into DIR")
    p.set_defaults(func=cmd_examples)
    return ap


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    if getattr(args, "max_steps", 0) is None:
        args.max_steps = args.default_steps
    try:
        return args.func(args)
    except ParseError as err:
        print(f"parse error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, FileNotFoundError) as err:
        print(f"{parser.prog}: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except T.IllFormedType as err:
        print(f"ill-formed type: {err}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
