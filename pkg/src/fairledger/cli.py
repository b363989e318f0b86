"""Command line: run scenarios, audit stored traces, check proofs offline, emit golden vectors.

Exit codes: 0 success, 1 malformed input, 2 verification failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import codec, report, vectors
from .audit import PublicConfig, load_proof, replay_trace, verify_proof
from .proposal import SelectionPolicy
from .simnet import ScenarioError, dump, load, run

EXIT_OK, EXIT_MALFORMED, EXIT_FAILED = 0, 1, 2


class _Malformed(Exception):
    pass


def _policy(text: str) -> SelectionPolicy:
    try:
        return SelectionPolicy.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _emit(reports, fmt: str) -> None:
    if fmt == "pretty":
        sys.stdout.write(report.pretty(reports))
    else:
        sys.stdout.write(report.jsonl(r.record() for r in reports))


def _config(path: Optional[str], default_dir: Path) -> PublicConfig:
    p = Path(path) if path else default_dir / "config.json"
    try:
        return PublicConfig.from_json(p.read_text())
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise _Malformed(f"cannot read config {p}: {exc}") from exc


def cmd_run(args) -> int:
    src = args.scenario_file or args.scenario
    if src is None:
        raise _Malformed("run needs a scenario file")
    try:
        sc = load(src)
        if args.seed is not None:
            sc = dataclasses.replace(sc, seed=args.seed)
        if args.policy is not None:
            sc = dataclasses.replace(sc, policy=args.policy)
        sc.validate()
    except (OSError, ScenarioError) as exc:
        raise _Malformed(str(exc)) from exc
    trace = run(sc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump(sc, out / "scenario.json")
    (out / "config.json").write_text(trace.config.to_json() + "\n")
    (out / "trace.jsonl").write_text(trace.to_jsonl())
    (out / "reports.jsonl").write_text(trace.reports_jsonl())
    (out / "end_state.json").write_text(json.dumps(trace.end_states, indent=1, sort_keys=True) + "\n")
    report.write_proofs(trace.reports, out / "proofs")
    if not args.no_figures:
        report.write_figures(trace.events, trace.reports, out / "figures")
    _emit(trace.reports, args.format)
    return EXIT_OK


def cmd_audit(args) -> int:
    src = Path(args.trace_file or args.trace or "")
    try:
        events = report.read_jsonl(src)
    except (OSError, ValueError) as exc:
        raise _Malformed(f"cannot read trace {src}: {exc}") from exc
    config = _config(args.config, src.parent)
    if args.policy is not None:
        config.policy = args.policy
    try:
        reports = replay_trace(events, config)
    except (KeyError, IndexError, TypeError, ValueError) as exc:
        raise _Malformed(f"trace {src} is malformed: {exc}") from exc
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "audit.jsonl").write_text(report.jsonl(r.record() for r in reports))
        report.write_proofs(reports, out / "proofs")
    _emit(reports, args.format)
    return EXIT_OK


def cmd_verify(args) -> int:
    src = Path(args.proof)
    try:
        rep = load_proof(src.read_text())
    except (OSError, ValueError) as exc:
        raise _Malformed(f"cannot read proof {src}: {exc}") from exc
    config = _config(args.config, src.parent.parent if src.parent.name == "proofs" else src.parent)
    codec.set_hash(config.hash)
    ok = verify_proof(rep, config)
    if args.format == "pretty":
        print(f"{'valid' if ok else 'INVALID'}: {rep.rule} against {rep.accused.hex()[:16]}")
    else:
        print(json.dumps({"valid": ok, "rule": rep.rule, "accused": rep.accused.hex()}, sort_keys=True))
    return EXIT_OK if ok else EXIT_FAILED


def cmd_vectors(args) -> int:
    for p in vectors.write(Path(args.out)):
        print(p)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--format", choices=("json-lines", "pretty"), default="json-lines",
                        help="machine-diffable JSON lines (default) or a human table")
    parser = argparse.ArgumentParser(prog="fairledger", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", parents=[common], help="execute a scenario and write trace, reports, proofs, figures")
    p.add_argument("scenario_file", nargs="?", metavar="SCENARIO")
    p.add_argument("--scenario", metavar="PATH", help="scenario JSON (alternative to the positional)")
    p.add_argument("--out", metavar="DIR", default="out", help="output directory (default: out)")
    p.add_argument("--seed", type=int, metavar="N", help="override the scenario seed")
    p.add_argument("--policy", type=_policy, metavar="fixed:N|bytes:N", help="override the selection policy")
    p.add_argument("--no-figures", action="store_true", help="skip the matplotlib figures")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("audit", parents=[common], help="re-run the passive audit over a stored trace")
    p.add_argument("trace_file", nargs="?", metavar="TRACE")
    p.add_argument("--trace", metavar="PATH", help="trace.jsonl (alternative to the positional)")
    p.add_argument("--config", metavar="PATH", help="public config (default: config.json beside the trace)")
    p.add_argument("--policy", type=_policy, metavar="fixed:N|bytes:N", help="override the config's policy")
    p.add_argument("--out", metavar="DIR", help="also write audit.jsonl and proof files here")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("verify-proof", parents=[common], help="check one proof file; exit 0 iff it verifies")
    p.add_argument("proof", metavar="FILE")
    p.add_argument("--config", metavar="PATH",
                   help="public config (default: config.json beside the proof or its proofs/ directory)")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("gen-vectors", parents=[common], help="write golden codec, hash and frame vectors")
    p.add_argument("--out", metavar="DIR", default="vectors", help="output directory (default: vectors)")
    p.set_defaults(func=cmd_vectors)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_MALFORMED
    try:
        return args.func(args)
    except _Malformed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MALFORMED
    finally:
        codec.set_hash("ripemd160")


if __name__ == "__main__":
    sys.exit(main())
