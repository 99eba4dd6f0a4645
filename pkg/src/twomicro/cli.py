"""Command line: ``twomicro <subcommand> --spec FILE [--out DIR] [--threads N]``.

Exit codes: 0 success, 2 validation error, 3 numeric-invariant violation.
"""

from __future__ import annotations

import argparse
import json
import sys

from .harness import KINDS, THREADS_ENV, InvariantViolation, SpecValidationError, emit_plot_data, load_spec, run
from .quantization import BoxEscapeError

EXIT_OK, EXIT_VALIDATION, EXIT_INVARIANT = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_VALIDATION)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="twomicro", description="Two-microlocal semiclassical lab on the torus.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for kind in KINDS:
        s = sub.add_parser(kind, help=f"run a {kind} experiment")
        s.add_argument("--spec", required=True, help="experiment spec (JSON)")
        s.add_argument("--out", help="output directory (default: spec 'output' or out-<kind>)")
        s.add_argument("--threads", type=int, help=f"worker threads (default: ${THREADS_ENV} or 1)")
        s.add_argument("--plot-data", action="store_true", help="also write long-format plot CSVs")
    v = sub.add_parser("verify", help="run the exact-identity suite")
    v.add_argument("--spec", help="ignored; accepted for a uniform interface")
    v.add_argument("--out", help="write the report here as verify.txt")
    v.add_argument("--threads", type=int, help="worker threads")
    return p


def _verify(args) -> int:
    from concurrent.futures import ThreadPoolExecutor
    from pathlib import Path

    from .checks import EXACT_SUITE
    from .harness import resolve_threads

    n = resolve_threads(args.threads)
    if n > 1:
        with ThreadPoolExecutor(max_workers=n) as pool:
            results = list(pool.map(lambda f: f(), EXACT_SUITE))
    else:
        results = [f() for f in EXACT_SUITE]
    lines = [r.line() for r in results]
    print("\n".join(lines))
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "verify.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return EXIT_OK if all(r.passed for r in results) else EXIT_INVARIANT


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "verify":
            return _verify(args)
        spec = load_spec(args.spec)
        if spec.kind != args.command:
            raise SpecValidationError("kind", f"spec is a {spec.kind!r} experiment, not {args.command!r}")
        rec = run(spec, args.out, args.threads)
        if args.plot_data:
            emit_plot_data(rec)
        print(json.dumps({"out": rec.out_dir, "spec_hash": rec.spec_hash, "summary": rec.summary}, sort_keys=True))
        return EXIT_OK
    except SpecValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (InvariantViolation, BoxEscapeError) as exc:
        print(f"numeric invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
