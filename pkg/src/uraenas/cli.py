"""Command-line entry point: ``uraenas <command> ...``.

Exit codes: 0 success, 1 verification failure, 2 usage or config error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__
from .errors import FormatError, UraeError, UsageError

log = logging.getLogger("uraenas")

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _sizes(text: str) -> list[int]:
    try:
        sizes = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not sizes or min(sizes) < 1:
        raise argparse.ArgumentTypeError("sizes must be positive")
    return sizes


def _nonneg(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="uraenas", description="Uncertainty-aware differentiable architecture search on a toy scale.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--threads", type=int, default=None,
                   help="worker processes for ensemble training (default: $URAENAS_THREADS or 1)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth-data", help="write a synthetic image dataset")
    s.add_argument("--classes", type=int, default=10)
    s.add_argument("--n", type=_nonneg, default=5000, help="training images; val and test get n/5 unless set")
    s.add_argument("--n-val", type=_nonneg, default=None)
    s.add_argument("--n-test", type=_nonneg, default=None)
    s.add_argument("--height", type=int, default=16)
    s.add_argument("--width", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)

    s = sub.add_parser("search", help="train phase: concentration parameters plus supernet weights")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("eval-ensemble", help="evaluation phase: train, snapshot and score the ensemble")
    s.add_argument("--config", required=True)
    s.add_argument("--search", required=True)
    s.add_argument("--out", required=True)

    s = sub.add_parser("corrupt", help="build the corrupted test suite")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("report", help="comparison table over evaluated runs")
    s.add_argument("--runs", nargs="+", required=True)
    s.add_argument("--out", required=True, help="JSON table; a .csv and a .txt are written next to it")

    s = sub.add_parser("sweep", help="metrics as a function of ensemble size")
    s.add_argument("--run", required=True)
    s.add_argument("--sizes", type=_sizes, default=list(range(1, 11)))
    s.add_argument("--subsets", type=int, default=10)
    s.add_argument("--out", required=True)

    s = sub.add_parser("verify", help="run the built-in oracle suites")
    s.add_argument("--only", nargs="*", default=None, help="restrict to the named suites")
    return p


def resolve_threads(flag: int | None) -> int:
    if flag is not None:
        n = flag
    else:
        env = os.environ.get("URAENAS_THREADS", "").strip()
        try:
            n = int(env) if env else 1
        except ValueError:
            raise UsageError(f"URAENAS_THREADS must be an integer, got {env!r}") from None
    if n < 1:
        raise UsageError("thread count must be >= 1")
    return n


def _write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _dispatch(args, threads: int) -> int:
    from . import pipeline as P

    if args.command == "synth-data":
        P.synth_data(args.out, args.classes, args.n, args.seed, args.n_val, args.n_test, args.height, args.width)
    elif args.command == "search":
        P.run_search(P.load_config_file(args.config), args.out, threads)
    elif args.command == "eval-ensemble":
        P.run_eval(P.load_config_file(args.config), args.search, args.out, threads)
    elif args.command == "corrupt":
        P.corrupt_data(args.data, args.out, args.seed)
    elif args.command == "report":
        js, csv_text, table = P.build_report(args.runs)
        out = Path(args.out)
        _write(out, js)
        _write(out.with_suffix(".csv"), csv_text)
        _write(out.with_suffix(".txt"), table)
        print(table, end="")
    elif args.command == "sweep":
        _write(args.out, P.run_sweep(args.run, args.sizes, args.subsets))
    elif args.command == "verify":
        from . import verify

        results = verify.run_all(args.only)
        if not results:
            raise UsageError(f"no suite named {args.only}")
        for r in results:
            print(f"[{'PASS' if r.passed else 'FAIL'}] {r.name:<22} {r.detail}  ({r.seconds:.1f}s)")
        failed = sum(not r.passed for r in results)
        print(f"{len(results) - failed}/{len(results)} suites passed")
        return EXIT_VERIFY if failed else EXIT_OK
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        threads = resolve_threads(args.threads)
        with threadpool_limits(1):
            return _dispatch(args, threads)
    except (FormatError, OSError) as exc:
        print(f"uraenas: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except UraeError as exc:
        print(f"uraenas: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
