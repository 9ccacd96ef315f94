from dotenv import load_dotenv
load_dotenv()

# qvote.py
# Command-line front end: run an election file, replay a transcript, and run
# the noise sweeps. Exit codes: 0 ok, 1 malformed input, 2 a security check
# failed during the run, 3 replay diverged.

import argparse
import json
import logging
import sys
from pathlib import Path

from pydantic import ValidationError

from election import (
    ElectionSpec,
    SweepSpec,
    Transcript,
    leakage_csv,
    replay,
    run_election,
    run_leakage,
    run_sweep,
    summarize,
    sweep_csv,
)
from env_utils import clean_env_value
from errors import QVoteError, ReplayDivergence

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_MALFORMED = 1
EXIT_VIOLATION = 2
EXIT_DIVERGENCE = 3

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def _configure_logging() -> None:
    level_name = (clean_env_value("QVOTE_LOG_LEVEL") or "INFO").upper()
    logging.basicConfig(format=LOG_FORMAT, level=getattr(logging, level_name, logging.INFO))


def _init_error_tracking() -> None:
    # A no-op unless SENTRY_DSN is configured.
    dsn = clean_env_value("SENTRY_DSN")
    if dsn:
        import sentry_sdk
        sentry_sdk.init(dsn=dsn, environment=clean_env_value("QVOTE_ENVIRONMENT") or "development")


def _seed(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return value


def _load_json(path: str):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _emit(text: str, output: str | None) -> None:
    if output:
        Path(output).write_text(text, encoding="utf-8")
        logger.info("Wrote %s", output)
    else:
        sys.stdout.write(text)


def cmd_run(args) -> int:
    spec = ElectionSpec.model_validate(_load_json(args.config))
    transcript = run_election(spec, seed=args.seed, shots=args.shots)
    _emit(transcript.to_json() + "\n", args.output)
    print(summarize(transcript), file=sys.stderr if not args.output else sys.stdout)
    return EXIT_VIOLATION if transcript.violations else EXIT_OK


def _load_sweep(args) -> SweepSpec:
    spec = SweepSpec.model_validate(_load_json(args.sweep))
    overrides = {"seed": args.seed, "shots": args.shots}
    return spec.model_copy(update={k: v for k, v in overrides.items() if v is not None})


def cmd_sweep(args) -> int:
    spec = _load_sweep(args)
    _emit(sweep_csv(run_sweep(spec, workers=args.workers)), args.output)
    return EXIT_OK


def cmd_leakage(args) -> int:
    spec = _load_sweep(args)
    _emit(leakage_csv(run_leakage(spec, p=args.p, workers=args.workers)), args.output)
    return EXIT_OK


def cmd_replay(args) -> int:
    transcript = Transcript.model_validate(_load_json(args.transcript))
    try:
        report = replay(transcript)
    except ReplayDivergence as exc:
        print(exc)
        return EXIT_DIVERGENCE
    print(report)
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    """Usage errors exit 1 like any other malformed input; 2 is reserved
    for security violations."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_MALFORMED, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="qvote", description="Quantum approval-voting simulator.")
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=_seed, default=None, help="override the file's seed")
    common.add_argument("--shots", type=_positive, default=None, help="override shots per ballot")
    common.add_argument("-o", "--output", default=None, help="write to this file instead of stdout")

    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", parents=[common], help="run an election and print its transcript")
    run.add_argument("config")
    run.set_defaults(handler=cmd_run)

    sweep = sub.add_parser("sweep", parents=[common], help="noise sweep, CSV output")
    sweep.add_argument("sweep")
    sweep.add_argument("--workers", type=_positive, default=None)
    sweep.set_defaults(handler=cmd_sweep)

    leakage = sub.add_parser("leakage", parents=[common], help="off-support leakage per source basis state")
    leakage.add_argument("sweep")
    leakage.add_argument("--p", type=float, default=None, help="error probability (default: largest p_value)")
    leakage.add_argument("--workers", type=_positive, default=None)
    leakage.set_defaults(handler=cmd_leakage)

    rep = sub.add_parser("replay", help="re-execute a transcript and compare")
    rep.add_argument("transcript")
    rep.set_defaults(handler=cmd_replay)
    return parser


def main(argv: list[str] | None = None) -> int:
    _configure_logging()
    _init_error_tracking()
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except (OSError, json.JSONDecodeError, ValidationError) as exc:
        print(f"qvote: malformed input: {exc}", file=sys.stderr)
        return EXIT_MALFORMED
    except QVoteError as exc:
        logger.error("Run aborted: %s", exc)
        print(f"qvote: {exc}", file=sys.stderr)
        return EXIT_MALFORMED


if __name__ == "__main__":
    sys.exit(main())
