"""`sweep <config>`: one run per sweep point plus the summary table."""

import logging

from app import runner

logger = logging.getLogger(__name__)


def register(subparsers):
    parser = subparsers.add_parser("sweep", help="run every point of a scenario's sweep")
    parser.add_argument("config", help="scenario file or bundled scenario name")
    parser.add_argument("--strict", action="store_true", help="exit 1 when a point fails or a check fails")
    parser.set_defaults(handler=handle)


async def handle(args) -> int:
    records, summary = await runner.run_sweep(args.config, seed=args.seed)
    text, _ = runner.report([summary])
    print(text, end="")
    if args.strict and (summary.metrics["n_ok"] < summary.metrics["n_points"] or not summary.passed):
        return 1
    return 0
