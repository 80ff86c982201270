"""`simulate <config>`: run one scenario and print its report."""

import logging

from app import runner

logger = logging.getLogger(__name__)


def register(subparsers):
    parser = subparsers.add_parser("simulate", help="run one scenario (JSON file or bundled name)")
    parser.add_argument("config", help="scenario file or bundled scenario name")
    parser.add_argument("--strict", action="store_true", help="exit 1 when an acceptance check fails")
    parser.set_defaults(handler=handle)


async def handle(args) -> int:
    record = await runner.run_scenario(args.config, seed=args.seed)
    text, _ = runner.report([record])
    print(text, end="")
    if args.strict and not record.passed:
        return 1
    return 0
