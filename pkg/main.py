"""SR Magnetometry Simulator: entry point."""

import argparse
import asyncio
import logging
import sys

from app import database as db
from app.config import config
from app.errors import ConfigurationError, SimulationError
from app.handlers import analyze, geometry, lock, report, simulate, sweep

logger = logging.getLogger(__name__)

HANDLERS = (simulate, sweep, analyze, geometry, lock, report)
LOG_FORMAT = "%(asctime)s | %(name)s | %(levelname)s | %(message)s"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="srmag",
        description="Synchronized-readout NV magnetometry simulator: scenarios, sweeps, analysis and calculators.",
    )
    parser.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    parser.add_argument("--out-dir", default=None, help="artifact root (env OUT_DIR)")
    parser.add_argument("--paper-scale", action="store_true", default=None,
                        help="apply the scenario's paper_scale overrides")
    parser.add_argument("--plots", action="store_true", default=None, help="also write SVG plots")
    parser.add_argument("--workers", type=int, default=None, help="parallel averages / sweep points")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for handler in HANDLERS:
        handler.register(subparsers)
    return parser


def error_line(e: Exception) -> str:
    message = " ".join(str(e).split()).replace('"', "'")
    return f'ERROR code={type(e).__name__} message="{message}"'


async def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config.apply_overrides(
            out_dir=args.out_dir,
            paper_scale=args.paper_scale,
            plots_enabled=args.plots,
            max_workers=args.workers,
            log_level=args.log_level,
        )
    except ValueError as e:
        err = ConfigurationError(str(e))
        print(error_line(err), file=sys.stderr)
        return 2

    logging.basicConfig(level=config.log_level, format=LOG_FORMAT)
    logging.getLogger().setLevel(config.log_level)

    await db.init_db()
    try:
        return await args.handler(args)
    except SimulationError as e:
        logger.error(f"{args.command} failed: {e}", exc_info=True)
        print(error_line(e), file=sys.stderr)
        return 2 if isinstance(e, ConfigurationError) else 1
    finally:
        await db.close_db()


if __name__ == "__main__":
    sys.exit(asyncio.run(main()))
