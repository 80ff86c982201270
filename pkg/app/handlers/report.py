"""`report <dir...>`: consolidated report over finished run directories."""

import logging
from pathlib import Path

from app import artifacts, runner
from app.config import config

logger = logging.getLogger(__name__)


def register(subparsers):
    parser = subparsers.add_parser("report", help="summarize run directories (text + CSV)")
    parser.add_argument("dirs", nargs="*", type=Path, help="run directories containing record.json")
    parser.add_argument("--output", type=Path, default=None,
                        help="where report.txt and report.csv go (default: OUT_DIR)")
    parser.set_defaults(handler=handle)


async def handle(args) -> int:
    records = [await artifacts.read_record(path) for path in args.dirs]
    text, rows = runner.report(records)
    output = args.output or Path(config.out_dir)
    await artifacts.write_text(output / "report.txt", text)
    await artifacts.write_text(output / "report.csv", artifacts.rows_csv(rows))
    logger.info(f"Report over {len(records)} record(s) written to {output}")
    print(text, end="")
    return 0
