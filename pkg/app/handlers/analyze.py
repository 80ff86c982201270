"""`analyze <series.csv>`: periodogram and lineshape fit of an existing series."""

import logging
from pathlib import Path

from app import runner
from app.scenarios import AnalysisSpec, parse_model

logger = logging.getLogger(__name__)


def register(subparsers):
    parser = subparsers.add_parser("analyze", help="fit the spectrum of an index,time_s,value series CSV")
    parser.add_argument("series", type=Path, help="series CSV (as written by simulate)")
    parser.add_argument("--n-peaks", type=int, default=1)
    parser.add_argument("--model", choices=("auto", "lorentzian", "gaussian"), default="auto")
    parser.add_argument("--discard", type=int, default=20, help="leading samples to drop")
    parser.add_argument("--zero-pad", type=int, default=1, help="periodogram zero-padding factor")
    parser.add_argument("--window", type=float, nargs=2, metavar=("LO_HZ", "HI_HZ"), default=None)
    parser.add_argument("--half-width", type=float, default=None,
                        help="fit ±HZ around the strongest non-DC bin")
    parser.set_defaults(handler=handle)


async def handle(args) -> int:
    analysis = parse_model(AnalysisSpec, {
        "n_peaks": args.n_peaks,
        "model": args.model,
        "discard": args.discard,
        "zero_pad": args.zero_pad,
        "window_hz": args.window,
        "window_half_width_hz": args.half_width,
    }, source="analyze")
    record = await runner.analyze_file(args.series, analysis)
    text, _ = runner.report([record])
    print(text, end="")
    return 0
