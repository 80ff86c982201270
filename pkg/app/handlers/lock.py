"""`lock <config>`: field-lock scenario (trace, histogram, broadening)."""

import logging

from app import runner
from app.config import config
from app.scenarios import ScenarioValidationError, load_scenario

logger = logging.getLogger(__name__)


def register(subparsers):
    parser = subparsers.add_parser("lock", help="simulate the field-stabilization loop of a lock scenario")
    parser.add_argument("config", help="scenario file or bundled scenario name")
    parser.set_defaults(handler=handle)


async def handle(args) -> int:
    scenario = load_scenario(args.config, paper_scale=config.paper_scale)
    if scenario.kind != "lock":
        raise ScenarioValidationError(f"{scenario.name}: kind is {scenario.kind!r}, `lock` needs kind 'lock'")
    record = await runner.run_scenario(scenario, seed=args.seed)
    text, _ = runner.report([record])
    print(text, end="")
    return 0
