# bqfl/main.py
import argparse
import logging
import sys
from typing import Callable, Dict, List, Optional

from pydantic import ValidationError

from . import config as app_config
from .commands import bounds_cmd, inspect_cmd, run_cmd, sweep_cmd
from .errors import BqflError, ConfigError
from .schemas import Command, Verb

# Configure basic logging
logging.basicConfig(level=app_config.LOG_LEVEL, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

HANDLERS: Dict[Verb, Callable[[Command], int]] = {
    Verb.RUN: run_cmd.cmd_run,
    Verb.BOUNDS: bounds_cmd.cmd_bounds,
    Verb.INSPECT_DATA: inspect_cmd.cmd_inspect_data,
    Verb.INSPECT_CHAIN: inspect_cmd.cmd_inspect_chain,
    Verb.SWEEP_CLASSES: sweep_cmd.cmd_sweep_classes,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bqfl",
        description="Blockchain-backed quantum federated learning simulator.",
    )
    parser.add_argument("verb", choices=[v.value for v in Verb], help="what to do")
    parser.add_argument("target", nargs="?", default=None, help="inspect-chain: ledger file to audit")
    parser.add_argument("--config", dest="config_path", default=None, help="flat key = value run file")
    parser.add_argument("--seed", type=int, default=None, help="run seed (unsigned 64-bit)")
    parser.add_argument("--out", dest="output_dir", default=None, help="output directory")
    parser.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="override one config key; repeatable",
    )
    return parser


def parse_command(argv: Optional[List[str]] = None) -> Command:
    args = build_parser().parse_args(argv)
    try:
        return Command(
            verb=Verb(args.verb),
            config_path=args.config_path,
            overrides=args.overrides,
            seed=args.seed,
            output_dir=args.output_dir,
            target=args.target,
        )
    except ValidationError as e:
        raise ConfigError(f"invalid command line: {e.errors()[0].get('msg')}") from e


def main(argv: Optional[List[str]] = None) -> int:
    """Exit codes: 0 success, 1 domain failure, 2 usage or configuration error."""
    try:
        cmd = parse_command(argv)
    except SystemExit as e:  # argparse already printed usage
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    except BqflError as e:
        print(f"error: {e.detail}", file=sys.stderr)
        return e.exit_code

    logger.info(f"MAIN: Dispatching '{cmd.verb.value}'.")
    try:
        return HANDLERS[cmd.verb](cmd)
    except BqflError as e:
        logger.error(f"MAIN: '{cmd.verb.value}' failed: {e.detail}")
        print(f"error: {e.detail}", file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logger.critical(f"MAIN: Unexpected error during '{cmd.verb.value}': {e}", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE
