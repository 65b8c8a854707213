import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from canseg import __version__
from canseg.api import commands
from canseg.core.errors import CansegError, ConfigError
from canseg.core.logging import configure_logging

logger = logging.getLogger("canseg")

EXIT_RUNTIME = 1
EXIT_CONFIG = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="canseg",
        description="Context aggregation network for real-time semantic segmentation",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default=None, help="overrides CANSEG_LOG_LEVEL (default INFO)")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p: argparse.ArgumentParser) -> argparse.ArgumentParser:
        p.add_argument("--config", type=Path, default=None, help="RunConfig JSON (default CANSEG_DEFAULT_CONFIG, configs/toy.json)")
        return p

    p = with_config(sub.add_parser("train", help=commands.train_command.__doc__))
    p.add_argument("--out", type=Path, default=None, help="weight container path (default io.weights)")
    p.add_argument("--resume", type=Path, default=None, help="checkpoint directory to continue from")
    p.add_argument("--max-iter", type=int, default=None, help="stop before this iteration (default train.schedule.max_iter)")
    p.add_argument("--seed", type=int, default=None, help="overrides train.seed")
    p.set_defaults(handler=commands.train_command)

    p = with_config(sub.add_parser("infer", help=commands.infer_command.__doc__))
    p.add_argument("--weights", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="output prefix; several images append -<stem>")
    p.add_argument("--threads", type=commands.require_positive, default=None, help="overrides CANSEG_THREADS")
    p.add_argument("images", type=Path, nargs="+", help="binary PPM (P6) inputs")
    p.set_defaults(handler=commands.infer_command)

    p = sub.add_parser("profile", help=commands.profile_command.__doc__)
    p.add_argument("--config", type=Path, default=None, help="RunConfig JSON (default: built-in architecture)")
    p.add_argument("--height", type=commands.require_positive, default=1024)
    p.add_argument("--width", type=commands.require_positive, default=2048)
    p.add_argument("--batch", type=commands.require_positive, default=1)
    p.add_argument("--attention-only", action="store_true", help="treat --height/--width as the attention grid itself")
    p.add_argument("--json", action="store_true")
    p.set_defaults(handler=commands.profile_command)

    p = with_config(sub.add_parser("bench", help=commands.bench_command.__doc__))
    p.add_argument("--weights", type=Path, default=None, help="weight container (default: fresh initialisation)")
    p.add_argument("--height", type=commands.require_positive, default=512)
    p.add_argument("--width", type=commands.require_positive, default=1024)
    p.add_argument("--iters", type=commands.require_positive, default=10)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--json", action="store_true")
    p.set_defaults(handler=commands.bench_command)

    p = sub.add_parser("gradcheck", help=commands.gradcheck_command.__doc__)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--block", action="append", default=None, help="restrict to these blocks (repeatable)")
    p.add_argument("--corrupt", default=None, help=argparse.SUPPRESS)
    p.set_defaults(handler=commands.gradcheck_command)

    p = sub.add_parser("selftest", help=commands.selftest_command.__doc__)
    p.set_defaults(handler=commands.selftest_command)

    p = sub.add_parser("config", help=commands.config_command.__doc__)
    p.add_argument("--validate", type=Path, default=None, metavar="PATH")
    p.set_defaults(handler=commands.config_command)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        return args.handler(args)
    except ConfigError as e:
        logger.error("invalid configuration: %s", e)
        return EXIT_CONFIG
    except CansegError as e:
        logger.error("%s: %s", type(e).__name__, e)
        logger.debug("traceback", exc_info=True)
        return EXIT_RUNTIME
    except Exception as e:
        logger.error("unexpected failure: %s", e)
        logger.debug("traceback", exc_info=True)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
