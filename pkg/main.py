"""Command-line entry point for the criss-cross attention toolkit."""

import os

# One BLAS thread by default keeps forward passes reproducible; --threads fans out over trials.
for _var in ('OPENBLAS_NUM_THREADS', 'OMP_NUM_THREADS', 'MKL_NUM_THREADS'):
    os.environ.setdefault(_var, '1')

import argparse  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from typing import Callable, Dict, List, Optional  # noqa: E402

from config import VARIANTS, settings  # noqa: E402
from cost_model import STAGE_GEOMETRIES  # noqa: E402
from handlers import cmd_bench, cmd_cost, cmd_influence, cmd_run, cmd_verify  # noqa: E402
from tensor_core import TensorFormatError  # noqa: E402
from utils import RunManifest, parse_dims  # noqa: E402
from validators import GROUPS  # noqa: E402

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_CHECK_FAILED, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

HANDLERS: Dict[str, Callable[[RunManifest], int]] = {
    'verify': cmd_verify,
    'cost': cmd_cost,
    'bench': cmd_bench,
    'run': cmd_run,
    'influence': cmd_influence,
}


def _groups(text: str) -> List[str]:
    groups = [g.strip() for g in text.split(',') if g.strip()]
    unknown = [g for g in groups if g not in GROUPS]
    if unknown:
        raise argparse.ArgumentTypeError(f"unknown groups {unknown}; choose from {', '.join(GROUPS)}")
    return groups


def _recurrences(text: str) -> List[int]:
    try:
        values = [int(r) for r in text.split(',') if r.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid recurrence list '{text}'")
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError('recurrences must be >= 1')
    return values


def _dims(text: str):
    try:
        return parse_dims(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--variant', choices=VARIANTS, help=f"structure (default {settings.variant})")
    common.add_argument('--r', type=int, help=f"recurrences R (default {settings.recurrence})")
    common.add_argument('--cd', help=f"channel fraction C_d (default {settings.channel_fraction})")
    common.add_argument('--untied-gamma', action='store_true', help='one gamma per recurrence')
    common.add_argument('--precision', type=int, choices=(32, 64))
    common.add_argument('--seed', type=int)
    common.add_argument('--threads', type=int)

    parser = argparse.ArgumentParser(prog='cca3d', description='3D criss-cross attention toolkit')
    sub = parser.add_subparsers(dest='command', required=True)

    verify = sub.add_parser('verify', parents=[common], help='run the property suite')
    verify.add_argument('--only', type=_groups, help=f"comma-separated groups from {', '.join(GROUPS)}")
    verify.add_argument('--trials', type=int, help='dense-oracle trials')

    cost = sub.add_parser('cost', parents=[common], help='analytic MAC/FLOP/parameter counts')
    cost.add_argument('--geometry', choices=sorted(STAGE_GEOMETRIES) + ['all'])
    cost.add_argument('--nl', action='store_true', help='non-local block instead of a single CCA-3D')
    cost.add_argument('--tables', action='store_true', help='reproduced table cells with pass/fail')
    cost.add_argument('--format', choices=('text', 'csv'), default='text')

    bench = sub.add_parser('bench', parents=[common], help='wall-clock CCA-3D vs non-local')
    bench.add_argument('--dims', type=_dims, help='C,T,H,W (default 64,8,28,28)')
    bench.add_argument('--repeats', type=int)

    run = sub.add_parser('run', parents=[common], help='apply RCCA-3D to a CCT1 tensor file')
    run.add_argument('--input', required=True)
    run.add_argument('--output', required=True)
    run.add_argument('--weights', help='weights file; seeded random weights otherwise')
    run.add_argument('--check', action='store_true', help='compare against the dense oracle')

    influence = sub.add_parser('influence', parents=[common], help='write influence graymaps')
    influence.add_argument('--dims', type=_dims, help='C,T,H,W when no --input (default 4,3,8,8)')
    influence.add_argument('--input')
    influence.add_argument('--weights')
    influence.add_argument('--source', help='t,h,w of the perturbed input position')
    influence.add_argument('--rs', type=_recurrences, help='recurrence counts (default 1,2,3)')
    influence.add_argument('--output-dir', default='influence')
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, dispatch, and map errors onto exit codes."""
    args = build_parser().parse_args(argv)
    try:
        manifest = RunManifest.from_args(args, settings)
        logger.info(f"Starting {manifest.subcommand}")
        return HANDLERS[manifest.subcommand](manifest)
    except (OSError, TensorFormatError) as e:
        logger.error(f"I/O error: {e}", exc_info=True)
        return EXIT_IO
    except ValueError as e:
        logger.error(f"Invalid arguments: {e}")
        return EXIT_USAGE


if __name__ == "__main__":
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        logger.info("Stopped by user")
        sys.exit(130)
    except Exception as e:
        logger.error(f"Fatal error: {e}", exc_info=True)
        sys.exit(1)
