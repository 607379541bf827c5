#!/usr/bin/env python3
"""
OpenSetMargin command line - Main application module.
Parses commands, sets up logging and dispatches generate, train, eval, sweep and config runs.
"""

import argparse
import json
import logging
import os
import sys

from openset_margin import __version__
from openset_margin.config_manager import ABLATIONS, DEFAULT_CONFIG, ConfigManager
from openset_margin.errors import ConfigValidationError, OpenSetMarginError
from openset_margin.runner import cmd_eval, cmd_generate, cmd_train
from openset_margin.sweep import DEFAULT_GRIDS, SWEEP_AXES, run_sweep

logger = logging.getLogger('OpenSetMargin')

EXIT_OK = 0
EXIT_RUNTIME_ERROR = 1
EXIT_VALIDATION_ERROR = 2


def setup_logging(out_dir=None, level='INFO'):
    """Log to stdout and, when out_dir is given, to <out_dir>/osm.log"""
    handlers = [logging.StreamHandler(sys.stdout)]
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        handlers.append(logging.FileHandler(os.path.join(out_dir, 'osm.log'), encoding='utf-8'))
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True
    )


def _float_list(text):
    try:
        return [float(v) for v in text.split(',') if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{text}'") from e


def build_parser():
    parser = argparse.ArgumentParser(prog='osm', description='Open-set domain adaptation with adaptive margins')
    parser.add_argument('--version', action='version', version=f"%(prog)s {__version__}")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='JSON config file merged over the defaults')
    common.add_argument('--manifest', help='Rebuild the config recorded in a manifest.json')
    common.add_argument('--out', help='Output directory (overrides output_dir)')
    common.add_argument('--seed', type=int, help='Seed for data generation and training')
    common.add_argument('--log-level', choices=('DEBUG', 'INFO', 'WARNING', 'ERROR'),
                        help='Overrides general.log_level')

    training = argparse.ArgumentParser(add_help=False)
    training.add_argument('--ablate', choices=sorted(ABLATIONS), help='Disable loss components')
    training.add_argument('--static-margin', type=float, help='Constant margin replacing the adaptive one')
    training.add_argument('--omega', type=float, help='Distance reweighting exponent')
    training.add_argument('--seeds', type=int, default=1, help='Number of runs with consecutive seeds')

    commands = parser.add_subparsers(dest='command', required=True)
    commands.add_parser('generate', parents=[common], help='Generate a synthetic source/target pair')

    train = commands.add_parser('train', parents=[common, training], help='Run both training stages')
    train.add_argument('--data', help='Directory holding source.csv and target.csv')
    train.add_argument('--generate', action='store_true', help='Generate the pair from the config instead')

    evaluate = commands.add_parser('eval', parents=[common], help='Score a checkpoint on a dataset')
    evaluate.add_argument('--checkpoint', required=True, help='checkpoint.json written by train')
    evaluate.add_argument('--target', required=True, help='Dataset CSV to score')

    sweep = commands.add_parser('sweep', parents=[common, training], help='Train along one config axis')
    sweep.add_argument('--axis', required=True, choices=sorted(SWEEP_AXES))
    sweep.add_argument('--values', type=_float_list, help='Comma-separated values (default: the axis grid)')
    sweep.add_argument('--workers', type=int, default=1, help='Parallel worker processes')

    config = commands.add_parser('config', parents=[common, training], help='Print configuration')
    config.add_argument('--print-defaults', action='store_true', help='Print the built-in defaults')
    return parser


def _load_manager(args):
    if args.manifest:
        manager = ConfigManager.from_manifest(args.manifest)
        if args.config:
            manager.load_config(args.config)
    else:
        manager = ConfigManager(args.config)
    manager.apply_overrides(seed=args.seed, ablate=getattr(args, 'ablate', None),
                            static_margin=getattr(args, 'static_margin', None),
                            omega=getattr(args, 'omega', None), out_dir=args.out)
    if args.log_level:
        manager.set('general.log_level', args.log_level)
    return manager.validate()


def run_command(args):
    """Execute a parsed command; errors propagate to main"""
    if args.command == 'config' and args.print_defaults:
        print(json.dumps(DEFAULT_CONFIG, indent=4, sort_keys=True))
        return

    manager = _load_manager(args)
    out_dir = manager.config['output_dir']
    level = manager.get('general.log_level')

    if args.command == 'config':
        print(json.dumps(manager.config, indent=4, sort_keys=True))
        return

    setup_logging(out_dir, level)
    logger.info(f"OpenSetMargin {__version__}: {args.command} -> {out_dir} (config {manager.config_hash()[:12]})")

    if args.command == 'generate':
        cmd_generate(manager, out_dir)
    elif args.command == 'train':
        cmd_train(manager, out_dir, seeds=args.seeds, data_dir=args.data, generate=args.generate)
    elif args.command == 'eval':
        cmd_eval(args.checkpoint, args.target, os.path.join(out_dir, 'eval_metrics.json'))
    elif args.command == 'sweep':
        values = args.values if args.values is not None else DEFAULT_GRIDS[args.axis]
        run_sweep(manager, args.axis, values, args.seeds, out_dir, workers=args.workers)


def main(argv=None):
    """Main entry point; returns the process exit code"""
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        run_command(args)
    except ConfigValidationError as e:
        logger.error(f"Invalid configuration: {e}")
        return EXIT_VALIDATION_ERROR
    except OpenSetMarginError as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_RUNTIME_ERROR
    except OSError as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_RUNTIME_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
