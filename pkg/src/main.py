import argparse
import logging
import os
import sys

from cli.commands import COMMANDS
from cli.config_loader import parse_config
from reporting.report_generator import ReportGenerator
from utils.check_logger import CheckLogger
from utils.errors import AcceptanceFailure, LabError
from utils.logging import EventLogger, setup_logging

DEFAULT_CONFIG = 'config/config.yaml'

logger = logging.getLogger('Main')


def _count(text):
    """Integer flag that also accepts 1e6"""
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if value != int(value):
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    return int(value)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help=f"YAML configuration (default {DEFAULT_CONFIG} when present)")
    common.add_argument('--b', type=float, help="step-size exponent, alpha_n = 1/(n+1)^b")
    common.add_argument('--n', '--horizon', dest='horizon', type=_count, help="number of iterations N")
    common.add_argument('--replicas', type=_count, help="independent replicas")
    common.add_argument('--seed', type=_count, help="base seed; replica i uses seed + i")
    common.add_argument('--threads', type=_count, help="concurrent replicas (default: physical cores)")
    common.add_argument('--strict', action='store_const', const=True, default=None,
                        help="exit with status 3 when any check fails")
    common.add_argument('--output', help="output root directory")

    parser = argparse.ArgumentParser(
        prog='skm-lab',
        description="Stochastic Krasnoselskii-Mann iterations with Markovian noise"
    )
    subparsers = parser.add_subparsers(dest='command', metavar='command')
    subparsers.required = True
    descriptions = {
        'verify-poisson': "check the stationary, deviation-matrix and Poisson identities on the configured chain",
        'check-schedules': "step-size inequality and bounded-series diagnostics",
        'run-td': "average-reward TD replicas with per-checkpoint errors",
        'rate-sweep': "Monte Carlo residual rate against 1/sqrt(tau_n)",
        'decompose-noise': "Poisson noise decomposition and the U_n diagnostic",
    }
    for name, description in descriptions.items():
        subparsers.add_parser(name, parents=[common], help=description, description=description)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)

    config_path = args.config
    if config_path is None and os.path.exists(DEFAULT_CONFIG):
        config_path = DEFAULT_CONFIG
    overrides = {
        'b': args.b,
        'horizon': args.horizon,
        'replicas': args.replicas,
        'seed': args.seed,
        'threads': args.threads,
        'strict': args.strict,
        'output': args.output,
    }

    events = None
    try:
        manifest = parse_config(config_path, overrides, args.command)
        config = manifest.config
        setup_logging(config)
        events = EventLogger(config)
        logger.info(f"Running {args.command} into {manifest.output_dir}")

        checks = CheckLogger(manifest.output_dir)
        artifacts = COMMANDS[args.command](manifest, checks)
        manifest.outputs.append('checks.json')
        manifest.write()

        if config['reporting']['enabled']:
            ReportGenerator(config, manifest.output_dir).generate_report(
                manifest, checks.get_checks(), **artifacts
            )

        failed = checks.failed()
        for name in failed:
            events.log_event('check_failed', name)
        print(f"{args.command}: {len(checks.get_checks()) - len(failed)} checks passed, {len(failed)} failed")
        if failed and config['run']['strict']:
            raise AcceptanceFailure(failed)
        return 0

    except LabError as e:
        if events is not None:
            events.log_event(type(e).__name__, str(e))
        logger.error(f"{type(e).__name__}: {e}")
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
