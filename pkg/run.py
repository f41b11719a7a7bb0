import warnings

warnings.simplefilter(action='ignore', category=FutureWarning)
import argparse
import sys

from modules.core import AccountingViolation, SospError
from scripts.env import ConfigError, build_env, load_config, parse_seeds
from scripts.experiments import EXIT_ACCOUNTING, EXIT_AUDIT, EXIT_CONFIG, execute

COMMANDS = {
    "run": None,
    "sweep": "sweep",
    "escape-test": "escape-test",
    "coupled-test": "coupled-test",
    "select-ablation": "select-ablation",
}


def build_parser():
    parser = argparse.ArgumentParser(description="Private second-order stationary point experiments")
    parser.add_argument('command', choices=sorted(COMMANDS))
    parser.add_argument('--config', default=None)
    parser.add_argument('--out', default=None)
    parser.add_argument('--seeds', default=None, help="comma-separated list, e.g. 0,1,2")
    parser.add_argument('--preset', default=None, choices=["paper-defaults"])
    parser.add_argument('--workers', default=None, type=int)
    return parser


def main(argv=None):
    a = build_parser().parse_args(argv)
    try:
        overrides = dict(out=a.out, workers=a.workers,
                         seeds=parse_seeds(a.seeds) if a.seeds is not None else None)
        if COMMANDS[a.command] is not None:
            overrides["mode"] = COMMANDS[a.command]
        h = load_config(a.config, preset=a.preset, overrides=overrides)
        if a.command == "run" and h.mode == "sweep":
            raise ConfigError("mode 'sweep' runs through the sweep subcommand")
    except ConfigError as e:
        print("config error: {}".format(e), file=sys.stderr)
        return EXIT_CONFIG

    build_env(h, 'config.json', h.out)
    print("mode {} on {} (d={}), {} seed(s) -> {}".format(h.mode, h.objective, h.dim, len(h.seeds), h.out))
    try:
        status = execute(h)
    except AccountingViolation as e:
        print("accounting violation: {}".format(e), file=sys.stderr)
        return EXIT_ACCOUNTING
    except SospError as e:
        print("run failed: {}".format(e), file=sys.stderr)
        return EXIT_AUDIT
    print("exit status {}".format(status))
    return status


if __name__ == '__main__':
    sys.exit(main())
