import logging
import sys
from argparse import ArgumentParser
from typing import Optional, Sequence

from pyintersect.categories import ExperimentType
from pyintersect.checkpoint import CheckpointError
from pyintersect.commands import run_command
from pyintersect.config import ConfigError, dump_config, parse_config
from pyintersect.manifest import ManifestError
from pyintersect.network import NetworkError
from pyintersect.replay import ReturnOutOfRangeError
from pyintersect.report import cmd_report
from pyintersect.sim import SimulationError
from pyintersect.agent import TrainingError
from pyintersect.xml_utils import GeometryFileError

PACKAGE_ERRORS = (ConfigError, ManifestError, CheckpointError, NetworkError, SimulationError, TrainingError,
                  GeometryFileError, ReturnOutOfRangeError)


def _add_run_args(p: ArgumentParser):
    p.add_argument("-c", "--config", metavar="FILE", help="YAML config file. Flags override its values.")
    p.add_argument("-s", "--set", dest="overrides", metavar="KEY=VALUE", action="append", default=[],
                   help="Set a config key, eg `train.epsilon=0.1`. May be given more than once.")
    p.add_argument("--seed", type=int, help="Master seed (config key `seed`).")
    p.add_argument("--seeds", type=int, help="Number of seeds to repeat the experiment over (config key `seeds`).")
    p.add_argument("--scenarios", help="Comma-separated tasks, eg `Right,Left` (config key `scenarios`).")
    p.add_argument("-w", "--workers", type=int, help="Worker processes for independent runs (config key `workers`).")
    p.add_argument("-o", "--output", help="Output root directory (config key `output_dir`). Defaults to "
                                          "$PYINTERSECT_OUTPUT_ROOT, or `runs`.")
    p.add_argument("--checkpoint", metavar="FILE", help="Checkpoint to evaluate, or to start training from.")
    p.add_argument("-d", "--debug", action="store_true", help="More verbose logging.")


def get_argparser() -> ArgumentParser:
    a = ArgumentParser(description="Train and evaluate DQN agents on intersection-crossing tasks, and run the "
                                   "knowledge-transfer experiments.")
    sub = a.add_subparsers(dest="command", required=True, metavar="COMMAND")
    helps = {
        ExperimentType.TRAIN: "Train a network on each configured task.",
        ExperimentType.EVALUATE: "Evaluate a checkpoint on each configured task.",
        ExperimentType.DIRECT_COPY: "Train on each task and evaluate every network on every task.",
        ExperimentType.FINE_TUNE: "Fine-tune source-task networks on target tasks.",
        ExperimentType.REVERSE: "Fine-tune, then measure retention on the source task.",
        ExperimentType.LIFELONG: "Train one network on a sequence of tasks.",
    }
    for experiment, text in helps.items():
        _add_run_args(sub.add_parser(str(experiment), help=text, description=text))
    r = sub.add_parser("report", help="Summarize run directories.", description="Summarize run directories.")
    r.add_argument("input_dir", metavar="DIR", help="Directory containing run directories.")
    r.add_argument("-o", "--output", help="Where to write the summary files. Defaults to DIR/report, or to DIR-report "
                                          "when DIR is a single run directory.")
    r.add_argument("-d", "--debug", action="store_true", help="More verbose logging.")
    return a


def _overrides(ns) -> dict[str, str]:
    overrides = {}
    for item in ns.overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"Expected KEY=VALUE, got `{item}`.", key=key)
        overrides[key.strip()] = value.strip()
    for key, value in (("seed", ns.seed), ("seeds", ns.seeds), ("scenarios", ns.scenarios),
                       ("workers", ns.workers), ("output_dir", ns.output), ("checkpoint", ns.checkpoint)):
        if value is not None:
            overrides[key] = value
    return overrides


def main(argv: Optional[Sequence[str]] = None) -> int:
    ns = get_argparser().parse_args(argv)
    if ns.debug:
        logging.basicConfig(level=logging.DEBUG)
    try:
        if ns.command == "report":
            print(cmd_report(ns.input_dir, ns.output), end="")
            return 0
        cfg = parse_config(ns.config, _overrides(ns), experiment=ExperimentType(ns.command))
        print(f"Running `{ns.command}` with configuration:")
        print(dump_config(cfg), end="")
        run_dir = run_command(cfg)
        print(f"Results written to {run_dir}.")
        return 0
    except PACKAGE_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def intersect_dqn():
    sys.exit(main())
