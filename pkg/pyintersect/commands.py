"""The experiment commands behind the `intersect-dqn` script.

Each `cmd_*` function takes a validated :class:`~pyintersect.config.RunConfig`, writes its artifacts into a fresh run
directory under `cfg.output_dir` and finishes by writing the run's manifest. It returns the run directory. Errors are
raised as the package's exception types; turning them into an exit status is left to the script.

Artifacts written into a run directory:

- `config.yaml`: the resolved configuration, accepted back by `--config`;
- `checkpoints/*.ckpt`: trained networks;
- `*.csv`: results, in the schemas listed in :mod:`pyintersect.transfer`;
- `manifest.json`: see :mod:`pyintersect.manifest`.
"""

import logging
import os
from importlib.metadata import PackageNotFoundError, version
from typing import Callable

import pandas as pd

from pyintersect.categories import ExperimentType, TASK_ORDER
from pyintersect.checkpoint import read_checkpoint, write_checkpoint
from pyintersect.config import ConfigRangeError, RunConfig, dump_config, to_flat_dict
from pyintersect.manifest import OutputDirError, RunManifest, make_run_dir, now
from pyintersect.transfer import (curve_frame, direct_copy_experiment, eval_seed, evaluate, fine_tune_samples,
                                  forgetting, learning_curve_frame, lifelong_runs, lifelong_samples, matrix_frame,
                                  pretrain_tasks, report_frame, retention_frame, run_seeds, transfer_runs)

logger = logging.getLogger(__name__)

FORGETTING_COLUMNS = ["task", "peak", "final", "max_drop", "seed"]


def package_version() -> str:
    try:
        return version("pyintersect")
    except PackageNotFoundError:
        return "unknown"


class Run:
    """A run directory being filled, and the manifest that will describe it."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        started = now()
        self.dir = make_run_dir(cfg.output_dir, cfg.seed, started)
        self.manifest = RunManifest(
            experiment=str(cfg.experiment),
            version=package_version(),
            seed=cfg.seed,
            config=to_flat_dict(cfg),
            file_values=dict(cfg.file_values),
            overrides=dict(cfg.overrides),
            started=started
        )
        with open(self.path("config.yaml"), "w", encoding="utf-8") as fd:
            fd.write(dump_config(cfg))

    def path(self, *parts: str) -> str:
        fpath = os.path.join(self.dir, *parts)
        os.makedirs(os.path.dirname(fpath), exist_ok=True)
        return fpath

    def write_csv(self, df: pd.DataFrame, name: str) -> str:
        fpath = self.path(name)
        df.to_csv(fpath, index=False)
        logger.debug(f"Wrote {len(df)} rows to {fpath}.")
        return fpath

    def finish(self) -> str:
        self.manifest.write(self.dir)
        return self.dir


def _open_run(cfg: RunConfig) -> Run:
    try:
        return Run(cfg)
    except OSError as e:
        raise OutputDirError(f"Cannot write to output directory {cfg.output_dir}: {e}")


def cmd_train(cfg: RunConfig) -> str:
    """Train a network on each configured task, for each seed, starting from `cfg.checkpoint` if given."""
    initial = read_checkpoint(cfg.checkpoint) if cfg.checkpoint else None
    run = _open_run(cfg)
    for r, run_seed in enumerate(run_seeds(cfg)):
        trained = pretrain_tasks(cfg, run_seed, cfg.train.iterations, initial_params=initial)
        for task, t in trained.items():
            write_checkpoint(t.result.params, run.path("checkpoints", f"{task}-seed{r}.ckpt"))
            run.write_csv(learning_curve_frame(t.curve), f"learning_curve-{task}-seed{r}.csv")
            print(f"Trained on {task} (seed {r}): final success rate {t.curve[-1].eval_success_rate:.3f}.")
    return run.finish()


def cmd_evaluate(cfg: RunConfig) -> str:
    """Evaluate the network in `cfg.checkpoint` on every configured task."""
    if not cfg.checkpoint:
        raise ConfigRangeError("checkpoint: evaluate needs a checkpoint to evaluate", key="checkpoint")
    params = read_checkpoint(cfg.checkpoint)
    run = _open_run(cfg)
    run_seed = run_seeds(cfg)[0]
    reports = [evaluate(params, task, cfg.transfer.eval_episodes, eval_seed(run_seed, task), cfg.sim)
               for task in cfg.scenarios]
    for report in reports:
        print(f"{report.task}: " + ", ".join(f"{k} {v:.3f}" for k, v in report.metrics().items()))
    run.write_csv(report_frame(reports), "report.csv")
    return run.finish()


def cmd_direct_copy(cfg: RunConfig) -> str:
    """Train one network per task and evaluate every network on every task, for each seed."""
    run = _open_run(cfg)
    results = []
    for r, run_seed in enumerate(run_seeds(cfg)):
        result = direct_copy_experiment(cfg, run_seed)
        for task, t in result.trained.items():
            write_checkpoint(t.result.params, run.path("checkpoints", f"{task}-seed{r}.ckpt"))
        results.append(result)
        print(f"Direct copy, seed {r}: diagonal success " +
              ", ".join(f"{t} {result.matrix.success(t, t):.1f}%" for t in result.matrix.tasks))
    run.write_csv(matrix_frame(results), "matrix.csv")
    return run.finish()


def cmd_fine_tune(cfg: RunConfig) -> str:
    """Fine-tune source-task networks on target tasks alongside fresh networks, for each seed."""
    run = _open_run(cfg)
    runs = transfer_runs(cfg, with_retention=False)
    for r, tr in enumerate(runs):
        for ft in tr.fine_tunes:
            write_checkpoint(ft.params, run.path("checkpoints", f"{ft.source}-{ft.target}-seed{r}.ckpt"))
            print(f"Fine-tuned {ft.source} -> {ft.target} (seed {r}): jumpstart {ft.jumpstart:+.3f}, "
                  f"final gain {ft.asymptote_gain:+.3f}.")
    run.write_csv(curve_frame(fine_tune_samples(runs)), "curve.csv")
    return run.finish()


def cmd_reverse(cfg: RunConfig) -> str:
    """Fine-tune, then evaluate each fine-tuned network back on its source task against the direct-copy baseline."""
    run = _open_run(cfg)
    runs = transfer_runs(cfg, with_retention=True)
    entries = [e for tr in runs for e in tr.retention]
    for e in entries:
        print(f"Retention {e.source} -> {e.target}: {e.retention_points:+.1f} points.")
    run.write_csv(retention_frame(entries), "retention.csv")
    run.write_csv(curve_frame(fine_tune_samples(runs)), "curve.csv")
    return run.finish()


def cmd_lifelong(cfg: RunConfig) -> str:
    """Train one network through the lifelong task schedule, sweeping all five tasks at a fixed cadence."""
    run = _open_run(cfg)
    results = lifelong_runs(cfg)
    rows = []
    for r, result in enumerate(results):
        write_checkpoint(result.params, run.path("checkpoints", f"lifelong-seed{r}.ckpt"))
        drops = forgetting(result.points)
        for task in TASK_ORDER:
            rows.append({"task": str(task), "peak": result.peak(task), "final": result.final(task),
                         "max_drop": drops[task], "seed": result.seed})
        print(f"Lifelong, seed {r}: largest drop from peak " +
              ", ".join(f"{t} {drops[t]:.2f}" for t in TASK_ORDER))
    run.write_csv(curve_frame(lifelong_samples(results)), "curve.csv")
    run.write_csv(pd.DataFrame(rows, columns=FORGETTING_COLUMNS), "forgetting.csv")
    return run.finish()


COMMANDS: dict[ExperimentType, Callable[[RunConfig], str]] = {
    ExperimentType.TRAIN: cmd_train,
    ExperimentType.EVALUATE: cmd_evaluate,
    ExperimentType.DIRECT_COPY: cmd_direct_copy,
    ExperimentType.FINE_TUNE: cmd_fine_tune,
    ExperimentType.REVERSE: cmd_reverse,
    ExperimentType.LIFELONG: cmd_lifelong,
}


def run_command(cfg: RunConfig) -> str:
    """Dispatch to the command for `cfg.experiment`."""
    return COMMANDS[cfg.experiment](cfg)
