"""Desk-scale trend checks. These take hours, so they are not part of the pytest suite; run the module directly, eg
`python -m test.desk_scale direct-copy`. Each check prints what it measured and whether the expected trend held."""

import sys
from time import time

import numpy as np

from pyintersect.agent import train
from pyintersect.categories import ExperimentType, ScenarioId
from pyintersect.config import parse_config
from pyintersect.transfer import (direct_copy_experiment, eval_seed, evaluate, forgetting, lifelong_runs, run_seeds,
                                  transfer_runs)


def on_task():
    cfg = parse_config(overrides={"scenarios": "Right"})
    result = train(ScenarioId.RIGHT, cfg.train, cfg.sim)
    report = evaluate(result.params, ScenarioId.RIGHT, 500, eval_seed(cfg.seed, ScenarioId.RIGHT), cfg.sim)
    print(f"Right after {result.iterations} iterations: {report.pct_success:.1f}% success over 500 episodes.")
    return report.pct_success >= 85.0


def direct_copy():
    cfg = parse_config(overrides={"seeds": 3}, experiment=ExperimentType.DIRECT_COPY)
    matrices = [direct_copy_experiment(cfg, s).matrix for s in run_seeds(cfg)]
    tasks = matrices[0].tasks
    ok = True
    for a in tasks:
        row = {b: np.mean([m.success(a, b) for m in matrices]) for b in tasks}
        off = max(v for b, v in row.items() if b != a)
        print(f"{a}: " + ", ".join(f"{b} {v:.1f}" for b, v in row.items()))
        ok &= row[a] >= off
    return ok


def fine_tune():
    cfg = parse_config(experiment=ExperimentType.REVERSE)
    runs = transfer_runs(cfg, with_retention=True)
    fine_tunes = [ft for r in runs for ft in r.fine_tunes]
    jumped = sum(ft.jumpstart > 0 for ft in fine_tunes)
    retention = np.mean([e.retention_points for r in runs for e in r.retention])
    print(f"Jumpstart in {jumped} of {len(fine_tunes)} pairs; mean retention {retention:+.1f} points.")
    return jumped >= 0.8 * len(fine_tunes) and retention > 0


def lifelong():
    cfg = parse_config(experiment=ExperimentType.LIFELONG)
    drops = forgetting(lifelong_runs(cfg)[0].points)
    print("Largest drop from peak: " + ", ".join(f"{t} {d:.2f}" for t, d in drops.items()))
    return max(drops.values()) >= 0.15


CHECKS = {
    "on-task": on_task,
    "direct-copy": direct_copy,
    "fine-tune": fine_tune,
    "lifelong": lifelong
}

if __name__ == "__main__":
    names = sys.argv[1:] or list(CHECKS)
    for name in names:
        t1 = time()
        held = CHECKS[name]()
        t2 = time()
        print(f"{name}: {'trend held' if held else 'TREND NOT MET'} ({t2 - t1:.0f} seconds).")
