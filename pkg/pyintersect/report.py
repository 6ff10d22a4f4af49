"""Summaries across run directories.

:func:`cmd_report` reads every run directory below an input directory, checks each run's files against its manifest,
and aggregates the results over runs and seeds. It prints a human-readable summary and writes tidy CSV data next to it;
run directories themselves are only read.

Standard deviations are sample standard deviations (0 when there is a single value).
"""

import logging
import os
from typing import Optional

import pandas as pd

from pyintersect.categories import TASK_ORDER
from pyintersect.manifest import MANIFEST_NAME, NoRunsFoundError, OutputDirError, find_run_dirs, read_manifest

logger = logging.getLogger(__name__)

REPORT_DIR_NAME = "report"
REPORT_SUFFIX = "-report"


def _collect(run_dirs: list[str], name: str) -> pd.DataFrame:
    frames = []
    for run_dir in run_dirs:
        fpath = os.path.join(run_dir, name)
        if os.path.exists(fpath):
            df = pd.read_csv(fpath)
            df["run"] = os.path.basename(run_dir)
            frames.append(df)
    if not frames:
        return pd.DataFrame()
    return pd.concat(frames, ignore_index=True)


def _mean_std(df: pd.DataFrame, keys: list[str], value: str) -> pd.DataFrame:
    out = df.groupby(keys, sort=False)[value].agg(["mean", "std", "count"]).reset_index()
    out["std"] = out["std"].fillna(0.0)
    return out


def _task_order(names) -> list[str]:
    known = [str(t) for t in TASK_ORDER]
    present = set(names)
    return [t for t in known if t in present] + sorted(present - set(known))


def success_table(summary: pd.DataFrame) -> pd.DataFrame:
    """Training task by evaluation task table of mean ± std success, in the fixed task order."""
    success = summary[summary["metric"] == "pct_success"]
    rows = _task_order(success["train_task"])
    cols = _task_order(success["eval_task"])
    cells = {(r.train_task, r.eval_task): f"{r.mean:.1f} ± {r.std:.1f}" for r in success.itertuples()}
    table = pd.DataFrame([[cells.get((r, c), "") for c in cols] for r in rows], index=rows, columns=cols)
    table.index.name = "train \\ eval"
    return table


def default_output_dir(input_dir: str) -> str:
    if os.path.exists(os.path.join(input_dir, MANIFEST_NAME)):
        return os.path.abspath(input_dir).rstrip(os.sep) + REPORT_SUFFIX
    return os.path.join(input_dir, REPORT_DIR_NAME)


def cmd_report(input_dir: str, output_dir: Optional[str] = None) -> str:
    """Summarize every run below `input_dir`.

    :param input_dir: Directory holding run directories (at any depth).
    :param output_dir: Where the summary files go. Defaults to `<input_dir>/report`, or to the sibling directory
        `<input_dir>-report` when `input_dir` is itself a run directory, so that the run is left untouched.
    :return: The summary text.
    :raises OutputDirError: If the summary files cannot be written.
    """
    run_dirs = find_run_dirs(input_dir)
    if not run_dirs:
        raise NoRunsFoundError(f"no runs found in {input_dir}")
    for run_dir in run_dirs:
        read_manifest(os.path.join(run_dir, MANIFEST_NAME)).verify(run_dir)
    logger.info(f"Summarizing {len(run_dirs)} runs from {input_dir}.")
    output_dir = output_dir or default_output_dir(input_dir)
    try:
        os.makedirs(output_dir, exist_ok=True)
    except OSError as e:
        raise OutputDirError(f"Cannot create report directory {output_dir}: {e.strerror or e}")

    sections = [f"{len(run_dirs)} runs found in {input_dir}."]
    matrix = _collect(run_dirs, "matrix.csv")
    if not matrix.empty:
        summary = _mean_std(matrix, ["train_task", "eval_task", "metric"], "value")
        summary.to_csv(os.path.join(output_dir, "summary_matrix.csv"), index=False)
        sections.append("Direct copy success (%), mean ± std over seeds:\n" + success_table(summary).to_string())

    report = _collect(run_dirs, "report.csv")
    if not report.empty:
        summary = _mean_std(report, ["task", "metric"], "value")
        summary.to_csv(os.path.join(output_dir, "summary_report.csv"), index=False)
        table = summary.pivot(index="task", columns="metric", values="mean")
        table = table.reindex(_task_order(table.index))
        sections.append("Evaluation, mean over runs:\n" + table.to_string(float_format=lambda v: f"{v:.2f}"))

    retention = _collect(run_dirs, "retention.csv")
    if not retention.empty:
        summary = _mean_std(retention, ["source", "target"], "retention_points")
        summary.to_csv(os.path.join(output_dir, "summary_retention.csv"), index=False)
        lines = [f"{r.source} -> {r.target}: {r.mean:+.1f} ± {r.std:.1f}" for r in summary.itertuples()]
        lines.append(f"mean retention over pairs: {summary['mean'].mean():+.1f} points")
        sections.append("Retention (points), mean ± std over seeds:\n" + "\n".join(lines))

    curve = _collect(run_dirs, "curve.csv")
    if not curve.empty:
        summary = _mean_std(curve, ["experiment_id", "iteration", "task"], "success_rate")
        summary.to_csv(os.path.join(output_dir, "summary_curve.csv"), index=False)
        final = summary.groupby(["experiment_id", "task"], sort=False).tail(1)
        lines = [f"{r.experiment_id} {r.task} @ {r.iteration}: {r.mean:.3f}" for r in final.itertuples()]
        sections.append("Final curve points:\n" + "\n".join(lines))

    text = "\n\n".join(sections) + "\n"
    fpath = os.path.join(output_dir, "summary.txt")
    try:
        with open(fpath, "w", encoding="utf-8") as fd:
            fd.write(text)
    except OSError as e:
        raise OutputDirError(f"Cannot write {fpath}: {e.strerror or e}")
    return text
