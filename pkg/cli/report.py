"""Aggregate extraction summaries over seeds into one table (mean and std per label)."""

import pandas as pd

from common.artifacts import read_csv
from common.errors import ContractError

SUMMARY_COLUMNS = ("victim_acc", "victim_wm_success", "extracted_acc", "extracted_wm_success")


def load_summaries(paths):
    frames = [read_csv(p) for p in paths]
    if not frames:
        raise ContractError("report needs at least one summary CSV")
    table = pd.concat(frames, ignore_index=True)
    missing = [c for c in ("label",) + SUMMARY_COLUMNS if c not in table.columns]
    if missing:
        raise ContractError(f"summary CSVs lack columns {missing}")
    return table


def summarize(table):
    """One row per label: run count, then mean and std of every summary column."""
    grouped = table.groupby("label", sort=True)
    out = grouped[list(SUMMARY_COLUMNS)].agg(["mean", "std"])
    out.columns = [f"{col}_{stat}" for col, stat in out.columns]
    out.insert(0, "runs", grouped.size())
    return out.reset_index().fillna(0.0)


def render(summary):
    lines = ["=" * 60, "Extraction summary (mean +- std over runs)", "=" * 60]
    for row in summary.itertuples(index=False):
        lines.append(f"{row.label} ({row.runs} runs)")
        for col in SUMMARY_COLUMNS:
            mean, std = getattr(row, f"{col}_mean"), getattr(row, f"{col}_std")
            lines.append(f"  {col:<22s} {100 * mean:6.2f}% +- {100 * std:5.2f}")
    lines.append("=" * 60)
    return "\n".join(lines)
