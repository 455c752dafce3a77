"""Sweep reports shared by the removal attacks: one row per sweep point."""

from dataclasses import dataclass, field

import pandas as pd

from common.artifacts import append_csv, save_line_plot
from common.errors import ContractError


@dataclass
class AttackReport:
    attack: str
    parameter: str
    rows: list = field(default_factory=list)
    thresholds: dict = field(default_factory=dict)

    def add(self, value, task_acc, wm_success_raw, false_rate, **extra):
        for name, v in (("task_acc", task_acc), ("wm_success_raw", wm_success_raw)):
            if not 0.0 <= v <= 1.0:
                raise ContractError(f"{self.attack}: {name}={v} outside [0, 1]")
        row = {
            "attack": self.attack,
            self.parameter: value,
            "task_acc": float(task_acc),
            "wm_success_raw": float(wm_success_raw),
            "wm_adjusted": float(wm_success_raw) - float(false_rate),
        }
        row.update(extra)
        self.rows.append(row)
        return row

    def to_frame(self):
        return pd.DataFrame(self.rows)

    def column(self, name):
        return [row[name] for row in self.rows]

    def write_csv(self, path):
        return append_csv(path, self.to_frame())

    def plot_svg(self, path):
        x = self.column(self.parameter)
        return save_line_plot(
            path, x,
            {"task accuracy": self.column("task_acc"), "adjusted watermark success": self.column("wm_adjusted")},
            xlabel=self.parameter, ylabel="rate", title=self.attack,
        )
