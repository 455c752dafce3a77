"""Run artifacts: CSV tables, SVG charts and the per-run YAML manifest."""

from __future__ import annotations

import hashlib
import subprocess
from datetime import datetime, timezone
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402
import yaml  # noqa: E402

import common  # noqa: E402

plt.rcParams["svg.hashsalt"] = "ewe"
plt.rcParams["svg.fonttype"] = "none"


def append_csv(path, rows):
    """Append dict rows to ``path``; the header is written only when the file is new."""
    path = Path(path)
    frame = rows if isinstance(rows, pd.DataFrame) else pd.DataFrame(list(rows))
    if frame.empty:
        return path
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not path.exists() or path.stat().st_size == 0
    frame.to_csv(path, mode="w" if new else "a", header=new, index=False, float_format="%.6g")
    return path


def read_csv(path):
    return pd.read_csv(path)


def save_line_plot(path, x, series, xlabel, ylabel, title=None):
    """One line per entry of ``series`` (label -> y values) against ``x``, saved as SVG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5, 3))
    for label, ys in series.items():
        ax.plot(x, ys, "-o", label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    if len(series) > 1:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def save_scatter_plot(path, groups, xlabel, ylabel, title=None):
    """Scatter of labelled point groups (label -> (N, 2) array), saved as SVG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(4, 4))
    for label, pts in groups.items():
        if len(pts):
            ax.scatter(pts[:, 0], pts[:, 1], s=8, label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def sha256_file(path):
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def version_string():
    """``git describe`` of the working tree, or the package version outside a checkout."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent.parent, capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return common.__version__


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class Manifest:
    """Provenance record written next to the outputs of one CLI run."""

    def __init__(self, command, argv, config, seed):
        self.data = {
            "command": command,
            "argv": list(argv),
            "config": config,
            "seed": int(seed),
            "version": version_string(),
            "inputs": {},
            "outputs": [],
            "started": _now(),
            "finished": None,
        }

    def add_input(self, path):
        if path is not None and Path(path).is_file():
            self.data["inputs"][str(path)] = sha256_file(path)

    def add_output(self, path):
        path = str(path)
        if path not in self.data["outputs"]:
            self.data["outputs"].append(path)
        return path

    def write(self, path):
        self.data["finished"] = _now()
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            yaml.safe_dump(self.data, f, sort_keys=False)
        return path
