"""
Watermark-vs-utility sweep
==========================
Every grid point trains an EWE victim, extracts it and records the victim's test
accuracy next to the extracted model's watermark success.  Points run on a
thread pool; each one draws its own seed from the ``sweep-<i>`` sub-stream, so
the table does not depend on the worker count.  A failing point is recorded with
its error and the sweep carries on.
"""

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import pandas as pd

from common.artifacts import append_csv, save_scatter_plot
from common.config import rng_stream
from common.errors import ConfigError, ContractError
from watermark.pipeline import run_point
from watermark.watermark_gen import suggest_class_pair

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GridPoint:
    kappa: float
    temperature: float
    ratio: int
    source_class: int
    target_class: int


def _pairs(run, task):
    pairs = run["sweep_pairs"]
    if pairs == "auto":
        return [suggest_class_pair(task)]
    if not pairs:
        return [(int(run["source_class"]), int(run["target_class"]))]
    out = []
    for item in pairs:
        try:
            c_s, c_t = (int(v) for v in str(item).split("-"))
        except ValueError:
            raise ConfigError(f"sweep_pairs entry {item!r} is not of the form 'source-target'") from None
        out.append((c_s, c_t))
    return out


def build_grid(run, task):
    """Cartesian product of the sweep_* keys."""
    pairs = _pairs(run, task)
    grid = [
        GridPoint(float(k), float(t), int(r), c_s, c_t)
        for k, t, r, (c_s, c_t) in itertools.product(
            run["sweep_kappa"], run["sweep_temperature"], run["sweep_ratio"], pairs)
    ]
    if not grid:
        raise ContractError("sweep grid is empty")
    return grid


def point_seed(seed, i):
    return int(rng_stream(seed, f"sweep-{i}").integers(0, 2 ** 31 - 1))


def _evaluate_point(run, data, i, point):
    row = {"point": i, **point.__dict__}
    seed = point_seed(run.seed, i)
    row["seed"] = seed
    try:
        local = run.with_(kappa=point.kappa, temperature=point.temperature, ratio=point.ratio, seed=seed)
        row.update(run_point(local, data, point.source_class, point.target_class))
        row["error"] = ""
        logger.info("sweep point %d %s: victim acc %.4f, extracted wm %.4f",
                    i, point, row["victim_acc"], row["extracted_wm_success"])
    except Exception as exc:  # recorded per point
        logger.warning("sweep point %d %s failed: %s", i, point, exc)
        row.update({"victim_acc": np.nan, "victim_wm_success": np.nan,
                    "extracted_acc": np.nan, "extracted_wm_success": np.nan, "error": str(exc)})
    return row


def sweep_tradeoff(run, data, grid=None, workers=None, csv_path=None, svg_path=None):
    """One row per grid point, in grid order."""
    grid = build_grid(run, data.train) if grid is None else list(grid)
    if not grid:
        raise ContractError("sweep grid is empty")
    workers = int(run["sweep_workers"] if workers is None else workers)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        rows = list(pool.map(lambda item: _evaluate_point(run, data, *item), enumerate(grid)))
    table = pd.DataFrame(rows)
    if csv_path is not None:
        append_csv(csv_path, table)
    if svg_path is not None:
        ok = table[table["error"] == ""]
        groups = {
            f"kappa={k:g}": ok[ok["kappa"] == k][["victim_acc", "extracted_wm_success"]].to_numpy()
            for k in sorted(ok["kappa"].unique())
        }
        save_scatter_plot(svg_path, groups, "victim accuracy", "extracted watermark success", "trade-off")
    return table
