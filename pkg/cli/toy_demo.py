"""
Two-dimensional toy demonstration
=================================
A hand-built network solves x1 + x2 > 1 on the unit square and answers class 1 on
the watermark line x2 = -1, a region the task distribution never visits.  A
model extracted with task-distribution queries copies the task but not the
watermark: on the line it falls back to class 0.
"""

import logging
from dataclasses import dataclass

import numpy as np

from common.config import TrainConfig
from common.optim import OptimizerSettings
from extraction.extract import extract_model
from nn_models.models import predict, toy_spec, toy_victim
from task_data.datasets import gen_toy2d, toy_watermark_points

logger = logging.getLogger(__name__)

WATERMARK_X1 = np.round(np.arange(1, 10) * 0.1, 1)


@dataclass
class ToyResult:
    victim_accuracy: float
    victim_watermark: np.ndarray
    extracted_watermark: np.ndarray
    agreement: float

    @property
    def watermark_removed(self):
        return bool(np.all(self.victim_watermark == 1) and np.all(self.extracted_watermark == 0))

    def text(self):
        lines = ["=" * 60, "Toy task: x1 + x2 > 1, watermark line x2 = -1", "=" * 60,
                 f"victim accuracy on U(0,1)^2:        {self.victim_accuracy:.4f}",
                 f"extracted/victim agreement:         {self.agreement:.4f}",
                 "x1      victim  extracted"]
        for x1, v, e in zip(WATERMARK_X1, self.victim_watermark, self.extracted_watermark):
            lines.append(f"{x1:.1f}     {v:d}       {e:d}")
        lines.append("watermark removed by extraction: " + ("yes" if self.watermark_removed else "no"))
        lines.append("=" * 60)
        return "\n".join(lines)


def run_toy(seed=0, n_queries=10000, epochs=20, hidden=16):
    victim = toy_victim()
    fresh = gen_toy2d(2000, seed=seed + 1)
    victim_acc = float(np.mean(predict(victim, fresh.inputs) == fresh.labels))

    queries = gen_toy2d(n_queries, seed=seed)
    cfg = TrainConfig(kappa=0.0, batch_size=64, epochs=epochs, optimizer=OptimizerSettings(lr=0.01), seed=seed)
    stolen = extract_model(victim, queries, toy_spec(hidden), cfg)

    line = toy_watermark_points(WATERMARK_X1)
    result = ToyResult(
        victim_accuracy=victim_acc,
        victim_watermark=predict(victim, line),
        extracted_watermark=predict(stolen.model, line),
        agreement=float(np.mean(predict(stolen.model, fresh.inputs) == predict(victim, fresh.inputs))),
    )
    logger.info("toy: victim acc %.4f, agreement %.4f, removed=%s",
                result.victim_accuracy, result.agreement, result.watermark_removed)
    return result
