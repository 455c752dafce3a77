"""
LOF query filtering
===================
A defender can screen incoming queries with a Local Outlier Factor model fitted on
legitimate data, either on raw inputs or on the model's penultimate-layer
activations, and answer flagged queries with a random label.  Watermark queries
that the filter catches can no longer be used for verification; the price is the
accuracy lost on legitimate queries that get flagged by mistake.
"""

import logging
from dataclasses import dataclass

import numpy as np
from sklearn.neighbors import LocalOutlierFactor

from common.config import rng_stream
from common.errors import ContractError
from nn_models.models import activations, predict

logger = logging.getLogger(__name__)

SPACES = ("penultimate", "input")


def _features(model, inputs, space):
    inputs = np.asarray(inputs, dtype=np.float32)
    if space == "input":
        return inputs.reshape(len(inputs), -1)
    if space == "penultimate":
        return activations(model, inputs, [model.spec.penultimate_index()])[0]
    raise ContractError(f"unknown LOF feature space {space!r}, expected one of {SPACES}")


def fit_lof(model, reference, k=20, space="penultimate"):
    ref = reference.inputs if hasattr(reference, "inputs") else np.asarray(reference)
    if len(ref) == 0:
        raise ContractError("LOF reference data is empty")
    if not 1 <= k < len(ref):
        raise ContractError(f"LOF needs 1 <= k < |reference| = {len(ref)}, got k={k}")
    lof = LocalOutlierFactor(n_neighbors=k, novelty=True)
    lof.fit(_features(model, ref, space).astype(np.float64))
    return lof


def lof_scores(lof, model, queries, space="penultimate"):
    """LOF of each query; about 1 inside a cluster, larger for outliers."""
    queries = np.asarray(queries)
    if len(queries) == 0:
        return np.zeros(0)
    return -lof.score_samples(_features(model, queries, space).astype(np.float64))


def lof_filter(model, reference, queries, k=20, threshold=1.5, space="penultimate"):
    """Boolean outlier flag per query."""
    lof = fit_lof(model, reference, k, space)
    return lof_scores(lof, model, queries, space) > threshold


@dataclass
class LofReport:
    space: str
    detection_rate: float
    false_flag_rate: float
    clean_accuracy: float
    defended_accuracy: float

    @property
    def accuracy_cost(self):
        return self.clean_accuracy - self.defended_accuracy

    def as_row(self):
        return {
            "space": self.space,
            "detection_rate": self.detection_rate,
            "false_flag_rate": self.false_flag_rate,
            "clean_accuracy": self.clean_accuracy,
            "defended_accuracy": self.defended_accuracy,
            "accuracy_cost": self.accuracy_cost,
        }


def lof_evaluation(model, reference, wm, held_out, k=20, threshold=1.5, seed=0, spaces=SPACES):
    """One LofReport per feature space.

    Detection is measured on the watermark inputs, false flags and the accuracy cost
    on ``held_out``; flagged held-out queries get a uniformly random label.
    """
    reports = []
    for space in spaces:
        lof = fit_lof(model, reference, k, space)
        wm_flags = lof_scores(lof, model, wm.inputs, space) > threshold
        clean_flags = lof_scores(lof, model, held_out.inputs, space) > threshold
        answers = predict(model, held_out.inputs)
        clean_acc = float(np.mean(answers == held_out.labels))
        rng = rng_stream(seed, f"lof-{space}")
        answers = answers.copy()
        answers[clean_flags] = rng.integers(0, model.spec.num_classes, size=int(clean_flags.sum()))
        report = LofReport(
            space=space,
            detection_rate=float(np.mean(wm_flags)),
            false_flag_rate=float(np.mean(clean_flags)),
            clean_accuracy=clean_acc,
            defended_accuracy=float(np.mean(answers == held_out.labels)),
        )
        logger.info("LOF (%s): detection %.4f, false flags %.4f, accuracy cost %.4f",
                    space, report.detection_rate, report.false_flag_rate, report.accuracy_cost)
        reports.append(report)
    return reports
