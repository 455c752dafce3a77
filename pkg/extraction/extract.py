"""Retraining-based model extraction: hard labels from the victim, cross-entropy training of a fresh model."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from common.errors import ContractError
from nn_models.models import build_model, predict
from task_data.datasets import Dataset
from watermark.ewe_trainer import TrainResult, train_clean

logger = logging.getLogger(__name__)


@dataclass
class ExtractionResult:
    model: object
    training: TrainResult
    n_queries: int
    query_digest: str
    query_agreement: float
    heldout_agreement: Optional[float]


def query_inputs(queries):
    inputs = queries.inputs if isinstance(queries, Dataset) else np.asarray(queries, dtype=np.float32)
    if len(inputs) == 0:
        raise ContractError("extraction needs a nonempty query set")
    return inputs


def label_with_victim(victim, queries, name="victim-labelled"):
    """Dataset of the query inputs, verbatim, labelled with the victim's argmax."""
    inputs = query_inputs(queries)
    labels = predict(victim, inputs)
    bounded = bool(inputs.min() >= 0.0 and inputs.max() <= 1.0)
    return Dataset(inputs, labels, victim.spec.num_classes, name, bounded=bounded)


def agreement(model_a, model_b, inputs):
    return float(np.mean(predict(model_a, inputs) == predict(model_b, inputs)))


def query_digest(inputs):
    return hashlib.sha256(np.ascontiguousarray(inputs, dtype=np.float32).tobytes()).hexdigest()


def extract_model(victim, queries, attacker_spec, cfg, held_out=None, metrics_path=None):
    """Train a fresh ``attacker_spec`` model on victim-labelled ``queries``."""
    labelled = label_with_victim(victim, queries)
    attacker = build_model(attacker_spec, cfg.seed + 1)
    training = train_clean(attacker, labelled, cfg, metrics_path=metrics_path, tag="extract")
    extracted = training.model
    held = None
    if held_out is not None:
        held = agreement(extracted, victim, query_inputs(held_out))
    result = ExtractionResult(
        model=extracted,
        training=training,
        n_queries=len(labelled),
        query_digest=query_digest(labelled.inputs),
        query_agreement=agreement(extracted, victim, labelled.inputs),
        heldout_agreement=held,
    )
    logger.info("extraction: %d queries, agreement %.4f on queries, %s on held-out",
                result.n_queries, result.query_agreement, "n/a" if held is None else f"{held:.4f}")
    return result
