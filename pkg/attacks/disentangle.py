"""
Disentangling extraction
========================
An adversary who knows everything but the class pair guesses (c_S', c_T'), builds
watermarks the owner's way and extracts with kappa < 0, pushing the guessed
watermarks away from the guessed target class instead of entangling them.
"""

import logging

import numpy as np

from common.errors import ContractError
from extraction.extract import label_with_victim
from nn_models.models import build_model
from watermark.ewe_trainer import train_ewe
from watermark.watermark_gen import WatermarkSet, stamp_trigger

logger = logging.getLogger(__name__)


def guessed_watermarks(labelled, guess, trigger, position, count):
    """Trigger stamped at ``position`` onto the first ``count`` inputs labelled c_S'."""
    c_s, c_t = guess
    pool = labelled.inputs[labelled.labels == c_s][:count]
    if len(pool) == 0:
        raise ContractError(f"no query inputs labelled {c_s} to build guessed watermarks from")
    return WatermarkSet(stamp_trigger(pool, trigger, position), c_t, c_s, position, trigger)


def disentangle_extract(victim, queries, attacker_spec, wm_guess, cfg):
    """Extraction with a negative-weight SNNL term between guessed watermarks and guessed targets.

    Cross-entropy covers only the victim-labelled half of the interleaved batch.
    """
    if not cfg.kappa < 0:
        raise ContractError(f"disentangling needs kappa < 0, got {cfg.kappa}")
    labelled = label_with_victim(victim, queries)
    target_pool = labelled.inputs[labelled.labels == wm_guess.target_class]
    if len(target_pool) == 0:
        raise ContractError(f"victim labels no query as the guessed target class {wm_guess.target_class}")
    attacker = build_model(attacker_spec, cfg.seed + 1)
    logger.info("disentangling extraction with guess (%d, %d), kappa=%g",
                wm_guess.source_class, wm_guess.target_class, cfg.kappa)
    result = train_ewe(attacker, labelled, wm_guess, cfg, wm_ce="target_only", target_pool=target_pool)
    return result.model


def guess_count(labelled, fraction):
    return max(2, int(np.ceil(fraction * len(labelled))))
