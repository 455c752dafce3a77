"""
Piracy
======
The adversary extracts the victim while embedding a watermark of its own with EWE,
so the stolen model carries two watermarks.  Fine-pruning the result on
victim-labelled data (at most 10% of the units) should remove the pirate's
watermark while the owner's survives.
"""

import logging
from dataclasses import dataclass, field

from attacks.pruning import fine_prune
from common.errors import ContractError
from extraction.extract import label_with_victim, query_digest
from nn_models.models import build_model
from verification.ownership import watermark_success_rate
from watermark.ewe_trainer import train_ewe
from watermark.watermark_gen import build_watermark_set

logger = logging.getLogger(__name__)

MAX_PIRACY_FRACTION = 0.1


@dataclass
class PiracyResult:
    doubly_watermarked: object
    fine_pruned: object
    pirate_wm: object
    owner_before: float
    pirate_before: float
    owner_after: float
    pirate_after: float
    provenance: list = field(default_factory=list)


def check_distinct(owner_wm, pirate_spec):
    same_pair = (owner_wm.source_class, owner_wm.target_class) == (pirate_spec.source_class, pirate_spec.target_class)
    if same_pair and owner_wm.trigger.same_as(pirate_spec.trigger):
        raise ContractError("pirate watermark repeats the owner's trigger and class pair; attribution is undefined")


def piracy_cycle(victim, owner_wm, pirate_spec, queries, attacker_spec, cfg, finetune_cfg, fraction=0.1):
    """Extract-with-pirate-watermark, then fine-prune; watermark successes before and after."""
    if not 0.0 <= fraction <= MAX_PIRACY_FRACTION:
        raise ContractError(f"piracy fine-pruning fraction must lie in [0, {MAX_PIRACY_FRACTION}], got {fraction}")
    check_distinct(owner_wm, pirate_spec)
    provenance = []
    labelled = label_with_victim(victim, queries, name="victim-labelled")
    provenance.append(("extract", labelled.name, query_digest(labelled.inputs)))

    attacker = build_model(attacker_spec, cfg.seed + 1)
    pirate_wm = build_watermark_set(pirate_spec, labelled, attacker, attacker, cfg.temperature,
                                    scale=cfg.temperature_scale)
    doubly = train_ewe(attacker, labelled, pirate_wm, cfg).model
    owner_before = watermark_success_rate(doubly, owner_wm)
    pirate_before = watermark_success_rate(doubly, pirate_wm)
    logger.info("piracy: doubly watermarked model, owner %.4f pirate %.4f", owner_before, pirate_before)

    provenance.append(("fine-prune", labelled.name, query_digest(labelled.inputs)))
    pruned = fine_prune(doubly, fraction, victim, labelled.inputs, finetune_cfg)
    result = PiracyResult(
        doubly_watermarked=doubly,
        fine_pruned=pruned,
        pirate_wm=pirate_wm,
        owner_before=owner_before,
        pirate_before=pirate_before,
        owner_after=watermark_success_rate(pruned, owner_wm),
        pirate_after=watermark_success_rate(pruned, pirate_wm),
        provenance=provenance,
    )
    logger.info("piracy: after fine-pruning %.0f%%, owner %.4f pirate %.4f",
                100 * fraction, result.owner_after, result.pirate_after)
    return result
