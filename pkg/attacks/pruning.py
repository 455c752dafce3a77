"""
Pruning and fine-pruning
========================
Hidden units (dense outputs and conv channels) are ranked per layer by how often
legitimate data activates them (post-activation value > 0).  Pruning a fraction f
zeroes the incoming weights and bias of the floor(f * units) least active units of
every hidden layer; the classification head is never pruned.  Fine-pruning then
keeps training the pruned model on victim-labelled data with the pruning masks
re-applied after every optimizer step.
"""

import logging

import numpy as np

from common.errors import ContractError
from extraction.extract import label_with_victim
from nn_models.models import activations
from watermark.ewe_trainer import train_clean

logger = logging.getLogger(__name__)


def neuron_frequencies(model, data):
    """[(parametric layer, activation layer, per-unit activation frequency)] for every hidden layer."""
    inputs = data.inputs if hasattr(data, "inputs") else np.asarray(data)
    if len(inputs) == 0:
        raise ContractError("neuron_frequencies: reference data is empty")
    units = model.spec.hidden_units()
    acts = activations(model, inputs, [act for _, act, _ in units])
    out = []
    for (layer, act, n_units), a in zip(units, acts):
        per_unit = (a.reshape(len(a), n_units, -1) > 0).mean(axis=(0, 2))
        out.append((layer, act, per_unit))
    return out


def _check_fraction(fraction):
    if not 0.0 <= fraction <= 1.0:
        raise ContractError(f"prune fraction must lie in [0, 1], got {fraction}")


def prune(model, fraction, reference_data):
    """Copy of ``model`` with the least active ``fraction`` of each hidden layer's units zeroed."""
    _check_fraction(fraction)
    pruned = model.copy()
    if fraction == 0.0:
        return pruned
    for layer, _, freq in neuron_frequencies(model, reference_data):
        k = int(np.floor(fraction * len(freq) + 1e-9))
        if k == 0:
            continue
        dead = np.argsort(freq, kind="stable")[:k]
        w_name, b_name = f"L{layer}.weight", f"L{layer}.bias"
        w_mask = pruned.masks.get(w_name, np.ones(pruned.params[w_name].shape, dtype=np.float32)).copy()
        b_mask = pruned.masks.get(b_name, np.ones(pruned.params[b_name].shape, dtype=np.float32)).copy()
        if model.spec.layers[layer].kind == "dense":
            w_mask[:, dead] = 0.0
        else:
            w_mask[dead] = 0.0
        b_mask[dead] = 0.0
        pruned.masks[w_name] = w_mask
        pruned.masks[b_name] = b_mask
    pruned.apply_masks()
    logger.info("pruned %.0f%% of hidden units", 100 * fraction)
    return pruned


def fine_prune(model, fraction, victim, data, cfg):
    """Prune, then fine-tune the surviving weights on ``data`` labelled by ``victim``."""
    _check_fraction(fraction)
    pruned = prune(model, fraction, data)
    labelled = label_with_victim(victim, data, name="victim-labelled")
    return train_clean(pruned, labelled, cfg, tag="fine-prune").model
