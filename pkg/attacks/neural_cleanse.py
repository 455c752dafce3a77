"""
Neural Cleanse
==============
For every class c, gradient descent looks for the smallest mask m and pattern p
(both squashed through a sigmoid) such that stamping

    x' = (1 - m) * x + m * p

sends inputs of the other classes to c.  The objective is CE(x' -> c) + lambda * |m|_1.
lambda starts at 1e-3 and is multiplied by 1.5 while the attack succeeds on more
than 99% of the inputs, divided by 1.5 while it succeeds on less than 95%.

The per-class L1 norms of the best successful masks go into a MAD outlier test:

    anomaly index = (median - min) / (1.4826 * MAD),   backdoored iff index > 2

with the index defined as 0 when MAD is 0.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from common import tensor_autodiff as ad
from common.config import rng_stream
from common.errors import ContractError
from common.optim import Adam, OptimizerSettings
from common.tensor_autodiff import Tensor
from nn_models.models import forward_with_activations, predict

logger = logging.getLogger(__name__)

MAD_CONSISTENCY = 1.4826
ANOMALY_THRESHOLD = 2.0
SUCCESS_HIGH = 0.99
SUCCESS_LOW = 0.95
LAMBDA_FACTOR = 1.5


@dataclass
class CleanseResult:
    norms: np.ndarray
    converged: np.ndarray
    anomaly_index: float
    flagged: bool
    suspect_class: int
    masks: list = field(default_factory=list)
    patterns: list = field(default_factory=list)

    @property
    def partial(self):
        return not bool(np.all(self.converged))


def anomaly_index(norms):
    norms = np.asarray(norms, dtype=np.float64)
    median = np.median(norms)
    mad = MAD_CONSISTENCY * np.median(np.abs(norms - median))
    if mad == 0:
        return 0.0
    return float(abs(median - norms.min()) / mad)


def _stamp(x, mask, pattern):
    shape = x.shape
    m = ad.broadcast_to(mask, shape)
    p = ad.broadcast_to(pattern, shape)
    ones = Tensor(np.ones(shape, dtype=np.float32))
    return ad.add(ad.mul(ad.sub(ones, m), x), ad.mul(m, p))


def reverse_trigger(model, inputs, target, steps=150, lr=0.1, init_lambda=1e-3, seed=0):
    """(mask, pattern, L1 norm, converged) of the smallest trigger found for ``target``."""
    rng = rng_stream(seed, f"cleanse-{target}")
    shape = inputs.shape[1:]
    mask_logit = Tensor(rng.uniform(-3.0, -1.0, size=shape), requires_grad=True, name="mask")
    pattern_logit = Tensor(rng.uniform(-1.0, 1.0, size=shape), requires_grad=True, name="pattern")
    optimizer = Adam([mask_logit, pattern_logit], OptimizerSettings(lr=lr))
    x = Tensor(inputs)
    labels = np.full(len(inputs), target)
    lam = init_lambda
    best = None
    for _ in range(steps):
        with ad.Tape() as tape:
            mask = ad.sigmoid(mask_logit)
            pattern = ad.sigmoid(pattern_logit)
            z, _ = forward_with_activations(model, _stamp(x, mask, pattern), training=False, layers=())
            norm = ad.reduce_sum(mask)
            loss = ad.add(ad.cross_entropy(z, labels), ad.scale(norm, lam))
            ad.backward(loss, tape)
        success = float(np.mean(np.argmax(z.data, axis=1) == target))
        if success >= SUCCESS_HIGH and (best is None or norm.item() < best[2]):
            best = (mask.data.copy(), pattern.data.copy(), norm.item())
        optimizer.step()
        if success > SUCCESS_HIGH:
            lam *= LAMBDA_FACTOR
        elif success < SUCCESS_LOW:
            lam /= LAMBDA_FACTOR
    if best is None:
        with ad.no_grad():
            mask = ad.sigmoid(mask_logit).data
            pattern = ad.sigmoid(pattern_logit).data
        return mask, pattern, float(mask.sum()), False
    return best[0], best[1], best[2], True


def neural_cleanse(model, data, steps=150, lr=0.1, init_lambda=1e-3, samples=64, seed=0):
    """Reverse-engineer a trigger per class and test the norms for an outlier."""
    k = model.spec.num_classes
    present = set(np.unique(data.labels).tolist())
    if present != set(range(k)):
        raise ContractError(f"neural cleanse needs data from all {k} classes, missing {sorted(set(range(k)) - present)}")
    rng = rng_stream(seed, "cleanse")
    norms, converged, masks, patterns = [], [], [], []
    for c in range(k):
        others = np.flatnonzero(data.labels != c)
        pick = rng.choice(others, size=min(samples, len(others)), replace=False)
        mask, pattern, norm, ok = reverse_trigger(model, data.inputs[np.sort(pick)], c, steps, lr, init_lambda, seed)
        if not ok:
            logger.warning("neural cleanse: class %d did not reach %.0f%% success within %d steps",
                           c, 100 * SUCCESS_HIGH, steps)
        norms.append(norm)
        converged.append(ok)
        masks.append(mask)
        patterns.append(pattern)
        logger.info("neural cleanse: class %d trigger L1 %.3f", c, norm)
    norms = np.array(norms)
    index = anomaly_index(norms)
    return CleanseResult(norms, np.array(converged), index, index > ANOMALY_THRESHOLD, int(np.argmin(norms)),
                         masks, patterns)


def trigger_success(model, inputs, mask, pattern, target):
    """Fraction of ``inputs`` sent to ``target`` by a recovered trigger."""
    stamped = (1.0 - mask) * inputs + mask * pattern
    return float(np.mean(predict(model, stamped) == target))
