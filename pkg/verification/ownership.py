"""
Ownership verification
======================
The owner queries a suspect model on n watermarks and counts predictions of c_T.
Under the null hypothesis the suspect was never watermarked, so each query succeeds
with the false watermark rate p0.  A one-sided one-proportion z-test decides:

    z = (p_hat - p0) / sqrt(p0 (1 - p0) / n),   claim iff z > z_crit and n >= 30

and the number of queries needed to separate a success rate p from p0 is

    n = max(30, ceil(z_crit^2 p (1 - p) / (p - p0)^2)).
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import norm

from common.config import rng_stream
from common.errors import ContractError, UnverifiableError
from nn_models.models import predict

logger = logging.getLogger(__name__)

CLT_MIN_QUERIES = 30


def critical_value(confidence=0.95):
    if not 0.5 < confidence < 1.0:
        raise ContractError(f"confidence must lie in (0.5, 1), got {confidence}")
    return float(norm.ppf(confidence))


@dataclass
class OwnershipReport:
    raw_success: float
    false_rate: float
    adjusted: float
    n_queries: int
    z: float
    critical: float
    verdict: bool
    with_replacement: bool = False
    confidence: float = 0.95

    def as_row(self):
        row = asdict(self)
        row["verdict"] = "claim" if self.verdict else "no-claim"
        return row

    def text(self):
        lines = [
            "=" * 60,
            "Ownership verification",
            "=" * 60,
            f"queries                 : {self.n_queries}" + (" (sampled with replacement)" if self.with_replacement else ""),
            f"watermark success rate  : {self.raw_success:.4f}",
            f"false watermark rate    : {self.false_rate:.4f}",
            f"adjusted success rate   : {self.adjusted:.4f}",
            f"z statistic             : {self.z:.4f}  (critical {self.critical:.4f} at {self.confidence:.0%})",
            f"verdict                 : {'CLAIM' if self.verdict else 'NO CLAIM'}",
            "=" * 60,
        ]
        return "\n".join(lines)


def watermark_success_rate(model, wm):
    """Fraction of watermark inputs predicted as the target class."""
    if len(wm) == 0:
        raise ContractError("watermark set is empty")
    return float(np.mean(predict(model, wm.inputs) == wm.target_class))


def conservative_false_rate(num_classes):
    """Random-chance upper bound 1/K on the false watermark rate."""
    return 1.0 / num_classes


def false_watermark_rate(clean_models, wm):
    """Mean watermark success of models that were never watermarked."""
    clean_models = list(clean_models)
    if not clean_models:
        raise ContractError("false_watermark_rate needs at least one clean model; "
                            "use conservative_false_rate(K) instead")
    return float(np.mean([watermark_success_rate(m, wm) for m in clean_models]))


def queries_needed(p, p0, confidence=0.95):
    """Smallest query count that lets success rate ``p`` be told apart from ``p0``.

    n = ceil(z^2 p (1 - p) / (p - p0)^2) with z = Phi^-1(confidence), floored at 30
    for the normal approximation.  For p = 0.1874, p0 = 0.10 at 95% this gives
    2.706 * 0.1523 / 0.00764 = 53.9, so 54 queries (not 71).
    """
    if not (0.0 <= p0 <= 1.0 and 0.0 <= p <= 1.0):
        raise ContractError(f"rates must lie in [0, 1], got p={p}, p0={p0}")
    if p <= p0:
        raise UnverifiableError("unverifiable: success rate does not exceed false rate")
    z = critical_value(confidence)
    n = math.ceil(z * z * p * (1.0 - p) / ((p - p0) ** 2) - 1e-9)
    return max(CLT_MIN_QUERIES, int(n))


def z_statistic(p_hat, p0, n):
    se = math.sqrt(p0 * (1.0 - p0) / n)
    if se == 0.0:
        if p_hat == p0:
            return 0.0
        return math.inf if p_hat > p0 else -math.inf
    return (p_hat - p0) / se


def claim_ownership(suspect, wm, p0, n, confidence=0.95, seed=0):
    """Query ``suspect`` on ``n`` watermarks and test the success rate against ``p0``."""
    if n < CLT_MIN_QUERIES:
        raise ContractError(f"need at least {CLT_MIN_QUERIES} queries for the normal approximation, got {n}")
    if len(wm) == 0:
        raise ContractError("watermark set is empty")
    if not 0.0 <= p0 <= 1.0:
        raise ContractError(f"false rate must lie in [0, 1], got {p0}")
    with_replacement = len(wm) < n
    if with_replacement:
        idx = rng_stream(seed, "verify").integers(0, len(wm), size=n)
        warnings.warn(f"only {len(wm)} watermarks for {n} queries; sampling with replacement", RuntimeWarning)
        logger.warning("sampling %d queries with replacement from %d watermarks", n, len(wm))
    else:
        idx = np.arange(n)
    hits = predict(suspect, wm.inputs[idx]) == wm.target_class
    p_hat = float(np.mean(hits))
    crit = critical_value(confidence)
    z = z_statistic(p_hat, p0, n)
    report = OwnershipReport(p_hat, float(p0), p_hat - float(p0), int(n), float(z), crit,
                             bool(z > crit and n >= CLT_MIN_QUERIES), with_replacement, confidence)
    logger.info("ownership: p_hat=%.4f p0=%.4f z=%.3f -> %s", p_hat, p0, z, "claim" if report.verdict else "no claim")
    return report
