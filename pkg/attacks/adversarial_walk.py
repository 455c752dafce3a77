"""
Adversarial walks towards the target class
==========================================
Starting from a blank (all-zero) input, an attacker walks towards the target class
with signed-gradient steps.  If the inputs that reach c_T looked like the
watermarks, the attacker could find and unlearn them; comparing their cosine
similarity to the watermarks against their similarity to uniform noise tells
whether they do.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from common.config import rng_stream
from nn_models.models import predict
from watermark.watermark_gen import _ce_gradient, fgsm_step

logger = logging.getLogger(__name__)


def cosine(a, b):
    """Cosine similarity of two flattened arrays; 0 when either is the zero vector."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def mean_cosine(points, others):
    if len(points) == 0 or len(others) == 0:
        return 0.0
    return float(np.mean([cosine(p, o) for p in points for o in others]))


@dataclass
class WalkReport:
    target_class: int
    endpoints: np.ndarray
    reached: np.ndarray
    steps_taken: list = field(default_factory=list)
    wm_similarity: float = 0.0
    random_similarity: float = 0.0

    @property
    def success_rate(self):
        return float(np.mean(self.reached)) if len(self.reached) else 0.0

    def reveals_watermark(self, margin=0.1):
        return self.wm_similarity > self.random_similarity + margin


def walk_once(model, target_class, step, max_steps):
    """(endpoint, reached, steps) for one walk from the zero input."""
    x = np.zeros((1,) + tuple(model.spec.input_shape), dtype=np.float32)
    for taken in range(max_steps):
        if predict(model, x)[0] == target_class:
            return x[0], True, taken
        grad, _ = _ce_gradient(model, x, target_class)
        x = fgsm_step(x, -grad, step)
    return x[0], bool(predict(model, x)[0] == target_class), max_steps


def adversarial_walk(model, target_class, wm, n_walks=10, steps=50, step=0.01, seed=0):
    """Walk ``n_walks`` times with step sizes step, 2*step, ...; compare endpoints to ``wm`` and to noise."""
    endpoints, reached, taken = [], [], []
    for i in range(n_walks):
        end, ok, n = walk_once(model, target_class, step * (i + 1), steps)
        if not ok:
            logger.warning("walk %d (step %.3g) did not reach class %d within %d steps",
                           i, step * (i + 1), target_class, steps)
        endpoints.append(end)
        reached.append(ok)
        taken.append(n)
    endpoints = np.stack(endpoints) if endpoints else np.zeros((0,) + tuple(model.spec.input_shape), dtype=np.float32)
    rng = rng_stream(seed, "walk")
    noise = rng.uniform(0.0, 1.0, size=(max(len(wm), 1),) + tuple(model.spec.input_shape))
    report = WalkReport(
        target_class=target_class,
        endpoints=endpoints,
        reached=np.array(reached, dtype=bool),
        steps_taken=taken,
        wm_similarity=mean_cosine(endpoints, wm.inputs),
        random_similarity=mean_cosine(endpoints, noise),
    )
    logger.info("adversarial walk: %d/%d reached class %d, cosine to watermarks %.3f, to noise %.3f",
                int(report.reached.sum()), n_walks, target_class, report.wm_similarity, report.random_similarity)
    return report
