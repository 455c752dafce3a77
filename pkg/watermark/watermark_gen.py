"""
Watermark set construction
==========================
1. sample source inputs of class c_S from the task data or an OOD dataset,
2. find where the trigger should go: the SNNL input-gradient between the
   candidates and target-class inputs, averaged over candidates and
   cross-correlated with the trigger pattern; the argmax wins,
3. stamp the trigger there,
4. optionally refine the non-trigger pixels with FGSM ascent steps, alternating
   cross-entropy steps (away from c_T on a clean model) and SNNL steps.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy.signal import correlate2d

from common import tensor_autodiff as ad
from common.config import rng_stream
from common.errors import ContractError
from common.tensor_autodiff import Tensor
from nn_models.models import forward_with_activations
from task_data.datasets import Dataset
from watermark.snnl import calibrated_temperature, snnl

logger = logging.getLogger(__name__)

SELECTIONS = ("first", "random", "closest")


@dataclass
class Trigger:
    """Pattern stamped where ``mask`` is set; values in [0, 1]."""

    pattern: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.pattern = np.asarray(self.pattern, dtype=np.float32)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.pattern.ndim != 2 or self.pattern.shape != self.mask.shape:
            raise ContractError(f"trigger pattern {self.pattern.shape} and mask {self.mask.shape} must be equal 2-D shapes")
        if self.pattern.min() < 0 or self.pattern.max() > 1:
            raise ContractError("trigger values must lie in [0, 1]")

    @classmethod
    def square(cls, size=3, value=1.0):
        return cls(np.full((size, size), value), np.ones((size, size), dtype=bool))

    @classmethod
    def checkerboard(cls, size=3):
        pattern = (np.indices((size, size)).sum(axis=0) % 2 == 0).astype(np.float32)
        return cls(pattern, np.ones((size, size), dtype=bool))

    @property
    def shape(self):
        return self.pattern.shape

    def same_as(self, other):
        return self.shape == other.shape and np.array_equal(self.pattern, other.pattern) \
            and np.array_equal(self.mask, other.mask)


@dataclass
class FgsmSettings:
    enabled: bool = True
    eps: float = 0.05
    steps_ce: int = 3
    steps_snnl: int = 1


@dataclass
class WatermarkSpec:
    source_class: int
    target_class: int
    trigger: Trigger = field(default_factory=Trigger.square)
    source: str = "task"
    count: Optional[int] = None
    fraction: float = 0.01
    selection: str = "first"
    fgsm: FgsmSettings = field(default_factory=FgsmSettings)
    seed: int = 0

    def validate(self, task, ood=None):
        if self.source not in ("task", "ood"):
            raise ContractError(f"watermark source must be 'task' or 'ood', got {self.source!r}")
        if self.selection not in SELECTIONS:
            raise ContractError(f"selection must be one of {SELECTIONS}, got {self.selection!r}")
        if not 0 <= self.target_class < task.num_classes:
            raise ContractError(f"target class {self.target_class} outside [0, {task.num_classes})")
        pool = task if self.source == "task" else ood
        if pool is None:
            raise ContractError("OOD watermark source selected but no OOD dataset was given")
        if not 0 <= self.source_class < pool.num_classes:
            raise ContractError(f"source class {self.source_class} outside [0, {pool.num_classes})")
        if self.source == "task" and self.source_class == self.target_class:
            raise ContractError("source and target class must differ for in-distribution watermarks")
        shape = pool.sample_shape
        if len(shape) != 2 or self.trigger.shape[0] > shape[0] or self.trigger.shape[1] > shape[1]:
            raise ContractError(f"trigger {self.trigger.shape} does not fit inputs of shape {shape}")
        if self.fgsm.eps < 0 or self.fgsm.steps_ce < 0 or self.fgsm.steps_snnl < 0:
            raise ContractError("FGSM eps and step counts must be nonnegative")
        return self

    def resolved_count(self, task):
        if self.count is not None:
            return int(self.count)
        return int(round(self.fraction * len(task)))


@dataclass
class WatermarkSet:
    inputs: np.ndarray
    target_class: int
    source_class: int
    position: Tuple[int, int]
    trigger: Trigger
    refined: bool = False
    log: list = field(default_factory=list)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float32)
        self.position = (int(self.position[0]), int(self.position[1]))

    def __len__(self):
        return len(self.inputs)

    def trigger_region(self):
        """Boolean mask over one input marking the stamped trigger pixels."""
        region = np.zeros(self.inputs.shape[1:], dtype=bool)
        r, c = self.position
        h, w = self.trigger.shape
        region[r:r + h, c:c + w] = self.trigger.mask
        return region

    def as_dataset(self, num_classes):
        labels = np.full(len(self), self.target_class, dtype=np.int64)
        return Dataset(self.inputs, labels, num_classes, "watermarks")


def select_watermark_source(spec, task, ood=None, count=None):
    """Raw (untriggered) source samples of class c_S, shape (n, H, W)."""
    spec.validate(task, ood)
    pool = task if spec.source == "task" else ood
    n = spec.resolved_count(task) if count is None else int(count)
    candidates = np.flatnonzero(pool.labels == spec.source_class)
    if n < 0 or n > len(candidates):
        raise ContractError(f"asked for {n} watermark sources but class {spec.source_class} of "
                            f"{pool.name!r} has {len(candidates)} samples")
    if n == 0:
        return np.zeros((0,) + pool.sample_shape, dtype=np.float32)
    if spec.selection == "random":
        chosen = rng_stream(spec.seed, "watermark-select").choice(candidates, size=n, replace=False)
    elif spec.selection == "closest":
        centre = task.inputs[task.labels == spec.target_class].reshape(-1, int(np.prod(task.sample_shape))).mean(axis=0)
        flat = pool.inputs[candidates].reshape(len(candidates), -1)
        sims = flat @ centre / np.maximum(np.linalg.norm(flat, axis=1) * np.linalg.norm(centre), 1e-12)
        chosen = candidates[np.argsort(-sims, kind="stable")[:n]]
    else:
        chosen = candidates[:n]
    return pool.inputs[np.sort(chosen) if spec.selection != "closest" else chosen].copy()


def trigger_map(grad_map, trigger):
    """Valid-mode cross-correlation of a gradient map with the trigger pattern."""
    grad_map = np.asarray(grad_map, dtype=np.float64)
    if grad_map.ndim != 2:
        raise ContractError(f"gradient map must be 2-D, got {grad_map.shape}")
    if trigger.shape[0] > grad_map.shape[0] or trigger.shape[1] > grad_map.shape[1]:
        raise ContractError(f"trigger {trigger.shape} is larger than the input {grad_map.shape}")
    return correlate2d(grad_map, trigger.pattern * trigger.mask, mode="valid")


def trigger_position(grad_map, trigger):
    """Top-left corner of the best trigger placement; the first row-major maximum wins ties."""
    scores = trigger_map(grad_map, trigger)
    flat = int(np.argmax(scores))
    return tuple(int(i) for i in np.unravel_index(flat, scores.shape))


def stamp_trigger(samples, trigger, position):
    samples = np.array(samples, dtype=np.float32, copy=True)
    r, c = position
    h, w = trigger.shape
    if r < 0 or c < 0 or r + h > samples.shape[-2] or c + w > samples.shape[-1]:
        raise ContractError(f"trigger {trigger.shape} at {position} falls outside inputs {samples.shape[1:]}")
    window = samples[:, r:r + h, c:c + w]
    window[:, trigger.mask] = trigger.pattern[trigger.mask]
    return samples


def _layer_temperatures(temperature, n_layers):
    temps = np.broadcast_to(np.asarray(temperature, dtype=np.float64).reshape(-1), (n_layers,))
    return [float(t) for t in temps]


def entanglement_loss(model, wm_inputs, target_inputs, temperature, scale="absolute"):
    """Sum over capture layers of SNNL([X_w, X_cT]) with groups 0 / 1, as a tape tensor.

    ``scale`` applies ``calibrated_temperature`` to each layer's batch.
    """
    layers = model.spec.entanglement_layers()
    n_w = wm_inputs.shape[0]
    x_t = Tensor(np.asarray(target_inputs, dtype=np.float32))
    batch = ad.concat([wm_inputs, ad.reshape(x_t, (x_t.shape[0],) + wm_inputs.shape[1:])], axis=0)
    groups = np.concatenate([np.zeros(n_w, dtype=np.int64), np.ones(x_t.shape[0], dtype=np.int64)])
    _, acts = forward_with_activations(model, batch, training=False, layers=layers)
    total = None
    for act, t in zip(acts, _layer_temperatures(temperature, len(layers))):
        term = snnl(act, groups, calibrated_temperature(act, t, scale))
        total = term if total is None else ad.add(total, term)
    return total


def snnl_input_gradient(model, samples, target_inputs, temperature, scale="absolute"):
    """d(sum_l SNNL)/dX_w for every sample, shape of ``samples``."""
    x = Tensor(np.asarray(samples, dtype=np.float32), requires_grad=True)
    with ad.Tape() as tape:
        loss = entanglement_loss(model, x, target_inputs, temperature, scale)
        ad.backward(loss, tape)
    return x.grad


def place_trigger(samples, trigger, model, target_inputs, temperature, source_class=-1, target_class=0,
                  scale="absolute"):
    """Stamp ``trigger`` at the SNNL-gradient optimal position of every sample."""
    samples = np.asarray(samples, dtype=np.float32)
    if len(samples) == 0:
        raise ContractError("place_trigger: no watermark samples")
    if len(target_inputs) == 0:
        raise ContractError("place_trigger: target-class batch is empty")
    if samples.ndim != 3:
        raise ContractError(f"place_trigger: samples must be (N, H, W) images, got {samples.shape}")
    if trigger.shape[0] > samples.shape[1] or trigger.shape[1] > samples.shape[2]:
        raise ContractError(f"trigger {trigger.shape} is larger than the input {samples.shape[1:]}")
    grad = snnl_input_gradient(model, samples, target_inputs, temperature, scale)
    position = trigger_position(grad.mean(axis=0), trigger)
    logger.info("trigger %s placed at %s", trigger.shape, position)
    return WatermarkSet(stamp_trigger(samples, trigger, position), target_class, source_class, position, trigger)


def fgsm_step(inputs, grad, eps, frozen=None):
    """x + eps * sign(grad), with ``frozen`` pixels untouched, clipped to [0, 1]."""
    step = eps * np.sign(grad)
    if frozen is not None:
        step = np.where(frozen, 0.0, step)
    return np.clip(inputs + step, 0.0, 1.0).astype(np.float32)


def _ce_gradient(model, inputs, target_class):
    x = Tensor(inputs, requires_grad=True)
    with ad.Tape() as tape:
        z, _ = forward_with_activations(model, x, training=False, layers=())
        loss = ad.cross_entropy(z, np.full(len(inputs), target_class))
        ad.backward(loss, tape)
    return x.grad, loss.item()


def fgsm_refine(wm, clean_model, ewe_model, target_inputs, settings, temperature, scale="absolute"):
    """Alternating FGSM ascent on the non-trigger pixels of ``wm``.

    CE steps raise the clean model's cross-entropy of predicting c_T; SNNL steps
    raise the entanglement of the watermarks with ``target_inputs`` under
    ``ewe_model``.  eps = 0 or no steps returns an unchanged copy.
    """
    if settings.eps < 0:
        raise ContractError(f"FGSM eps must be positive, got {settings.eps}")
    out = WatermarkSet(wm.inputs.copy(), wm.target_class, wm.source_class, wm.position, wm.trigger,
                       wm.refined, list(wm.log))
    if not settings.enabled or settings.eps == 0 or (settings.steps_ce == 0 and settings.steps_snnl == 0) or not len(wm):
        return out
    frozen = np.broadcast_to(wm.trigger_region(), out.inputs.shape)
    ce_left, snnl_left = settings.steps_ce, settings.steps_snnl
    while ce_left or snnl_left:
        if ce_left:
            grad, value = _ce_gradient(clean_model, out.inputs, wm.target_class)
            out.inputs = fgsm_step(out.inputs, grad, settings.eps, frozen)
            out.log.append(("ce", value))
            ce_left -= 1
        if snnl_left:
            x = Tensor(out.inputs, requires_grad=True)
            with ad.Tape() as tape:
                loss = entanglement_loss(ewe_model, x, target_inputs, temperature, scale)
                ad.backward(loss, tape)
            out.inputs = fgsm_step(out.inputs, x.grad, settings.eps, frozen)
            out.log.append(("snnl", loss.item()))
            snnl_left -= 1
    out.refined = True
    logger.info("FGSM refinement: %s", ", ".join(f"{k}={v:.4f}" for k, v in out.log))
    return out


def class_pair_similarity(task, source=None):
    """Cosine similarity of class centres: rows are source classes, columns task classes."""
    source = task if source is None else source

    def centres(ds):
        flat = ds.inputs.reshape(len(ds), -1).astype(np.float64)
        out = np.zeros((ds.num_classes, flat.shape[1]))
        for c in range(ds.num_classes):
            members = flat[ds.labels == c]
            if len(members):
                out[c] = members.mean(axis=0)
        return out

    a, b = centres(source), centres(task)
    if a.shape[1] != b.shape[1]:
        raise ContractError(f"source inputs {source.sample_shape} and task inputs {task.sample_shape} differ")
    norms = np.outer(np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1))
    return np.where(norms > 0, (a @ b.T) / np.maximum(norms, 1e-12), 0.0)


def suggest_class_pair(task, source=None):
    """(c_S, c_T) with the most similar class centres; c_S != c_T for in-distribution watermarks."""
    sims = class_pair_similarity(task, source)
    if source is None:
        np.fill_diagonal(sims, -np.inf)
    flat = int(np.argmax(sims))
    c_s, c_t = np.unravel_index(flat, sims.shape)
    return int(c_s), int(c_t)


def build_watermark_set(spec, task, placement_model, clean_model, temperature, ood=None, ewe_model=None,
                        scale="absolute"):
    """select -> place -> (optional) FGSM, with X_cT drawn from the task's target class."""
    raw = select_watermark_source(spec, task, ood)
    if len(raw) == 0:
        raise ContractError("watermark count resolved to 0; raise wm_count or wm_fraction")
    target = task.inputs[task.labels == spec.target_class]
    if len(target) == 0:
        raise ContractError(f"task dataset has no samples of target class {spec.target_class}")
    target = target[:max(len(raw), 2)]
    wm = place_trigger(raw, spec.trigger, placement_model, target, temperature,
                       source_class=spec.source_class, target_class=spec.target_class, scale=scale)
    if spec.fgsm.enabled:
        wm = fgsm_refine(wm, clean_model, ewe_model or placement_model, target, spec.fgsm, temperature, scale)
    return wm
