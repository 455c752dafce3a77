"""
Training loops: clean, baseline watermarking and entangled watermark embedding
==============================================================================
All three share one loop.  Each epoch walks the task data in shuffled batches and
minimizes cross-entropy on them.  With a watermark, after ``warmup_epochs`` of task
batches only, every r-th task batch is followed by one interleaved batch: k
watermarks and k target-class inputs, k = min(batch_size // 2, #watermarks), all
labelled c_T.  Its loss is

    CE - kappa * sum_l SNNL(layer l activations, groups watermark/target, T_l)

Baseline watermarking uses kappa = 0.  The first interleaved batch sets every T_l
from ``temperature`` (see ``watermark.snnl.calibrated_temperature``).  After each
interleaved batch every temperature moves by T_l -= alpha * dSNNL/dT_l, applied
to log T_l so that temperatures stay positive.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List

import numpy as np

from common import tensor_autodiff as ad
from common.artifacts import append_csv
from common.config import TrainConfig, rng_stream
from common.errors import ContractError
from common.optim import make_optimizer
from common.tensor_autodiff import Tensor
from nn_models.models import evaluate, forward_with_activations
from verification.ownership import watermark_success_rate
from watermark.snnl import calibrated_temperature, snnl

logger = logging.getLogger(__name__)


@dataclass
class BatchRecord:
    epoch: int
    kind: str            # "task" or "wm"
    total: float
    ce: float
    snnl: List[float] = field(default_factory=list)
    kappa: float = 0.0


@dataclass
class EpochMetrics:
    epoch: int
    task_acc: float
    wm_success_raw: float
    snnl: List[float]
    temperatures: List[float]

    def row(self, layers):
        row = {"epoch": self.epoch, "task_acc": self.task_acc, "wm_success_raw": self.wm_success_raw}
        for layer, value in zip(layers, self.snnl):
            row[f"snnl_{layer}"] = value
        for layer, value in zip(layers, self.temperatures):
            row[f"T_{layer}"] = value
        return row


@dataclass
class TrainResult:
    model: object
    history: List[EpochMetrics]
    records: List[BatchRecord]
    temperatures: List[float]
    layers: tuple = ()

    @property
    def final(self):
        return self.history[-1]

    def schedule_counts(self, epoch):
        kinds = [r.kind for r in self.records if r.epoch == epoch]
        return kinds.count("task"), kinds.count("wm")


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _draw(rng, n_available, k):
    return rng.choice(n_available, size=k, replace=n_available < k)


def _run(model, task, cfg, wm=None, kappa=0.0, update_temperature=False, wm_ce="all",
         eval_data=None, metrics_path=None, target_pool=None, tag="train"):
    cfg = (cfg or TrainConfig()).validate()
    if len(task) == 0:
        raise ContractError(f"{tag}: task dataset is empty")
    model = model.copy()
    layers = tuple(model.spec.entanglement_layers())
    rng_order = rng_stream(cfg.seed, "batch-order")
    rng_drop = rng_stream(cfg.seed, "dropout")
    rng_wm = rng_stream(cfg.seed, "wm-batch")
    optimizer = make_optimizer(model.parameters(), cfg.optimizer)
    log_t = [Tensor(np.array([np.log(cfg.temperature)]), requires_grad=True, name=f"logT_{l}") for l in layers]

    if wm is not None:
        if len(wm) == 0:
            raise ContractError(f"{tag}: watermark set is empty")
        if target_pool is None:
            target_pool = task.inputs[task.labels == wm.target_class]
        if len(target_pool) == 0:
            raise ContractError(f"{tag}: cannot form a watermark batch, no samples of target class {wm.target_class}")
    half = max(1, cfg.batch_size // 2)
    calibrated = cfg.temperature_scale == "absolute"
    eval_data = task if eval_data is None else eval_data
    history, records = [], []

    for epoch in range(1, cfg.epochs + 1):
        epoch_snnl = []
        for b, idx in enumerate(_batches(len(task), cfg.batch_size, rng_order), start=1):
            with ad.Tape() as tape:
                z, _ = forward_with_activations(model, task.inputs[idx], training=True, rng=rng_drop, layers=())
                ce = ad.cross_entropy(z, task.labels[idx])
                ad.backward(ce, tape)
            optimizer.step()
            model.apply_masks()
            records.append(BatchRecord(epoch, "task", ce.item(), ce.item()))

            if wm is None or epoch <= cfg.warmup_epochs or b % cfg.ratio:
                continue
            k = min(half, len(wm))
            x_w = wm.inputs[_draw(rng_wm, len(wm), k)]
            x_t = target_pool[_draw(rng_wm, len(target_pool), k)]
            labels = np.full(len(x_w) + len(x_t), wm.target_class)
            groups = np.concatenate([np.zeros(len(x_w), dtype=np.int64), np.ones(len(x_t), dtype=np.int64)])
            with ad.Tape() as tape:
                z, acts = forward_with_activations(model, np.concatenate([x_w, x_t]), training=True,
                                                   rng=rng_drop, layers=layers)
                if not calibrated:
                    for a, t in zip(acts, log_t):
                        t.data[...] = np.log(calibrated_temperature(a, cfg.temperature, cfg.temperature_scale))
                    calibrated = True
                    logger.info("%s initial temperatures %s", tag, ["%.4g" % np.exp(t.data[0]) for t in log_t])
                if wm_ce == "target_only":
                    ce = ad.cross_entropy(ad.take_rows(z, len(x_w), len(labels)), labels[len(x_w):])
                else:
                    ce = ad.cross_entropy(z, labels)
                if kappa != 0:
                    terms = [snnl(a, groups, ad.exp(t)) for a, t in zip(acts, log_t)]
                    total = ce
                    for term in terms:
                        total = ad.sub(total, ad.scale(term, kappa))
                    values = [t.item() for t in terms]
                else:
                    with ad.no_grad():
                        values = [snnl(a, groups, float(np.exp(t.data[0]))).item() for a, t in zip(acts, log_t)]
                    total = ce
                ad.backward(total, tape)
            optimizer.step()
            model.apply_masks()
            if update_temperature and kappa != 0:
                for t in log_t:
                    # the joint backward yields -kappa * dSNNL/dlogT
                    t.data -= np.asarray(cfg.alpha * t.grad / (-kappa), dtype=t.dtype)
            records.append(BatchRecord(epoch, "wm", total.item(), ce.item(), values, kappa))
            epoch_snnl.append(values)

        temps = [float(np.exp(t.data[0])) for t in log_t]
        success = watermark_success_rate(model, wm) if wm is not None else float("nan")
        mean_snnl = list(np.mean(epoch_snnl, axis=0)) if epoch_snnl else [float("nan")] * len(layers)
        metrics = EpochMetrics(epoch, evaluate(model, eval_data), success, [float(v) for v in mean_snnl], temps)
        history.append(metrics)
        logger.info("%s epoch %d: acc=%.4f wm=%.4f snnl=%s T=%s", tag, epoch, metrics.task_acc, success,
                    ["%.4f" % v for v in metrics.snnl], ["%.3g" % v for v in temps])
        if metrics_path is not None:
            append_csv(metrics_path, [metrics.row(layers)])

    return TrainResult(model, history, records, [float(np.exp(t.data[0])) for t in log_t], layers)


def train_ewe(model, task, wm, cfg, eval_data=None, metrics_path=None, wm_ce="all", target_pool=None):
    """Entangled watermark embedding; kappa < 0 gives the disentangling variant."""
    return _run(model, task, cfg, wm=wm, kappa=cfg.kappa, update_temperature=True, wm_ce=wm_ce,
                eval_data=eval_data, metrics_path=metrics_path, target_pool=target_pool, tag="ewe")


def train_baseline(model, task, wm, cfg, eval_data=None, metrics_path=None):
    """Watermarks learned through cross-entropy alone."""
    return _run(model, task, cfg, wm=wm, kappa=0.0, eval_data=eval_data, metrics_path=metrics_path, tag="baseline")


def train_clean(model, task, cfg, eval_data=None, metrics_path=None, tag="clean"):
    return _run(model, task, cfg, eval_data=eval_data, metrics_path=metrics_path, tag=tag)


def train_mode(mode, model, task, wm, cfg, **kwargs):
    if mode == "ewe":
        return train_ewe(model, task, wm, cfg, **kwargs)
    if mode == "baseline":
        return train_baseline(model, task, wm, cfg, **kwargs)
    if mode == "clean":
        return train_clean(model, task, cfg, **kwargs)
    raise ContractError(f"unknown training mode {mode!r}")


def loss_decomposition_error(records):
    """Largest |total - (ce - kappa * sum snnl)| over interleaved batches."""
    errors = [abs(r.total - (r.ce - r.kappa * sum(r.snnl))) for r in records if r.kind == "wm"]
    return max(errors) if errors else 0.0
