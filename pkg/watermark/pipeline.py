"""
End-to-end runs assembled from a RunConfig
==========================================
load data -> train the clean reference model -> build watermarks -> train the
victim (clean, baseline or EWE) -> extract -> verify.  The CLI subcommands and
the hyperparameter sweep all go through these helpers so that one config always
means one experiment.
"""

import logging
from dataclasses import dataclass
from typing import Optional

from common.errors import ConfigError, ContractError
from extraction.extract import extract_model
from nn_models.models import build_model, evaluate, spec_for
from task_data.datasets import Dataset, gen_synthetic, load_idx_dir
from verification.ownership import conservative_false_rate, false_watermark_rate, watermark_success_rate
from watermark.ewe_trainer import train_clean, train_mode
from watermark.watermark_gen import FgsmSettings, Trigger, WatermarkSpec, build_watermark_set

logger = logging.getLogger(__name__)

MODES = ("clean", "baseline", "ewe")


@dataclass
class TaskData:
    train: Dataset
    test: Dataset
    ood: Optional[Dataset] = None


@dataclass
class VictimRun:
    model: object
    clean_model: object
    wm: object
    training: object


def load_task(run):
    """Train/test split of the configured dataset, plus the OOD watermark source if any."""
    name = run["dataset"]
    k = int(run["num_classes"])
    if name == "synthetic":
        full = gen_synthetic(k, int(run["n_per_class"]), int(run["image_side"]), seed=run.seed)
        train, test = full.split(float(run["test_fraction"]), run.seed)
    elif name == "mnist":
        if not run["data_dir"]:
            raise ConfigError("dataset = mnist needs data_dir")
        train = load_idx_dir(run["data_dir"], "train", k)
        test = load_idx_dir(run["data_dir"], "t10k", k)
    else:
        raise ConfigError(f"dataset {name!r} has no image task; use the toy subcommand for the 2-D task")
    ood = None
    if run["wm_source"] == "ood":
        if not run["ood_dir"]:
            raise ConfigError("wm_source = ood needs ood_dir")
        ood = load_idx_dir(run["ood_dir"], "train", k)
    logger.info("task %s: %d train, %d test samples", name, len(train), len(test))
    return TaskData(train, test, ood)


def model_spec(run, data):
    return spec_for(run["model"], (1,) + tuple(data.train.sample_shape), int(run["num_classes"]),
                    int(run["hidden"]), float(run["dropout"]))


def watermark_spec(run, source_class=None, target_class=None):
    count = int(run["wm_count"])
    return WatermarkSpec(
        source_class=int(run["source_class"] if source_class is None else source_class),
        target_class=int(run["target_class"] if target_class is None else target_class),
        trigger=Trigger.square(int(run["trigger_size"]), float(run["trigger_value"])),
        source=str(run["wm_source"]),
        count=count if count > 0 else None,
        fraction=float(run["wm_fraction"]),
        selection=str(run["wm_selection"]),
        fgsm=FgsmSettings(bool(run["fgsm"]), float(run["fgsm_eps"]),
                          int(run["fgsm_steps_ce"]), int(run["fgsm_steps_snnl"])),
        seed=run.seed,
    )


def train_reference(run, data, seed_offset=0):
    """A clean model of the configured architecture; never sees a watermark."""
    spec = model_spec(run, data)
    cfg = run.train_config().with_(seed=run.seed + seed_offset)
    return train_clean(build_model(spec, cfg.seed), data.train, cfg, tag=f"clean-{seed_offset}").model


def train_victim(run, mode, data, wm_spec=None, metrics_path=None, cfg=None, clean_model=None):
    """Victim trained in ``mode``; watermarks are built first for baseline and EWE."""
    if mode not in MODES:
        raise ContractError(f"mode must be one of {MODES}, got {mode!r}")
    cfg = cfg or run.train_config()
    spec = model_spec(run, data)
    if clean_model is None:
        clean_model = train_reference(run, data)
    wm = None
    if mode != "clean":
        wm_spec = wm_spec or watermark_spec(run)
        wm_spec.validate(data.train, data.ood)
        placement = clean_model if run["placement_model"] == "clean" else build_model(spec, cfg.seed)
        wm = build_watermark_set(wm_spec, data.train, placement, clean_model, cfg.temperature, ood=data.ood,
                                 scale=cfg.temperature_scale)
        logger.info("built %d watermarks (%d -> %d) at %s", len(wm), wm.source_class, wm.target_class, wm.position)
    training = train_mode(mode, build_model(spec, cfg.seed), data.train, wm, cfg,
                          eval_data=data.test, metrics_path=metrics_path)
    return VictimRun(training.model, clean_model, wm, training)


def false_rate(run, data, wm, clean_model=None):
    """p0 from ``false_rate_models`` clean models, or the 1/K bound when that is 0."""
    n = int(run["false_rate_models"])
    if n == 0:
        return conservative_false_rate(int(run["num_classes"]))
    models = [clean_model] if clean_model is not None else []
    models += [train_reference(run, data, seed_offset=1000 + i) for i in range(len(models), n)]
    return false_watermark_rate(models, wm)


def extraction_queries(run, data):
    n = int(run["extract_queries"])
    return data.train if n <= 0 else data.train.subset(range(min(n, len(data.train))), "queries")


def extract(run, victim, data, metrics_path=None):
    cfg = run.train_config(epochs=int(run["extract_epochs"]))
    return extract_model(victim, extraction_queries(run, data), model_spec(run, data), cfg,
                         held_out=data.test, metrics_path=metrics_path)


def run_point(run, data, source_class=None, target_class=None):
    """Victim accuracy and extracted watermark success for one hyperparameter setting."""
    victim = train_victim(run, "ewe", data, watermark_spec(run, source_class, target_class))
    stolen = extract(run, victim.model, data)
    return {
        "victim_acc": evaluate(victim.model, data.test),
        "victim_wm_success": watermark_success_rate(victim.model, victim.wm),
        "extracted_acc": evaluate(stolen.model, data.test),
        "extracted_wm_success": watermark_success_rate(stolen.model, victim.wm),
    }
