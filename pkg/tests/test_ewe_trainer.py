"""Tests for the clean / baseline / EWE training loop."""

import sys
import os
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import tempfile
import unittest

import numpy as np
import pandas as pd

from common.config import TrainConfig
from common.errors import ContractError
from common.optim import OptimizerSettings
from nn_models.models import build_model, evaluate, mlp_spec, small_cnn_spec
from task_data.datasets import gen_synthetic
from watermark.ewe_trainer import loss_decomposition_error, train_baseline, train_clean, train_ewe, train_mode
from watermark.watermark_gen import Trigger, WatermarkSet, stamp_trigger


def _setup():
    task = gen_synthetic(4, 12, side=8, seed=0)
    model = build_model(mlp_spec(64, hidden=16, num_classes=4), 0)
    raw = task.inputs[task.labels == 1][:4]
    wm = WatermarkSet(stamp_trigger(raw, Trigger.square(3), (0, 0)), 2, 1, (0, 0), Trigger.square(3))
    return task, model, wm


def _cfg(**kw):
    base = dict(kappa=5.0, temperature=10.0, temperature_scale="absolute", alpha=0.1, ratio=1, batch_size=16,
                epochs=2, optimizer=OptimizerSettings(lr=0.01), seed=0)
    base.update(kw)
    return TrainConfig(**base)


class TestSchedule(unittest.TestCase):

    def test_ratio_one_interleaves_every_batch(self):
        task, model, wm = _setup()
        result = train_ewe(model, task, wm, _cfg(ratio=1))
        self.assertEqual(result.schedule_counts(1), (3, 3))

    def test_ratio_two(self):
        task, model, wm = _setup()
        result = train_ewe(model, task, wm, _cfg(ratio=2))
        self.assertEqual(result.schedule_counts(2), (3, 1))

    def test_clean_has_no_watermark_batches(self):
        task, model, _ = _setup()
        result = train_clean(model, task, _cfg())
        self.assertEqual(result.schedule_counts(1), (3, 0))
        self.assertTrue(np.isnan(result.final.wm_success_raw))


class TestLoss(unittest.TestCase):

    def test_total_is_ce_minus_weighted_snnl(self):
        task, model, wm = _setup()
        result = train_ewe(model, task, wm, _cfg())
        self.assertLess(loss_decomposition_error(result.records), 1e-3)
        wm_records = [r for r in result.records if r.kind == "wm"]
        self.assertEqual(len(wm_records[0].snnl), 2)

    def test_baseline_keeps_temperatures(self):
        task, model, wm = _setup()
        result = train_baseline(model, task, wm, _cfg())
        np.testing.assert_allclose(result.temperatures, [10.0, 10.0], rtol=1e-6)
        self.assertTrue(all(r.total == r.ce for r in result.records if r.kind == "wm"))

    def test_ewe_updates_temperatures(self):
        task, model, wm = _setup()
        result = train_ewe(model, task, wm, _cfg(alpha=0.5))
        fixed = train_baseline(model, task, wm, _cfg(alpha=0.5))
        self.assertTrue(all(t > 0 for t in result.temperatures))
        self.assertFalse(np.allclose(result.temperatures, fixed.temperatures))

    def test_disentangling_variant_runs(self):
        task, model, wm = _setup()
        pool = task.inputs[task.labels == 2]
        result = train_ewe(model, task, wm, _cfg(kappa=-5.0), wm_ce="target_only", target_pool=pool)
        self.assertEqual(len(result.history), 2)


class TestCaptureLayers(unittest.TestCase):

    def _conv_setup(self):
        task = gen_synthetic(4, 12, side=16, seed=0)
        model = build_model(small_cnn_spec(16, 4), 0)
        raw = task.inputs[task.labels == 1][:4]
        wm = WatermarkSet(stamp_trigger(raw, Trigger.square(3), (0, 0)), 2, 1, (0, 0), Trigger.square(3))
        return task, model, wm

    def test_every_conv_layer_is_entangled(self):
        task, model, wm = self._conv_setup()
        cfg = _cfg(temperature=1.0, temperature_scale="median", alpha=0.5)
        result = train_ewe(model, task, wm, cfg)
        fixed = train_baseline(model, task, wm, cfg)
        self.assertEqual(len(result.layers), 3)
        for value in result.history[0].snnl:
            self.assertGreater(value, 0.05)
        for moved, kept in zip(result.temperatures, fixed.temperatures):
            self.assertGreater(kept, 0)
            self.assertGreater(abs(moved - kept), 1e-4 * kept)

    def test_first_batch_sets_temperatures_per_layer(self):
        task, model, wm = self._conv_setup()
        result = train_baseline(model, task, wm, _cfg(temperature=1.0, temperature_scale="median"))
        self.assertEqual(len(set(np.round(result.temperatures, 3))), 3)
        self.assertTrue(all(t != 1.0 for t in result.temperatures))

    def test_warmup_epochs_skip_watermark_batches(self):
        task, model, wm = _setup()
        result = train_ewe(model, task, wm, _cfg(epochs=3, warmup_epochs=1))
        self.assertEqual(result.schedule_counts(1), (3, 0))
        self.assertEqual(result.schedule_counts(2), (3, 3))
        self.assertTrue(np.isnan(result.history[0].snnl[0]))


class TestTraining(unittest.TestCase):

    def test_learns_the_task(self):
        task, model, _ = _setup()
        result = train_clean(model, task, _cfg(epochs=15))
        self.assertGreater(evaluate(result.model, task), 0.9)

    def test_input_model_untouched_and_deterministic(self):
        task, model, wm = _setup()
        before = model.params["L1.weight"].data.copy()
        a = train_ewe(model, task, wm, _cfg())
        b = train_ewe(model, task, wm, _cfg())
        np.testing.assert_array_equal(model.params["L1.weight"].data, before)
        for p, q in zip(a.model.parameters(), b.model.parameters()):
            np.testing.assert_array_equal(p.data, q.data)

    def test_metrics_csv(self):
        task, model, wm = _setup()
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "metrics.csv")
            train_ewe(model, task, wm, _cfg(), metrics_path=path)
            frame = pd.read_csv(path)
        self.assertEqual(list(frame["epoch"]), [1, 2])
        self.assertIn("snnl_2", frame.columns)
        self.assertIn("T_4", frame.columns)

    def test_errors(self):
        task, model, wm = _setup()
        empty = WatermarkSet(np.zeros((0, 8, 8)), 2, 1, (0, 0), Trigger.square(3))
        with self.assertRaises(ContractError):
            train_ewe(model, task, empty, _cfg())
        with self.assertRaises(ContractError):
            train_mode("fancy", model, task, wm, _cfg())


if __name__ == "__main__":
    unittest.main()
