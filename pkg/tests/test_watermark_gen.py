"""Tests for watermark selection, trigger placement and FGSM refinement."""

import sys
import os
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import unittest

import numpy as np

from common.errors import ContractError
from nn_models.models import build_model, mlp_spec
from task_data.datasets import gen_synthetic
from watermark.watermark_gen import (FgsmSettings, Trigger, WatermarkSpec, build_watermark_set,
                                     class_pair_similarity, fgsm_refine, fgsm_step, place_trigger,
                                     select_watermark_source, stamp_trigger, suggest_class_pair, trigger_map,
                                     trigger_position)


def _task():
    return gen_synthetic(4, 12, side=8, seed=0)


def _model(seed=0):
    return build_model(mlp_spec(64, hidden=8, num_classes=4), seed)


class TestTriggerPlacement(unittest.TestCase):

    def test_position_follows_gradient_peak(self):
        grad = np.zeros((8, 8))
        grad[4:7, 2:5] = 1.0
        self.assertEqual(trigger_position(grad, Trigger.square(3)), (4, 2))

    def test_ties_take_first_row_major(self):
        self.assertEqual(trigger_position(np.zeros((6, 6)), Trigger.square(3)), (0, 0))

    def test_map_has_valid_shape(self):
        self.assertEqual(trigger_map(np.ones((8, 8)), Trigger.square(3)).shape, (6, 6))

    def test_trigger_larger_than_input(self):
        with self.assertRaises(ContractError):
            trigger_map(np.ones((2, 2)), Trigger.square(3))

    def test_stamp(self):
        out = stamp_trigger(np.zeros((2, 6, 6)), Trigger.checkerboard(2), (1, 3))
        np.testing.assert_array_equal(out[0, 1:3, 3:5], [[1, 0], [0, 1]])
        self.assertEqual(out.sum(), 4)
        with self.assertRaises(ContractError):
            stamp_trigger(np.zeros((1, 6, 6)), Trigger.square(3), (4, 0))

    def test_place_trigger_stamps_every_sample(self):
        task = _task()
        samples = task.inputs[task.labels == 1][:4]
        target = task.inputs[task.labels == 2][:4]
        wm = place_trigger(samples, Trigger.square(3), _model(), target, 10.0, source_class=1, target_class=2)
        r, c = wm.position
        self.assertTrue(0 <= r <= 5 and 0 <= c <= 5)
        np.testing.assert_array_equal(wm.inputs[:, r:r + 3, c:c + 3], np.ones((4, 3, 3)))
        self.assertEqual(wm.trigger_region().sum(), 9)


class TestFgsm(unittest.TestCase):

    def test_step_freezes_and_clips(self):
        x = np.full((1, 2, 2), 0.99, dtype=np.float32)
        grad = np.array([[[1.0, -1.0], [1.0, 0.0]]])
        frozen = np.array([[[False, False], [True, False]]])
        out = fgsm_step(x, grad, 0.05, frozen)
        np.testing.assert_allclose(out[0], [[1.0, 0.94], [0.99, 0.99]], atol=1e-6)

    def _wm(self):
        task = _task()
        target = task.inputs[task.labels == 2][:4]
        wm = place_trigger(task.inputs[task.labels == 1][:4], Trigger.square(3), _model(), target, 10.0, 1, 2)
        return wm, target

    def test_zero_eps_is_identity(self):
        wm, target = self._wm()
        out = fgsm_refine(wm, _model(1), _model(2), target, FgsmSettings(eps=0.0), 10.0)
        np.testing.assert_array_equal(out.inputs, wm.inputs)
        out = fgsm_refine(wm, _model(1), _model(2), target, FgsmSettings(steps_ce=0, steps_snnl=0), 10.0)
        np.testing.assert_array_equal(out.inputs, wm.inputs)

    def test_negative_eps_rejected(self):
        wm, target = self._wm()
        with self.assertRaises(ContractError):
            fgsm_refine(wm, _model(1), _model(2), target, FgsmSettings(eps=-0.1), 10.0)

    def test_refinement_keeps_trigger_and_range(self):
        wm, target = self._wm()
        out = fgsm_refine(wm, _model(1), _model(2), target, FgsmSettings(eps=0.1, steps_ce=2, steps_snnl=1), 10.0)
        region = wm.trigger_region()
        np.testing.assert_array_equal(out.inputs[:, region], wm.inputs[:, region])
        self.assertTrue(out.inputs.min() >= 0 and out.inputs.max() <= 1)
        self.assertEqual([k for k, _ in out.log], ["ce", "snnl", "ce"])
        self.assertTrue(out.refined)
        self.assertFalse(np.array_equal(out.inputs, wm.inputs))


class TestSelection(unittest.TestCase):

    def test_first_random_closest(self):
        task = _task()
        for selection in ("first", "random", "closest"):
            spec = WatermarkSpec(1, 2, count=5, selection=selection)
            raw = select_watermark_source(spec, task)
            self.assertEqual(raw.shape, (5, 8, 8))
        first = select_watermark_source(WatermarkSpec(1, 2, count=3), task)
        np.testing.assert_array_equal(first, task.inputs[task.labels == 1][:3])

    def test_fraction_resolves_count(self):
        task = _task()
        self.assertEqual(WatermarkSpec(1, 2, fraction=0.125).resolved_count(task), 6)

    def test_validation(self):
        task = _task()
        with self.assertRaises(ContractError):
            WatermarkSpec(1, 1).validate(task)
        with self.assertRaises(ContractError):
            WatermarkSpec(1, 2, trigger=Trigger.square(9)).validate(task)
        with self.assertRaises(ContractError):
            WatermarkSpec(1, 2, source="ood").validate(task)
        with self.assertRaises(ContractError):
            select_watermark_source(WatermarkSpec(1, 2, count=50), task)

    def test_class_pair_similarity(self):
        task = _task()
        sims = class_pair_similarity(task)
        np.testing.assert_allclose(np.diag(sims), np.ones(4), atol=1e-9)
        c_s, c_t = suggest_class_pair(task)
        self.assertNotEqual(c_s, c_t)
        off = sims.copy()
        np.fill_diagonal(off, -np.inf)
        self.assertEqual(sims[c_s, c_t], off.max())

    def test_build_watermark_set(self):
        task = _task()
        spec = WatermarkSpec(1, 2, count=4, fgsm=FgsmSettings(eps=0.05, steps_ce=1, steps_snnl=1))
        wm = build_watermark_set(spec, task, _model(), _model(1), 10.0)
        self.assertEqual(len(wm), 4)
        self.assertEqual((wm.source_class, wm.target_class), (1, 2))
        self.assertTrue(wm.refined)
        ds = wm.as_dataset(4)
        self.assertTrue(np.all(ds.labels == 2))


if __name__ == "__main__":
    unittest.main()
