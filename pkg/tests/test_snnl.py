"""Tests for the soft nearest neighbor loss."""

import sys
import os
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import unittest

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from common import tensor_autodiff as ad
from common.errors import ContractError
from common.tensor_autodiff import Tensor
from watermark.snnl import (calibrated_temperature, median_sq_distance, snnl, snnl_grad_input, snnl_grad_temperature,
                           snnl_reference, snnl_value)


def _cloud(seed, n=8, d=3):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, d))
    groups = np.arange(n) % 2
    return x, groups


class TestSnnlValue(unittest.TestCase):

    def test_matches_direct_formula(self):
        for seed in range(5):
            x, groups = _cloud(seed)
            self.assertAlmostEqual(snnl_value(x.astype(np.float64), groups, 2.0),
                                   snnl_reference(x, groups, 2.0), places=8)

    def test_single_group_is_zero(self):
        x, _ = _cloud(1)
        self.assertAlmostEqual(snnl_value(x, np.zeros(len(x)), 1.0), 0.0, places=6)

    def test_separated_groups_score_low_mixed_groups_high(self):
        rng = np.random.default_rng(0)
        apart = np.concatenate([rng.normal(0, 0.1, (5, 2)), rng.normal(20, 0.1, (5, 2))])
        groups = np.repeat([0, 1], 5)
        mixed = rng.normal(0, 1.0, (10, 2))
        self.assertLess(snnl_value(apart, groups, 1.0), 1e-3)
        self.assertGreater(snnl_value(mixed, groups, 100.0), 0.5)

    def test_no_underflow_at_tiny_temperature(self):
        x, groups = _cloud(2)
        self.assertTrue(np.isfinite(snnl_value(x * 100, groups, 1e-3)))
        self.assertTrue(np.all(np.isfinite(snnl_grad_input(x * 100, groups, 1e-3))))

    def test_one_dimensional_points(self):
        self.assertAlmostEqual(snnl_value(np.array([0.0, 0.1, 5.0, 5.1]), [0, 0, 1, 1], 1.0),
                               snnl_reference(np.array([[0.0], [0.1], [5.0], [5.1]]), [0, 0, 1, 1], 1.0), places=6)

    def test_contract_violations(self):
        with self.assertRaises(ContractError):
            snnl_value(np.zeros((1, 2)), [0], 1.0)
        with self.assertRaises(ContractError):
            snnl_value(np.zeros((3, 2)), [0, 1, 0], 0.0)
        with self.assertRaises(ContractError):
            snnl_value(np.zeros((3, 2)), [0, 1], 1.0)


class TestSnnlInvariances(unittest.TestCase):

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.sampled_from([0.5, 2.0, 10.0]))
    def test_scale_invariance(self, seed, c):
        x, groups = _cloud(seed)
        self.assertAlmostEqual(snnl_value(c * x, groups, c * c * 3.0), snnl_value(x, groups, 3.0), delta=1e-5)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_permutation_invariance(self, seed):
        x, groups = _cloud(seed)
        perm = np.random.default_rng(seed + 1).permutation(len(x))
        self.assertAlmostEqual(snnl_value(x[perm], groups[perm], 1.5), snnl_value(x, groups, 1.5), delta=1e-6)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_relabel_invariance(self, seed):
        x, groups = _cloud(seed)
        self.assertAlmostEqual(snnl_value(x, 7 - 3 * groups, 1.5), snnl_value(x, groups, 1.5), delta=1e-6)


class TestSnnlGradients(unittest.TestCase):

    def test_input_gradient(self):
        x, groups = _cloud(3, n=6, d=2)
        result = ad.grad_check(lambda t: snnl(t, groups, 1.7), Tensor(x, dtype=np.float64), h=1e-6)
        self.assertTrue(result.passed, result.max_rel_error)
        np.testing.assert_allclose(snnl_grad_input(x, groups, 1.7), result.analytic, rtol=1e-10)

    def test_temperature_gradient(self):
        x, groups = _cloud(4, n=6, d=2)
        h = 1e-6
        numeric = (snnl_reference(x, groups, 2.0 + h) - snnl_reference(x, groups, 2.0 - h)) / (2 * h)
        self.assertAlmostEqual(snnl_grad_temperature(x, groups, 2.0), numeric, delta=1e-5 * max(1.0, abs(numeric)))

    def test_gradient_through_log_temperature(self):
        x, groups = _cloud(5, n=6, d=2)
        log_t = Tensor(np.array([np.log(2.0)]), requires_grad=True, dtype=np.float64)
        with ad.Tape() as tape:
            loss = snnl(Tensor(x, dtype=np.float64), groups, ad.exp(log_t))
            ad.backward(loss, tape)
        expected = snnl_grad_temperature(x, groups, 2.0) * 2.0
        self.assertAlmostEqual(float(log_t.grad[0]), expected, places=8)


class TestCalibratedTemperature(unittest.TestCase):

    def test_median_of_pairs(self):
        x = np.array([[0.0], [1.0], [3.0]])
        # pair distances 1, 9, 4
        self.assertAlmostEqual(median_sq_distance(x), 4.0)
        self.assertAlmostEqual(calibrated_temperature(x, 0.5, "median"), 2.0)
        self.assertEqual(calibrated_temperature(x, 0.5, "absolute"), 0.5)

    def test_no_spread_falls_back(self):
        self.assertEqual(calibrated_temperature(np.ones((4, 3)), 2.0, "median"), 2.0)
        with self.assertRaises(ContractError):
            calibrated_temperature(np.ones((4, 3)), 2.0, "mean")

    def test_wide_layer_is_measured_at_its_own_scale(self):
        rng = np.random.default_rng(0)
        x = rng.normal(0, 1.0, (16, 3136))
        groups = np.repeat([0, 1], 8)
        t = calibrated_temperature(x, 1.0, "median")
        self.assertGreater(t, 1000.0)
        unit = x / np.sqrt(median_sq_distance(x))
        self.assertAlmostEqual(snnl_value(x, groups, t), snnl_value(unit, groups, 1.0), delta=1e-6)
        # two draws of one distribution: every pair weighs about the same, SNNL near log(15 / 7)
        self.assertAlmostEqual(snnl_value(x, groups, t), np.log(15 / 7), delta=0.1)
        self.assertGreater(np.abs(snnl_grad_input(x, groups, t)).max(), 0.0)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0.1, 20.0), st.integers(0, 1000))
    def test_calibrated_value_is_scale_free(self, c, seed):
        x, groups = _cloud(seed)
        a = snnl_value(x, groups, calibrated_temperature(x, 1.0, "median"))
        b = snnl_value(c * x, groups, calibrated_temperature(c * x, 1.0, "median"))
        self.assertAlmostEqual(a, b, delta=1e-6)


if __name__ == "__main__":
    unittest.main()
