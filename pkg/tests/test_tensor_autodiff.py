"""Tests for the reverse-mode tensor engine."""

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


def _t(a):
    return Tensor(np.asarray(a, dtype=np.float64), dtype=np.float64)


class TestTensorBasics(unittest.TestCase):

    def test_default_dtype_is_float32(self):
        self.assertEqual(Tensor([1.0, 2.0]).dtype, np.float32)

    def test_item_requires_scalar(self):
        self.assertEqual(Tensor([3.0]).item(), 3.0)
        with self.assertRaises(ContractError):
            Tensor([1.0, 2.0]).item()

    def test_shape_mismatch_names_primitive(self):
        with self.assertRaises(ContractError) as ctx:
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
        self.assertIn("matmul", str(ctx.exception))

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with ad.Tape() as tape:
            with ad.no_grad():
                ad.reduce_sum(ad.relu(x))
            self.assertEqual(len(tape), 0)

    def test_backward_on_empty_tape_raises(self):
        with ad.Tape() as tape:
            with self.assertRaises(ContractError):
                ad.backward(Tensor([1.0]), tape)

    def test_backward_rejects_non_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with ad.Tape() as tape:
            y = ad.relu(x)
            with self.assertRaises(ContractError):
                ad.backward(y, tape)

    def test_gradient_accumulates_over_reuse(self):
        x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        with ad.Tape() as tape:
            y = ad.reduce_sum(ad.add(ad.mul(x, x), x))
            ad.backward(y, tape)
        np.testing.assert_allclose(x.grad, 2 * x.data + 1)

    def test_unreached_leaf_gets_zero_gradient(self):
        x = Tensor(np.ones(2), requires_grad=True)
        unused = Tensor(np.ones(2), requires_grad=True)
        with ad.Tape() as tape:
            ad.add(x, unused)
            loss = ad.reduce_sum(ad.scale(x, 2.0))
            ad.backward(loss, tape)
        np.testing.assert_allclose(x.grad, [2.0, 2.0])
        np.testing.assert_allclose(unused.grad, [0.0, 0.0])


class TestSoftmax(unittest.TestCase):

    @settings(max_examples=30, deadline=None)
    @given(st.integers(min_value=1, max_value=6), st.integers(min_value=2, max_value=8), st.integers(0, 10_000))
    def test_rows_sum_to_one(self, n, k, seed):
        z = np.random.default_rng(seed).normal(0.0, 30.0, size=(n, k))
        s = ad.softmax(Tensor(z)).data
        np.testing.assert_allclose(s.sum(axis=1), np.ones(n), atol=1e-5)
        self.assertTrue(np.all(np.isfinite(s)))

    def test_cross_entropy_matches_log_softmax(self):
        z = _t([[1.0, 2.0, 0.5], [0.0, -1.0, 3.0]])
        labels = np.array([1, 2])
        ce = ad.cross_entropy(z, labels).item()
        ls = ad.log_softmax(z).data
        self.assertAlmostEqual(ce, -np.mean(ls[[0, 1], labels]), places=10)

    def test_cross_entropy_rejects_bad_labels(self):
        with self.assertRaises(ContractError):
            ad.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


TRIALS = settings(max_examples=100, deadline=None)
SEEDS = st.integers(0, 2**32 - 1)


def _f32(rng, *shape):
    return rng.normal(size=shape).astype(np.float32)


def _w(rng, *shape):
    return Tensor(_f32(rng, *shape))


def _dims(rng, low=1, high=4, n=2):
    return tuple(int(d) for d in rng.integers(low, high + 1, size=n))


class TestGradients(unittest.TestCase):
    """Every primitive against float64 central differences: float32 inputs, h = 1e-3."""

    def check(self, f, x):
        result = ad.grad_check(f, Tensor(x), h=1e-3, tol=1e-3)
        self.assertTrue(result.passed, f"max rel error {result.max_rel_error} at {result.worst_index}")

    @TRIALS
    @given(SEEDS)
    def test_add_sub_mul(self, seed):
        rng = np.random.default_rng(seed)
        shape = _dims(rng)
        u, v, w = _w(rng, *shape), _w(rng, *shape), _w(rng, *shape)
        self.check(lambda t: ad.reduce_sum(ad.mul(ad.add(ad.mul(t, u), ad.sub(v, t)), w)), _f32(rng, *shape))

    @TRIALS
    @given(SEEDS)
    def test_bias_and_scalar_mul(self, seed):
        rng = np.random.default_rng(seed)
        n, f = _dims(rng)
        a, w = _w(rng, n, f), _w(rng, n, f)
        self.check(lambda t: ad.reduce_sum(ad.mul(ad.add(a, t), w)), _f32(rng, f))
        self.check(lambda t: ad.reduce_sum(ad.mul(ad.mul(a, t), w)), _f32(rng, 1))

    @TRIALS
    @given(SEEDS)
    def test_scale_exp_log_reciprocal(self, seed):
        rng = np.random.default_rng(seed)
        shape = _dims(rng)
        w, ones = _w(rng, *shape), Tensor(np.ones(shape, dtype=np.float32))
        self.check(lambda t: ad.reduce_sum(ad.mul(ad.exp(ad.scale(t, 0.3)), w)), _f32(rng, *shape))
        self.check(lambda t: ad.reduce_sum(ad.mul(ad.log(ad.add(ad.mul(t, t), ones)), w)), _f32(rng, *shape))
        self.check(lambda t: ad.reduce_sum(ad.mul(ad.reciprocal(ad.add(ad.mul(t, t), ones)), w)), _f32(rng, *shape))

    @TRIALS
    @given(SEEDS)
    def test_relu_and_sigmoid(self, seed):
        rng = np.random.default_rng(seed)
        shape = _dims(rng)
        w = _w(rng, *shape)
        x = _f32(rng, *shape)
        # every coordinate stays off the kink by more than the step
        x[np.abs(x) < 0.01] = 0.5
        self.check(lambda t: ad.reduce_sum(ad.mul(ad.relu(t), w)), x)
        self.check(lambda t: ad.reduce_sum(ad.mul(ad.sigmoid(t), w)), _f32(rng, *shape))

    @TRIALS
    @given(SEEDS)
    def test_matmul(self, seed):
        rng = np.random.default_rng(seed)
        n, k, m = _dims(rng, n=3)
        a, b, w = _w(rng, n, k), _w(rng, k, m), _w(rng, n, m)
        self.check(lambda t: ad.reduce_sum(ad.mul(ad.matmul(t, b), w)), a.data)
        self.check(lambda t: ad.reduce_sum(ad.mul(ad.matmul(a, t), w)), b.data)

    @TRIALS
    @given(SEEDS)
    def test_softmax_family(self, seed):
        rng = np.random.default_rng(seed)
        n, k = _dims(rng, 2, 5)
        w = _w(rng, n, k)
        labels = rng.integers(0, k, size=n)
        self.check(lambda t: ad.reduce_sum(ad.mul(ad.softmax(t), w)), _f32(rng, n, k))
        self.check(lambda t: ad.reduce_sum(ad.mul(ad.log_softmax(t), w)), _f32(rng, n, k))
        self.check(lambda t: ad.cross_entropy(t, labels), _f32(rng, n, k))

    @TRIALS
    @given(SEEDS)
    def test_reductions(self, seed):
        rng = np.random.default_rng(seed)
        n, f = _dims(rng)
        w0, w1 = _w(rng, f), _w(rng, n)
        self.check(lambda t: ad.reduce_sum(ad.mul(ad.reduce_mean(t, axis=0), w0)), _f32(rng, n, f))
        self.check(lambda t: ad.reduce_sum(ad.mul(ad.reduce_sum(t, axis=1), w1)), _f32(rng, n, f))
        self.check(lambda t: ad.reduce_mean(ad.mul(t, t)), _f32(rng, n, f))

    @TRIALS
    @given(SEEDS)
    def test_sqdist(self, seed):
        rng = np.random.default_rng(seed)
        n, d = _dims(rng, 2, 5)
        w = _w(rng, n, n)
        self.check(lambda t: ad.reduce_sum(ad.mul(ad.sqdist(t), w)), _f32(rng, n, d))

    @TRIALS
    @given(SEEDS)
    def test_structural(self, seed):
        rng = np.random.default_rng(seed)
        n, f = _dims(rng, 2, 4)
        x = _f32(rng, n, 2 * f)
        folded = _w(rng, 2 * n, f)
        cube, flat = _f32(rng, n, 2, f), _w(rng, n, 2 * f)
        other, stacked = _w(rng, 1, 2 * f), _w(rng, n + 1, 2 * f)
        rows = _w(rng, n - 1, 2 * f)
        tiled = _w(rng, 3, n, 2 * f)
        self.check(lambda t: ad.reduce_sum(ad.mul(ad.reshape(t, (2 * n, f)), folded)), x)
        self.check(lambda t: ad.reduce_sum(ad.mul(ad.flatten(t), flat)), cube)
        self.check(lambda t: ad.reduce_sum(ad.mul(ad.concat([t, other], axis=0), stacked)), x)
        self.check(lambda t: ad.reduce_sum(ad.mul(ad.take_rows(t, 1, n), rows)), x)
        self.check(lambda t: ad.reduce_sum(ad.mul(ad.broadcast_to(t, (3, n, 2 * f)), tiled)), x)

    @TRIALS
    @given(SEEDS)
    def test_conv2d(self, seed):
        rng = np.random.default_rng(seed)
        n, c = _dims(rng, 1, 2)
        side = int(rng.integers(3, 6))
        x = _f32(rng, n, c, side, side)
        k, b = _w(rng, 2, c, 3, 3), _w(rng, 2)
        out_valid = _w(rng, n, 2, side - 2, side - 2)
        out_same = _w(rng, n, 2, side, side)
        self.check(lambda t: ad.reduce_sum(ad.mul(ad.conv2d(t, k, b), out_valid)), x)
        self.check(lambda t: ad.reduce_sum(ad.mul(ad.conv2d(t, k, b, padding="same"), out_same)), x)
        self.check(lambda t: ad.reduce_sum(ad.mul(ad.conv2d(Tensor(x), t, b), out_valid)), k.data)
        self.check(lambda t: ad.reduce_sum(ad.mul(ad.conv2d(Tensor(x), k, t), out_valid)), b.data)

    @TRIALS
    @given(SEEDS)
    def test_maxpool2d(self, seed):
        rng = np.random.default_rng(seed)
        n, c = _dims(rng, 1, 2)
        h, w = _dims(rng, 2, 5)
        # values 0.1 apart keep each window's argmax fixed under the step
        x = (rng.permutation(n * c * h * w).reshape(n, c, h, w) / 10.0).astype(np.float32)
        out = _w(rng, n, c, h // 2, w // 2)
        self.check(lambda t: ad.reduce_sum(ad.mul(ad.maxpool2d(t), out)), x)

    @TRIALS
    @given(SEEDS)
    def test_dropout_with_fixed_mask(self, seed):
        rng = np.random.default_rng(seed)
        shape = _dims(rng, 2, 5)
        w = _w(rng, *shape)
        self.check(lambda t: ad.reduce_sum(ad.mul(ad.dropout(t, 0.3, np.random.default_rng(seed)), w)),
                   _f32(rng, *shape))

    def test_grad_check_rejects_bad_step(self):
        with self.assertRaises(ContractError):
            ad.grad_check(lambda t: ad.reduce_sum(t), _t([1.0]), h=0.0)

    def test_grad_check_detects_wrong_gradient(self):
        result = ad.grad_check(lambda t: ad.reduce_sum(ad.mul(t, t)), _t([1.0, 2.0]), analytic=np.array([1.0, 1.0]))
        self.assertFalse(result.passed)


def _loss_and_grad(f, x):
    leaf = Tensor(x.copy(), requires_grad=True)
    with ad.Tape() as tape:
        loss = f(leaf)
        ad.backward(loss, tape)
    return loss.data.copy(), leaf.grad


class TestBackwardProperties(unittest.TestCase):

    @TRIALS
    @given(SEEDS, st.floats(-3.0, 3.0), st.floats(-3.0, 3.0))
    def test_gradient_is_linear_in_the_loss(self, seed, a, b):
        rng = np.random.default_rng(seed)
        n, k = _dims(rng, 2, 5)
        w1, w2 = _w(rng, n, k), _w(rng, n, k)
        x = _f32(rng, n, k)

        def f(t):
            return ad.reduce_sum(ad.mul(ad.sigmoid(t), w1))

        def g(t):
            return ad.reduce_sum(ad.mul(ad.softmax(t), w2))

        _, grad_f = _loss_and_grad(f, x)
        _, grad_g = _loss_and_grad(g, x)
        _, joint = _loss_and_grad(lambda t: ad.add(ad.scale(f(t), a), ad.scale(g(t), b)), x)
        expected = a * grad_f.astype(np.float64) + b * grad_g.astype(np.float64)
        np.testing.assert_allclose(joint.astype(np.float64), expected, atol=1e-5, rtol=1e-5)

    @settings(max_examples=25, deadline=None)
    @given(SEEDS)
    def test_repeated_pass_is_bit_identical(self, seed):
        rng = np.random.default_rng(seed)
        x = _f32(rng, 2, 1, 6, 6)
        k, b = _w(rng, 3, 1, 3, 3), _w(rng, 3)
        dense = _w(rng, 12, 4)
        labels = rng.integers(0, 4, size=2)

        def net(t):
            h = ad.maxpool2d(ad.relu(ad.conv2d(t, k, b)))
            h = ad.dropout(ad.flatten(h), 0.2, np.random.default_rng(seed))
            spread = ad.reduce_mean(ad.sqdist(h))
            return ad.add(ad.cross_entropy(ad.matmul(h, dense), labels), spread)

        first_loss, first_grad = _loss_and_grad(net, x)
        second_loss, second_grad = _loss_and_grad(net, x)
        np.testing.assert_array_equal(first_loss, second_loss)
        np.testing.assert_array_equal(first_grad, second_grad)


class TestConvShapes(unittest.TestCase):

    def test_valid_and_same(self):
        x = Tensor(np.ones((1, 1, 6, 6)))
        w = Tensor(np.ones((4, 1, 3, 3)))
        self.assertEqual(ad.conv2d(x, w).shape, (1, 4, 4, 4))
        self.assertEqual(ad.conv2d(x, w, padding="same").shape, (1, 4, 6, 6))

    def test_constant_kernel_sums_window(self):
        x = Tensor(np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4))
        w = Tensor(np.ones((1, 1, 2, 2)))
        out = ad.conv2d(x, w).data[0, 0]
        self.assertEqual(out[0, 0], 0 + 1 + 4 + 5)

    def test_maxpool_drops_odd_edge(self):
        x = Tensor(np.arange(25, dtype=np.float32).reshape(1, 1, 5, 5))
        out = ad.maxpool2d(x).data[0, 0]
        np.testing.assert_array_equal(out, [[6, 8], [16, 18]])

    def test_dropout_zero_rate_is_identity(self):
        x = Tensor(np.ones((2, 3)))
        self.assertIs(ad.dropout(x, 0.0, np.random.default_rng(0)), x)


if __name__ == "__main__":
    unittest.main()
