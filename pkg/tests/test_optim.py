import os
import sys
import unittest

import numpy as np
from deepdiff import DeepDiff as ddiff

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '../')))

from seqflow import autodiff as ad
from seqflow.exceptions import Invalid, DimensionMismatch
from seqflow.optim import Adam, AdamState, adam_step


class TestAdamStep(unittest.TestCase):

    def setUp(self):
        self.params = {'w': np.array([1.0, -2.0]), 'b': np.array(0.5)}
        self.grads = {'w': np.array([0.1, -0.3]), 'b': np.array(2.0)}
        self.state = AdamState.for_params(self.params, lr=0.01)

    def test_first_step_moves_by_lr(self):
        """Bias correction makes the first step lr * sign(grad)"""
        new_params, new_state = adam_step(self.state, self.params, self.grads)
        np.testing.assert_allclose(new_params['w'], [0.99, -1.99], atol=1e-8)
        np.testing.assert_allclose(new_params['b'], 0.49, atol=1e-8)
        self.assertEqual(new_state.step_count, 1)

    def test_inputs_untouched(self):
        before = {k: v.copy() for k, v in self.params.items()}
        adam_step(self.state, self.params, self.grads)
        self.assertEqual(ddiff(before, self.params), {})
        self.assertEqual(self.state.step_count, 0)
        np.testing.assert_array_equal(self.state.m['w'], 0.0)

    def test_zero_gradient_keeps_params(self):
        zeros = {k: np.zeros_like(v) for k, v in self.params.items()}
        new_params, _ = adam_step(self.state, self.params, zeros)
        np.testing.assert_array_equal(new_params['w'], self.params['w'])

    def test_matches_reference_recursion(self):
        params, state = self.params, self.state
        m = v = 0.0
        x = self.params['b'].item()
        for step in range(1, 6):
            g = 2.0 * x
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            x = x - 0.01 * (m / (1 - 0.9 ** step)) / (np.sqrt(v / (1 - 0.999 ** step)) + 1e-8)
            params, state = adam_step(state, params, {'w': np.zeros(2), 'b': 2.0 * params['b']})
        self.assertAlmostEqual(params['b'].item(), x, places=12)

    def test_key_mismatch(self):
        with self.assertRaisesRegex(Invalid, 'invalid keys'):
            adam_step(self.state, self.params, {'w': self.grads['w']})

    def test_shape_mismatch(self):
        self.grads['w'] = np.zeros(3)
        with self.assertRaisesRegex(DimensionMismatch, 'key: "w"'):
            adam_step(self.state, self.params, self.grads)


class TestAdam(unittest.TestCase):

    def test_minimises_quadratic(self):
        target = np.array([1.0, -3.0, 0.5])
        x = ad.parameter(np.zeros(3), name='x')
        optimizer = Adam({'x': x}, lr=0.05)
        for _ in range(2000):
            diff = x - ad.constant(target)
            ad.backward((diff * diff).sum())
            optimizer.step()
        np.testing.assert_allclose(x.value, target, atol=1e-2)
        self.assertEqual(optimizer.state.step_count, 2000)

    def test_updates_in_place(self):
        x = ad.parameter(np.ones(2), name='x')
        array = x.value
        optimizer = Adam({'x': x}, lr=0.1)
        ad.backward((x * x).sum())
        optimizer.step()
        self.assertIs(x.value, array)
        np.testing.assert_allclose(array, [0.9, 0.9])
        optimizer.zero_grad()
        np.testing.assert_array_equal(x.grad, 0.0)


if __name__ == '__main__':
    unittest.main()
