import os
import sys
import unittest

import numpy as np

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '../')))

from seqflow import autodiff as ad
from seqflow.data import SequenceBatch
from seqflow.exceptions import Invalid, DimensionMismatch
from seqflow.flow import FlowStack, AffineTransform, difference_transform, learned_transform
from seqflow.conditioner import ConditionerConfig, HighwayMlp
from seqflow.metrics import kalman_log_likelihood
from seqflow.models import SlvmFlowModel
from seqflow.slvm import (SlvmModel, GaussianParams, ElboBreakdown, gaussian_kl, gaussian_log_prob, elbo,
                          closed_form_elbo, iw_log_likelihood, slvm_sample, LOG_VAR_BOUND)


def linear_slvm(dims, A, Bz, By, C, lv_p, lv_q, lv_r):
    """SLVM whose three networks are linear maps with constant log variances."""
    model = SlvmModel(dims, np.random.default_rng(0), latent_dim=A.shape[0], hidden_layers=0)
    model.prior_net['loc_W'].value[...] = A
    model.prior_net['scale_b'].value[...] = lv_p
    model.posterior_net['loc_W'].value[...] = np.vstack([Bz, By])
    model.posterior_net['scale_b'].value[...] = lv_q
    model.likelihood_net['loc_W'].value[...] = C
    model.likelihood_net['scale_b'].value[...] = lv_r
    return model


def exact_posterior_slvm():
    """Independent latents (no transition), so the per-step posterior is exact."""
    p, c, r = np.array([1.5, 0.7]), np.array([0.8, -1.2]), np.array([0.4, 0.9])
    gain = p * c / (c ** 2 * p + r)
    model = linear_slvm(2, np.zeros((2, 2)), np.zeros((2, 2)), np.diag(gain), np.diag(c),
                        np.log(p), np.log(p - gain * c * p), np.log(r))
    kalman = dict(F=np.zeros((2, 2)), a=np.zeros(2), Q=np.diag(p), H=np.diag(c), c=np.zeros(2), R=np.diag(r))
    return model, kalman


class TestGaussians(unittest.TestCase):

    def test_kl_of_identical_is_zero(self):
        q = GaussianParams(np.array([[0.3, -1.0]]), np.array([[0.1, 0.5]]))
        np.testing.assert_allclose(gaussian_kl(q, q), 0.0, atol=1e-15)

    def test_kl_closed_form(self):
        q = GaussianParams(np.array([1.0]), np.array([0.0]))
        p = GaussianParams(np.array([0.0]), np.array([np.log(4.0)]))
        expected = 0.5 * (np.log(4.0) + (1.0 + 1.0) / 4.0 - 1.0)
        self.assertAlmostEqual(float(gaussian_kl(q, p)), expected)

    def test_kl_dimension_mismatch(self):
        with self.assertRaises(DimensionMismatch):
            gaussian_kl(GaussianParams(np.zeros(2), np.zeros(2)), GaussianParams(np.zeros(3), np.zeros(3)))

    def test_log_prob(self):
        lp = gaussian_log_prob(np.array([1.0, 0.0]), GaussianParams(np.zeros(2), np.zeros(2)))
        self.assertAlmostEqual(float(lp.value), -np.log(2.0 * np.pi) - 0.5)

    def test_log_var_is_clamped(self):
        params = GaussianParams.from_heads(np.zeros(2), ad.constant(np.array([-40.0, 40.0])))
        np.testing.assert_array_equal(params.log_var.value, [-LOG_VAR_BOUND, LOG_VAR_BOUND])

    def test_breakdown(self):
        self.assertEqual(ElboBreakdown(recon=np.array(3.0), kl=np.array(1.0), log_det=np.array(0.5)).elbo, 1.5)


class TestSlvmModel(unittest.TestCase):

    def setUp(self):
        self.model = SlvmModel(2, np.random.default_rng(0), latent_dim=3, hidden_units=8)
        self.x = SequenceBatch(np.random.default_rng(1).standard_normal((4, 6, 2)))

    def test_parameter_names(self):
        names = self.model.parameters()
        self.assertIn('slvm.prior.loc_W', names)
        self.assertIn('slvm.posterior.W0', names)
        self.assertIn('slvm.likelihood.scale_b', names)
        self.assertEqual(names['slvm.posterior.W0'].shape[0], 5)

    def test_shared_posterior(self):
        model = SlvmModel(2, np.random.default_rng(0), latent_dim=3, hidden_units=8, share_posterior=True)
        self.assertTrue(model.shares_posterior)
        self.assertFalse(any('posterior' in name for name in model.parameters()))
        breakdown = elbo(self.x, model)
        self.assertEqual(breakdown.recon.shape, (4,))
        np.testing.assert_allclose(breakdown.kl, 0.0, atol=1e-12)
        np.testing.assert_allclose(breakdown.elbo, breakdown.recon, atol=1e-12)

    def test_elbo_shapes_and_determinism(self):
        first = elbo(self.x, self.model, rng=np.random.default_rng(3))
        second = elbo(self.x, self.model, rng=np.random.default_rng(3))
        self.assertEqual(first.elbo.shape, (4,))
        np.testing.assert_array_equal(first.elbo, second.elbo)
        self.assertTrue(np.all(first.kl >= 0))
        np.testing.assert_array_equal(first.log_det, 0.0)

    def test_burn_in_drops_leading_steps(self):
        full = elbo(self.x, self.model, rng=np.random.default_rng(3))
        late = elbo(self.x, self.model, rng=np.random.default_rng(3), burn_in=2)
        self.assertTrue(np.all(late.kl <= full.kl + 1e-12))
        with self.assertRaisesRegex(Invalid, 'key: "burn_in"'):
            elbo(self.x, self.model, burn_in=6)

    def test_condition_on_switch(self):
        flow = FlowStack([difference_transform(2)])
        on_y = elbo(self.x, self.model, flow, rng=np.random.default_rng(3), condition_on='y')
        on_x = elbo(self.x, self.model, flow, rng=np.random.default_rng(3), condition_on='x')
        self.assertFalse(np.allclose(on_y.kl, on_x.kl))

        identity = FlowStack([AffineTransform(2, 'identity')])
        same_y = elbo(self.x, self.model, identity, rng=np.random.default_rng(3), condition_on='y')
        same_x = elbo(self.x, self.model, identity, rng=np.random.default_rng(3), condition_on='x')
        np.testing.assert_array_equal(same_y.elbo, same_x.elbo)
        with self.assertRaisesRegex(Invalid, 'key: "condition_on"'):
            elbo(self.x, self.model, condition_on='z')

    def test_mc_samples(self):
        single = elbo(self.x, self.model, rng=np.random.default_rng(3), mc_samples=1)
        many = elbo(self.x, self.model, rng=np.random.default_rng(3), mc_samples=8)
        self.assertEqual(many.elbo.shape, single.elbo.shape)
        with self.assertRaisesRegex(Invalid, 'key: "mc_samples"'):
            elbo(self.x, self.model, mc_samples=0)

    def test_dimension_mismatch(self):
        with self.assertRaises(DimensionMismatch):
            elbo(SequenceBatch(np.zeros((2, 3, 5))), self.model)

    def test_flow_log_det_enters_bound(self):
        """A constant flow scale of 2 costs T*D*log 2 nats and otherwise sees x/2"""
        transform = learned_transform(2, np.random.default_rng(0), window=1, hidden_layers=0)
        transform.conditioner['scale_b'].value[...] = np.log(2.0)
        with_flow = elbo(self.x, self.model, FlowStack([transform]), rng=np.random.default_rng(5))
        halved = elbo(self.x.with_data(self.x.data / 2.0), self.model, rng=np.random.default_rng(5))
        np.testing.assert_allclose(with_flow.elbo, halved.elbo - 12 * np.log(2.0), rtol=1e-10)

    def test_gradients_flow_to_every_network(self):
        flow = FlowStack([learned_transform(2, np.random.default_rng(2), hidden_units=4)])
        model = SlvmFlowModel(self.model, flow)
        for node in model.parameters().values():
            node.value += 0.05
        loss = model.objective(self.x.data, np.random.default_rng(0))
        grads = ad.backward(loss)
        self.assertEqual(len(grads), len(model.parameters()))

    def test_sample(self):
        y = slvm_sample(self.model, None, T=5, N=3, rng=np.random.default_rng(0))
        self.assertEqual(y.data.shape, (3, 5, 2))
        x = slvm_sample(self.model, FlowStack([difference_transform(2)]), T=5, N=3, rng=np.random.default_rng(0))
        np.testing.assert_allclose(x.data, np.cumsum(y.data, axis=1))


class TestLinearGaussian(unittest.TestCase):

    def setUp(self):
        self.y = np.random.default_rng(7).standard_normal((5, 6, 2)) * 1.5

    def test_exact_posterior_elbo_equals_kalman(self):
        model, kalman = exact_posterior_slvm()
        bound = closed_form_elbo(self.y, model)
        exact = kalman_log_likelihood(self.y, **kalman)
        np.testing.assert_allclose(bound.elbo, exact, rtol=0, atol=1e-6)

        late = closed_form_elbo(self.y, model, burn_in=2)
        np.testing.assert_allclose(late.elbo, kalman_log_likelihood(self.y, burn_in=2, **kalman), rtol=0, atol=1e-6)

    def test_exact_posterior_particle_filter_is_exact(self):
        """Every particle carries the same weight when the proposal is the exact posterior"""
        model, kalman = exact_posterior_slvm()
        estimate = iw_log_likelihood(SequenceBatch(self.y), model, num_particles=16, rng=np.random.default_rng(0))
        np.testing.assert_allclose(estimate, kalman_log_likelihood(self.y, **kalman), rtol=0, atol=1e-8)

    def test_bound_below_kalman_with_dynamics(self):
        A = np.array([[0.6, 0.1], [0.0, 0.5]])
        C = np.array([[1.0, 0.3], [-0.4, 0.8]])
        model = linear_slvm(2, A, 0.3 * np.eye(2), 0.4 * np.eye(2), C,
                            np.log([0.5, 0.8]), np.log([0.3, 0.4]), np.log([0.6, 0.5]))
        bound = closed_form_elbo(self.y, model).elbo
        # row-vector convention z_t = z_{t-1} @ A, so the transition matrix is A.T
        exact = kalman_log_likelihood(self.y, A.T, np.zeros(2), np.diag([0.5, 0.8]), C.T, np.zeros(2),
                                      np.diag([0.6, 0.5]))
        self.assertTrue(np.all(bound < exact))

        estimates = np.mean([iw_log_likelihood(SequenceBatch(self.y), model, num_particles=256,
                                               rng=np.random.default_rng(seed)) for seed in range(5)], axis=0)
        self.assertGreater(estimates.mean(), bound.mean())
        self.assertLess(abs(estimates.mean() - exact.mean()), 0.3)

    def dynamic_slvm(self):
        return linear_slvm(2, np.array([[0.6, 0.1], [0.0, 0.5]]), 0.3 * np.eye(2), 0.4 * np.eye(2),
                           np.array([[1.0, 0.3], [-0.4, 0.8]]), np.log([0.5, 0.8]), np.log([0.3, 0.4]),
                           np.log([0.6, 0.5]))

    def test_single_particle_is_an_elbo_sample(self):
        model = self.dynamic_slvm()
        copies = SequenceBatch(np.repeat(self.y[:1, :4], 4000, axis=0))
        estimates = iw_log_likelihood(copies, model, num_particles=1, rng=np.random.default_rng(0))
        closed = closed_form_elbo(self.y[:1, :4], model).elbo[0]
        stderr = estimates.std() / np.sqrt(len(estimates))
        self.assertLess(abs(estimates.mean() - closed), 4 * stderr)
        self.assertGreater(estimates.std(), 0.0)

    def test_particle_estimate_above_elbo_over_seeds(self):
        model = self.dynamic_slvm()
        y = SequenceBatch(self.y[:1, :4])
        iw = np.array([iw_log_likelihood(y, model, num_particles=64, rng=np.random.default_rng(seed))[0]
                       for seed in range(100)])
        bound = np.array([elbo(y, model, rng=np.random.default_rng(seed)).elbo[0] for seed in range(100)])
        stderr = np.sqrt(iw.var() / 100 + bound.var() / 100)
        self.assertGreaterEqual(iw.mean() - bound.mean(), -3 * stderr)

    def test_monte_carlo_elbo_matches_closed_form(self):
        model = linear_slvm(1, np.array([[0.5]]), np.array([[0.2]]), np.array([[0.5]]), np.array([[1.0]]),
                            np.log([0.8]), np.log([0.3]), np.log([1.0]))
        y = self.y[:3, :4, :1]
        closed = closed_form_elbo(y, model).elbo
        sampled = elbo(SequenceBatch(y), model, rng=np.random.default_rng(0), mc_samples=20000).elbo
        np.testing.assert_allclose(sampled, closed, atol=0.1)

    def test_sample_marginal_variance(self):
        A = np.array([[0.7, 0.2], [-0.1, 0.5]])
        C = np.array([[1.0, 0.4], [0.2, -0.6]])
        lv_p, lv_r = np.log([0.5, 0.3]), np.log([0.2, 0.4])
        model = linear_slvm(2, A, np.zeros((2, 2)), np.zeros((2, 2)), C, lv_p, np.zeros(2), lv_r)
        steps = 6
        y = slvm_sample(model, None, T=steps, N=10000, rng=np.random.default_rng(0)).data

        cov = np.zeros((2, 2))
        for t in range(steps):
            cov = A.T @ cov @ A + np.diag(np.exp(lv_p))
            expected = np.diag(C.T @ cov @ C) + np.exp(lv_r)
            np.testing.assert_allclose(y[:, t].var(axis=0), expected, rtol=0.1)

    def test_closed_form_needs_linear_networks(self):
        with self.assertRaisesRegex(Invalid, 'hidden_layers=0'):
            closed_form_elbo(self.y, SlvmModel(2, np.random.default_rng(0), latent_dim=2, hidden_units=4))


class TestFlowEquivalence(unittest.TestCase):

    def test_difference_flow_equals_frozen_af1(self):
        """A linear af1 conditioner frozen to (previous input, unit scale) is the difference transform"""
        dims, window = 2, 3
        config = ConditionerConfig(input_dim=dims, window=window, hidden_layers=0)
        net = HighwayMlp(config, np.random.default_rng(0), name='flow0')
        net['loc_W'].value[-dims:] = np.eye(dims)
        frozen = FlowStack([AffineTransform(dims, 'learned', net)])

        slvm = SlvmModel(dims, np.random.default_rng(1), latent_dim=3, hidden_units=8)
        x = np.random.default_rng(2).standard_normal((4, 8, dims))
        dx = SlvmFlowModel(slvm, FlowStack([difference_transform(dims)])).evaluate(x, np.random.default_rng(3), 3)
        af1 = SlvmFlowModel(slvm, frozen).evaluate(x, np.random.default_rng(3), 3)
        np.testing.assert_array_equal(dx, af1)


if __name__ == '__main__':
    unittest.main()
