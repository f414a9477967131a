"""Markov sequential latent variable model with a filtering posterior.

Prior ``p(z_t | z_{t-1})``, approximate posterior ``q(z_t | z_{t-1}, y_t)`` and
likelihood ``p(y_t | z_t)`` are diagonal Gaussians produced by highway
networks. ``y`` is the data after an optional flow pre-processor; the flow's
log-determinant enters the bound as ``elbo = recon - kl - log_det``.
"""
import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import autodiff as ad
from .conditioner import ConditionerConfig, HighwayMlp
from .data import SequenceBatch
from .exceptions import Invalid, DimensionMismatch

logger = logging.getLogger(__name__)

LOG_VAR_BOUND = 10.0
LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class GaussianParams:
    mean: object
    log_var: object

    @classmethod
    def from_heads(cls, mean, raw_log_var):
        return cls(mean=mean, log_var=ad.clip(raw_log_var, -LOG_VAR_BOUND, LOG_VAR_BOUND))

    @property
    def dim(self):
        return np.shape(_value(self.mean))[-1]

    def std(self):
        return ad.exp(0.5 * ad.as_node(self.log_var))


def _value(x):
    return x.value if isinstance(x, ad.Node) else np.asarray(x, dtype=np.float64)


def _is_graph(*items):
    return any(isinstance(i, ad.Node) for i in items)


def gaussian_log_prob(x, params):
    """Diagonal Gaussian log-density summed over the last axis."""
    x, mean, log_var = ad.as_node(x), ad.as_node(params.mean), ad.as_node(params.log_var)
    diff = x - mean
    return (-0.5 * (LOG_2PI + log_var + diff * diff / ad.exp(log_var))).sum(axis=-1)


def gaussian_kl(q, p):
    """``KL(q || p)`` for diagonal Gaussians, summed over the last axis."""
    if q.dim != p.dim:
        raise DimensionMismatch(f"KL between Gaussians of dimension {q.dim} and {p.dim}")
    graph = _is_graph(q.mean, q.log_var, p.mean, p.log_var)
    mq, lq = ad.as_node(q.mean), ad.as_node(q.log_var)
    mp, lp = ad.as_node(p.mean), ad.as_node(p.log_var)
    diff = mq - mp
    kl = (0.5 * (lp - lq + (ad.exp(lq) + diff * diff) / ad.exp(lp) - 1.0)).sum(axis=-1)
    return kl if graph else kl.value


@dataclass
class ElboBreakdown:
    recon: np.ndarray
    kl: np.ndarray
    log_det: np.ndarray

    @property
    def elbo(self):
        return self.recon - self.kl - self.log_det


class SlvmModel:

    def __init__(self, data_dim, rng, latent_dim=16, hidden_layers=2, hidden_units=256, nonlinearity='tanh',
                 latent_flow=None, share_posterior=False, name='slvm'):
        self.data_dim = data_dim
        self.latent_dim = latent_dim
        self.latent_flow = latent_flow
        if latent_flow is not None and latent_flow.latent_dim != latent_dim:
            raise DimensionMismatch(f"latent flow for Z={latent_flow.latent_dim} used with Z={latent_dim}")

        def net(input_dim, head_dim, label):
            config = ConditionerConfig(input_dim=input_dim, head_dim=head_dim, window=1,
                                       hidden_layers=hidden_layers, hidden_units=hidden_units,
                                       nonlinearity=nonlinearity)
            return HighwayMlp(config, rng, name=f"{name}.{label}", zero_heads=('scale',))

        self.prior_net = net(latent_dim, latent_dim, 'prior')
        self.posterior_net = self.prior_net if share_posterior else net(latent_dim + data_dim, latent_dim, 'posterior')
        self.likelihood_net = net(latent_dim, data_dim, 'likelihood')

    @property
    def shares_posterior(self):
        return self.posterior_net is self.prior_net

    def parameters(self):
        params = {}
        for part in (self.prior_net, self.posterior_net, self.likelihood_net):
            params.update(part.parameters())
        if self.latent_flow is not None:
            params.update(self.latent_flow.parameters())
        return params

    def initial_history(self, batch_size):
        window = self.latent_flow.window if self.latent_flow is not None else 1
        return [ad.constant(np.zeros((batch_size, self.latent_dim)))] * window

    def prior(self, history):
        """Prior over ``z_t`` given the latent history (newest last)."""
        base = GaussianParams.from_heads(*self.prior_net(history[-1]))
        if self.latent_flow is None:
            return base
        return self.latent_flow.prior_params(base, ad.concat(history[-self.latent_flow.window:], axis=-1))

    def posterior(self, z_prev, obs):
        if self.shares_posterior:
            return GaussianParams.from_heads(*self.posterior_net(z_prev))
        return GaussianParams.from_heads(*self.posterior_net(ad.concat([z_prev, obs], axis=-1)))

    def likelihood(self, z):
        return GaussianParams.from_heads(*self.likelihood_net(z))

    def elbo_terms(self, x, flow, rng, mc_samples=1, burn_in=0, condition_on='y'):
        """Per-sequence ``(recon, kl, log_det)`` graph nodes averaged over ``mc_samples``."""
        if mc_samples < 1:
            raise Invalid(f'key: "mc_samples" contains invalid item "{mc_samples}": integer is less then 1')
        if condition_on not in ('x', 'y'):
            raise Invalid(f'key: "condition_on" contains invalid item "{condition_on}": not in valid choices [\'x\', \'y\']')
        x = ad.as_node(x)
        n, steps, dims = x.shape
        if dims != self.data_dim:
            raise DimensionMismatch(f"model for D={self.data_dim} applied to data with D={dims}")
        if not 0 <= burn_in < steps:
            raise Invalid(f'key: "burn_in" contains invalid item "{burn_in}": must leave at least one of {steps} steps')

        if flow is None:
            y, log_det = x, ad.constant(np.zeros((n, steps)))
        else:
            y, log_det = flow.inverse(x)
        obs = y if condition_on == 'y' else x
        if mc_samples > 1:
            y, obs = ad.concat([y] * mc_samples, axis=0), ad.concat([obs] * mc_samples, axis=0)

        batch = n * mc_samples
        history = self.initial_history(batch)
        recon, kl = [], []
        for t in range(steps):
            prior = self.prior(history)
            posterior = self.posterior(history[-1], obs[:, t])
            eps = rng.standard_normal((batch, self.latent_dim))
            z = ad.as_node(posterior.mean) + posterior.std() * eps
            if t >= burn_in:
                recon.append(gaussian_log_prob(y[:, t], self.likelihood(z)))
                kl.append(gaussian_kl(posterior, prior))
            history = history[1:] + [z]

        def per_sequence(terms):
            total = terms[0]
            for term in terms[1:]:
                total = total + term
            return total.reshape(mc_samples, n).mean(axis=0)

        return per_sequence(recon), per_sequence(kl), log_det[:, burn_in:].sum(axis=1)

    def sample(self, T, N, rng, flow=None):
        if T < 1 or N < 1:
            raise Invalid(f'key: "T" contains invalid item "{T}": need T >= 1 and N >= 1')
        y = np.zeros((N, T, self.data_dim))
        with ad.no_grad():
            history = self.initial_history(N)
            for t in range(T):
                prior = self.prior(history)
                z = _value(prior.mean) + np.exp(0.5 * _value(prior.log_var)) * rng.standard_normal((N, self.latent_dim))
                lik = self.likelihood(z)
                y[:, t] = _value(lik.mean) + np.exp(0.5 * _value(lik.log_var)) * rng.standard_normal((N, self.data_dim))
                history = history[1:] + [ad.constant(z)]
        return flow.forward(y) if flow is not None else y


def elbo(x, model, flow=None, rng=None, mc_samples=1, burn_in=0, condition_on='y'):
    rng = rng if rng is not None else np.random.default_rng(0)
    with ad.no_grad():
        recon, kl, log_det = model.elbo_terms(x.data, flow, rng, mc_samples, burn_in, condition_on)
    return ElboBreakdown(recon=recon.value, kl=kl.value, log_det=log_det.value)


def slvm_sample(model, flow, T, N, rng):
    return SequenceBatch(model.sample(T, N, rng, flow=flow))


def _linear_heads(net, label):
    if net.config.hidden_layers != 0:
        raise Invalid(f'key: "{label}" contains invalid item: closed form needs linear networks (hidden_layers=0)')
    if np.any(net['scale_W'].value != 0):
        raise Invalid(f'key: "{label}" contains invalid item: closed form needs a constant log variance head')
    log_var = np.clip(net['scale_b'].value, -LOG_VAR_BOUND, LOG_VAR_BOUND)
    return net['loc_W'].value, net['loc_b'].value, log_var


def closed_form_elbo(y, model, burn_in=0):
    """Exact expectation of the filtering ELBO for a linear-Gaussian model.

    All three networks must be linear with constant log variances; the
    posterior's marginal over ``z_{t-1}`` is propagated in closed form, so no
    sampling is involved. ``y`` is a ``[N, T, D]`` array (already through any
    flow)."""
    if model.latent_flow is not None and model.latent_flow.mode == 'learned':
        raise Invalid('key: "latent_flow" contains invalid item "learned": closed form needs a linear prior')
    if model.shares_posterior:
        raise Invalid('key: "posterior" contains invalid item: closed form needs an observation-conditioned posterior')
    A, a, lv_p = _linear_heads(model.prior_net, 'prior')
    if model.latent_flow is not None and model.latent_flow.mode == 'latent_skip':
        A = A + np.eye(model.latent_dim)
    B, b, lv_q = _linear_heads(model.posterior_net, 'posterior')
    C, c, lv_r = _linear_heads(model.likelihood_net, 'likelihood')
    Bz, By = B[:model.latent_dim], B[model.latent_dim:]

    y = np.asarray(y, dtype=np.float64)
    n, steps, _ = y.shape
    mean = np.zeros((n, model.latent_dim))
    cov = np.zeros((model.latent_dim, model.latent_dim))
    recon = np.zeros(n)
    kl = np.zeros(n)
    var_p, var_q, var_r = np.exp(lv_p), np.exp(lv_q), np.exp(lv_r)
    for t in range(steps):
        gap = Bz - A
        diff = mean @ gap + y[:, t] @ By + b - a
        expected_sq = diff ** 2 + np.diag(gap.T @ cov @ gap)
        step_kl = 0.5 * np.sum(lv_p - lv_q + (var_q + expected_sq) / var_p - 1.0, axis=-1)

        mean = mean @ Bz + y[:, t] @ By + b
        cov = Bz.T @ cov @ Bz + np.diag(var_q)
        resid = y[:, t] - mean @ C - c
        spread = np.diag(C.T @ cov @ C)
        step_recon = np.sum(-0.5 * (LOG_2PI + lv_r + (resid ** 2 + spread) / var_r), axis=-1)
        if t >= burn_in:
            recon += step_recon
            kl += step_kl
    return ElboBreakdown(recon=recon, kl=kl, log_det=np.zeros(n))


def _resample(log_weights, rng):
    """Multinomial ancestor indices per row of ``log_weights[N, P]``."""
    weights = np.exp(log_weights - logsumexp(log_weights, axis=1, keepdims=True))
    cdf = np.cumsum(weights, axis=1)
    cdf[:, -1] = 1.0
    uniforms = rng.random(log_weights.shape)
    ancestors = np.stack([np.searchsorted(row, u, side='right') for row, u in zip(cdf, uniforms)])
    return np.minimum(ancestors, log_weights.shape[1] - 1)


def iw_log_likelihood(x, model, flow=None, rng=None, num_particles=64, burn_in=0):
    """Particle-filter estimate of ``log p(x)`` with the filtering posterior as proposal.

    Each step contributes the log-mean-exp of its incremental importance
    weights; particles are resampled after every step. One particle gives a
    single-sample ELBO with a sampled KL."""
    if num_particles < 1:
        raise Invalid(f'key: "num_particles" contains invalid item "{num_particles}": integer is less then 1')
    rng = rng if rng is not None else np.random.default_rng(0)
    with ad.no_grad():
        if flow is None:
            y, log_det = x.data, np.zeros(x.data.shape[:2])
        else:
            y_node, log_det_node = flow.inverse(x.data)
            y, log_det = y_node.value, log_det_node.value
        n, steps, _ = y.shape
        if not 0 <= burn_in < steps:
            raise Invalid(f'key: "burn_in" contains invalid item "{burn_in}": must leave at least one of {steps} steps')
        particles = num_particles
        reps = np.repeat(y, particles, axis=0)
        history = model.initial_history(n * particles)
        total = np.zeros(n)
        for t in range(steps):
            prior = model.prior(history)
            posterior = model.posterior(history[-1], ad.constant(reps[:, t]))
            q_mean, q_log_var = _value(posterior.mean), _value(posterior.log_var)
            z = q_mean + np.exp(0.5 * q_log_var) * rng.standard_normal(q_mean.shape)
            lik = model.likelihood(z)
            log_w = (_value(gaussian_log_prob(reps[:, t], lik))
                     + _value(gaussian_log_prob(z, prior))
                     - _value(gaussian_log_prob(z, GaussianParams(q_mean, q_log_var))))
            log_w = log_w.reshape(n, particles)
            if t >= burn_in:
                total += logsumexp(log_w, axis=1) - np.log(particles)
            ancestors = (_resample(log_w, rng) + particles * np.arange(n)[:, None]).reshape(-1)
            history = [ad.constant(_value(h)[ancestors]) for h in history[1:]] + [ad.constant(z[ancestors])]
    return total - log_det[:, burn_in:].sum(axis=1)
