"""Affine autoregressive flow on the latent prior.

``z_t = alpha(z_<t) + beta(z_<t) * u_t`` with ``u_t`` drawn from the base
prior. ``latent_skip`` hard-codes ``alpha = z_{t-1}``, ``beta = 1``.
"""
import logging

import numpy as np

from . import autodiff as ad
from .conditioner import ConditionerConfig, HighwayMlp, AffineStepParams, conditioner_forward
from .exceptions import Invalid, DimensionMismatch
from .slvm import GaussianParams, gaussian_log_prob

logger = logging.getLogger(__name__)

LATENT_MODES = ('learned', 'latent_skip', 'identity')


class LatentFlow:

    def __init__(self, latent_dim, mode='learned', conditioner=None, window=3):
        if mode not in LATENT_MODES:
            raise Invalid(f'key: "mode" contains invalid item "{mode}": not in valid choices {list(LATENT_MODES)}')
        if mode == 'learned':
            if conditioner is None:
                raise Invalid('key: "conditioner" contains invalid item "None": learned latent flows need a conditioner')
            if conditioner.config.input_dim != latent_dim or conditioner.config.head_dim != latent_dim:
                raise DimensionMismatch(f"latent conditioner built for Z={conditioner.config.input_dim} used with Z={latent_dim}")
            window = conditioner.config.window
        self.latent_dim = latent_dim
        self.mode = mode
        self.conditioner = conditioner if mode == 'learned' else None
        self.window = window

    @classmethod
    def learned(cls, latent_dim, rng, window=3, hidden_layers=2, hidden_units=256, nonlinearity='elu',
                name='latent_flow'):
        config = ConditionerConfig(input_dim=latent_dim, window=window, hidden_layers=hidden_layers,
                                   hidden_units=hidden_units, nonlinearity=nonlinearity)
        return cls(latent_dim, 'learned', HighwayMlp(config, rng, name=name))

    def parameters(self):
        return self.conditioner.parameters() if self.conditioner is not None else {}

    def step_params(self, z_context):
        """``alpha`` and ``log beta`` from the flattened previous ``window`` latents."""
        z_context = ad.as_node(z_context)
        if z_context.shape[-1] != self.window * self.latent_dim:
            raise DimensionMismatch(f"latent context of length {z_context.shape[-1]}, "
                                    f"expected {self.window * self.latent_dim}")
        if self.mode == 'learned':
            return conditioner_forward(self.conditioner, z_context)
        zeros = ad.constant(np.zeros(z_context.shape[:-1] + (self.latent_dim,)))
        if self.mode == 'latent_skip':
            return AffineStepParams(shift=z_context[..., -self.latent_dim:], log_scale=zeros)
        return AffineStepParams(shift=zeros, log_scale=zeros)

    def prior_params(self, base, z_context):
        """The prior over ``z_t`` is again a diagonal Gaussian: mean ``alpha + beta*mu``, log variance ``lv + 2 log beta``."""
        if self.mode == 'identity':
            return base
        step = self.step_params(z_context)
        mean = step.shift + step.scale * base.mean
        return GaussianParams(mean=mean, log_var=base.log_var + 2.0 * step.log_scale)


def latent_prior_log_prob(z_t, z_context, base_prior_params, lf):
    """``log p_base(u_t) - sum log beta`` with ``u_t = (z_t - alpha) / beta``."""
    step = lf.step_params(z_context)
    u = (ad.as_node(z_t) - step.shift) / step.scale
    log_prob = gaussian_log_prob(u, base_prior_params) - step.log_scale.sum(axis=-1)
    return log_prob.value if not isinstance(z_t, ad.Node) else log_prob


def latent_prior_sample(z_context, base_prior_params, lf, rng):
    with ad.no_grad():
        step = lf.step_params(z_context)
        mean = np.asarray(ad.as_node(base_prior_params.mean).value)
        std = np.exp(0.5 * ad.as_node(base_prior_params.log_var).value)
        u = mean + std * rng.standard_normal(mean.shape)
        return step.shift.value + np.exp(step.log_scale.value) * u
