"""Affine autoregressive transforms across time.

The inverse (normalizing) direction ``y_t = (x_t - mu(x_<t)) / sigma(x_<t)``
is computed for all steps at once; the forward (generative) direction
``x_t = mu(x_<t) + sigma(x_<t) * y_t`` runs step by step.

Log-determinants are stored as ``sum log sigma``, the log-Jacobian of x with
respect to y, and are subtracted from the base log-density.
"""
import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .conditioner import (ConditionerConfig, HighwayMlp, AffineStepParams, conditioner_forward,
                          rolling_context)
from .data import SequenceBatch
from .exceptions import Invalid, DimensionMismatch
from .extras import protected

logger = logging.getLogger(__name__)

FLOW_MODES = ('learned', 'difference', 'identity')

LOG_2PI = np.log(2.0 * np.pi)


class StandardNormal:
    """Independent N(0, 1) over every step and dimension."""

    def log_prob(self, y):
        y = ad.as_node(y)
        return (-0.5 * (y * y) - 0.5 * LOG_2PI).sum(axis=-1)

    def sample(self, rng, shape):
        return rng.standard_normal(shape)


class AffineTransform:

    def __init__(self, dim, mode='learned', conditioner=None, window=3):
        if mode not in FLOW_MODES:
            raise Invalid(f'key: "mode" contains invalid item "{mode}": not in valid choices {list(FLOW_MODES)}')
        if mode == 'learned' and conditioner is None:
            raise Invalid('key: "conditioner" contains invalid item "None": learned transforms need a conditioner')
        if conditioner is not None:
            if conditioner.config.input_dim != dim or conditioner.config.head_dim != dim:
                raise DimensionMismatch(f"conditioner built for D={conditioner.config.input_dim} used with D={dim}")
            window = conditioner.config.window
        self.dim = dim
        self.mode = mode
        self.conditioner = conditioner if mode == 'learned' else None
        self.window = window

    def parameters(self):
        return self.conditioner.parameters() if self.conditioner is not None else {}

    def step_params(self, context):
        """Affine parameters from contexts ``[..., K*D]``."""
        context = ad.as_node(context)
        if self.mode == 'learned':
            return conditioner_forward(self.conditioner, context)
        zeros = ad.constant(np.zeros(context.shape[:-1] + (self.dim,)))
        if self.mode == 'difference':
            return AffineStepParams(shift=context[..., -self.dim:], log_scale=zeros)
        return AffineStepParams(shift=zeros, log_scale=zeros)

    def inverse(self, x):
        """``x[N, T, D] -> (y, log_det_steps[N, T])`` as graph nodes."""
        x = ad.as_node(x)
        if x.shape[-1] != self.dim:
            raise DimensionMismatch(f"transform for D={self.dim} applied to data with D={x.shape[-1]}")
        if self.mode == 'identity':
            return x, ad.constant(np.zeros(x.shape[:2]))
        params = self.step_params(rolling_context(x, self.window))
        y = (x - params.shift) / params.scale
        return y, params.log_scale.sum(axis=-1)

    def forward(self, y):
        """Generate ``x`` from ``y`` one step at a time (numpy arrays, no graph)."""
        y = np.asarray(y, dtype=np.float64)
        if self.mode == 'identity':
            return y.copy()
        n, steps, dims = y.shape
        x = np.zeros_like(y)
        history = np.zeros((n, self.window + steps, dims))
        with ad.no_grad():
            for t in range(steps):
                context = history[:, t:t + self.window].reshape(n, self.window * dims)
                params = self.step_params(context)
                x[:, t] = params.shift.value + np.exp(params.log_scale.value) * y[:, t]
                history[:, self.window + t] = x[:, t]
        return x


def learned_transform(dim, rng, window=3, hidden_layers=2, hidden_units=256, nonlinearity='elu', name='flow'):
    config = ConditionerConfig(input_dim=dim, window=window, hidden_layers=hidden_layers,
                               hidden_units=hidden_units, nonlinearity=nonlinearity)
    return AffineTransform(dim, 'learned', HighwayMlp(config, rng, name=name))


def difference_transform(dim):
    return AffineTransform(dim, 'difference', window=1)


def identity_transform(dim):
    return AffineTransform(dim, 'identity', window=1)


@protected({
    'rho': {'type': 'float', 'exclusive_min': -1.0, 'exclusive_max': 1.0, 'cast': True},
    'noise_std': {'type': 'float', 'exclusive_min': 0.0, 'cast': True},
    'dim': {'type': 'int', 'min_amount': 1, 'default': 1},
})
def closed_form_linear_flow(rho, noise_std, dim=1):
    """Whitening transform of a stationary AR(1): ``mu_t = rho * x_{t-1}``, ``sigma = noise_std``."""
    if not -7.0 <= np.log(noise_std) <= 7.0:
        raise Invalid(f'key: "noise_std" contains invalid item "{noise_std}": log scale outside [-7, 7]')
    config = ConditionerConfig(input_dim=dim, window=1, hidden_layers=0)
    net = HighwayMlp(config, np.random.default_rng(0), name='linear')
    net['loc_W'].value[...] = rho * np.eye(dim)
    net['scale_b'].value[...] = np.log(noise_std)
    return AffineTransform(dim, 'learned', net)


@dataclass
class TransformResult:
    y: SequenceBatch
    log_det_fwd: np.ndarray
    log_det_steps: np.ndarray


class FlowStack:
    """Ordered transforms; ``inverse`` applies them first to last."""

    def __init__(self, transforms):
        if not transforms:
            raise Invalid('key: "transforms" contains invalid item "[]": a stack needs at least one transform')
        dims = {t.dim for t in transforms}
        if len(dims) != 1:
            raise DimensionMismatch(f"transforms in a stack disagree on D: {sorted(dims)}")
        self.transforms = list(transforms)
        self.dim = dims.pop()

    def __len__(self):
        return len(self.transforms)

    @property
    def window(self):
        return max(t.window for t in self.transforms)

    @property
    def context_steps(self):
        """Leading steps without a full context for every transform."""
        return sum(t.window for t in self.transforms if t.mode != 'identity')

    def parameters(self):
        params = {}
        for transform in self.transforms:
            params.update(transform.parameters())
        return params

    def inverse(self, x):
        y = ad.as_node(x)
        total = None
        for transform in self.transforms:
            y, log_det = transform.inverse(y)
            total = log_det if total is None else total + log_det
        return y, total

    def forward(self, y):
        x = np.asarray(y, dtype=np.float64)
        for transform in reversed(self.transforms):
            x = transform.forward(x)
        return x

    def log_prob(self, x, base, burn_in=None):
        """Per-sequence ``log p(x)`` over steps ``burn_in..T-1`` as a graph node."""
        burn_in = self.context_steps if burn_in is None else burn_in
        y, log_det = self.inverse(x)
        steps = y.shape[1]
        if not 0 <= burn_in < steps:
            raise Invalid(f'key: "burn_in" contains invalid item "{burn_in}": must leave at least one of {steps} steps')
        per_step = base.log_prob(y) - log_det
        return per_step[:, burn_in:].sum(axis=1)


def _as_stack(transform):
    return transform if isinstance(transform, FlowStack) else FlowStack([transform])


def inverse_transform(x, transform):
    with ad.no_grad():
        y, log_det = _as_stack(transform).inverse(x.data)
    return TransformResult(y=x.with_data(y.value), log_det_fwd=log_det.value.sum(axis=1),
                           log_det_steps=log_det.value)


def forward_transform(y, transform):
    return y.with_data(_as_stack(transform).forward(y.data))


def stack_inverse(x, stack):
    result = inverse_transform(x, stack)
    return result.y, result.log_det_fwd


def flow_log_prob(x, stack, base=None, burn_in=None):
    with ad.no_grad():
        return _as_stack(stack).log_prob(x.data, base or StandardNormal(), burn_in).value


def flow_sample(stack, base, T, N, rng):
    if T < 1 or N < 1:
        raise Invalid(f'key: "T" contains invalid item "{T}": need T >= 1 and N >= 1')
    stack = _as_stack(stack)
    base = base or StandardNormal()
    y = base.sample(rng, (N, T, stack.dim))
    return SequenceBatch(stack.forward(y))
