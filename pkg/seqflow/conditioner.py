"""Windowed fully-connected conditioners with highway connectivity.

A conditioner maps the previous ``window`` inputs (flattened oldest to
newest) to two heads: a shift and a log-scale. With ``hidden_layers=0`` the
heads act directly on the context, which gives a linear-capacity
conditioner.
"""
import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .exceptions import Invalid, DimensionMismatch
from .schema import validate

logger = logging.getLogger(__name__)

LOG_SCALE_BOUND = 7.0

NONLINEARITIES = {
    'elu': ad.elu,
    'tanh': ad.tanh,
    'relu': ad.relu,
}

CONDITIONER_SCHEMA = {
    'input_dim': {'type': 'int', 'min_amount': 1},
    'head_dim': {'type': 'int', 'min_amount': 1, 'optional': True},
    'window': {'type': 'int', 'min_amount': 1, 'default': 3},
    'hidden_layers': {'type': 'int', 'min_amount': 0, 'default': 2},
    'hidden_units': {'type': 'int', 'min_amount': 1, 'default': 256},
    'nonlinearity': {'type': 'str', 'choices': list(NONLINEARITIES), 'default': 'elu'},
}


@dataclass
class ConditionerConfig:
    input_dim: int
    head_dim: int = None
    window: int = 3
    hidden_layers: int = 2
    hidden_units: int = 256
    nonlinearity: str = 'elu'

    def __post_init__(self):
        fields = {k: v for k, v in vars(self).items() if v is not None}
        for key, value in validate(fields, CONDITIONER_SCHEMA).items():
            setattr(self, key, value)
        if self.head_dim is None:
            self.head_dim = self.input_dim

    @property
    def context_dim(self):
        return self.window * self.input_dim

    @property
    def output_dim(self):
        return 2 * self.head_dim


@dataclass
class ContextWindow:
    """Flattened ``[..., K*D]`` inputs of steps ``t-K .. t-1`` and a validity flag per step."""
    values: np.ndarray
    valid: np.ndarray


@dataclass
class AffineStepParams:
    shift: ad.Node
    log_scale: ad.Node

    @property
    def scale(self):
        return ad.exp(self.log_scale)


class HighwayMlp:

    def __init__(self, config, rng, name='net', zero_heads=('loc', 'scale')):
        self.config = config
        self.name = name
        self.params = {}
        width = config.context_dim
        for layer in range(config.hidden_layers):
            self._dense(f"W{layer}", f"b{layer}", width, config.hidden_units, rng)
            self._dense(f"Wg{layer}", f"bg{layer}", width, config.hidden_units, rng)
            # closed gates at init lean on the carry path
            self.params[f"{name}.bg{layer}"].value[...] = -1.0
            if width != config.hidden_units:
                self._add(f"P{layer}", rng.standard_normal((width, config.hidden_units)) / np.sqrt(width))
            width = config.hidden_units
        for head in ('loc', 'scale'):
            self._dense(f"{head}_W", f"{head}_b", width, config.head_dim, rng, zero=head in zero_heads)

    def _add(self, key, value):
        self.params[f"{self.name}.{key}"] = ad.parameter(value, name=f"{self.name}.{key}")

    def _dense(self, weight, bias, fan_in, fan_out, rng, zero=False):
        scale = 0.0 if zero else 1.0 / np.sqrt(fan_in)
        self._add(weight, scale * rng.standard_normal((fan_in, fan_out)))
        self._add(bias, np.zeros(fan_out))

    def __getitem__(self, key):
        return self.params[f"{self.name}.{key}"]

    def parameters(self):
        return dict(self.params)

    def __call__(self, inputs):
        """Return the raw ``(loc, log_scale)`` heads for ``inputs[..., context_dim]``."""
        inputs = ad.as_node(inputs)
        if inputs.shape[-1] != self.config.context_dim:
            raise DimensionMismatch(f"{self.name} expects context of length {self.config.context_dim}, "
                                    f"got {inputs.shape[-1]}")
        activation = NONLINEARITIES[self.config.nonlinearity]
        hidden = inputs
        for layer in range(self.config.hidden_layers):
            candidate = activation(hidden @ self[f"W{layer}"] + self[f"b{layer}"])
            gate = ad.sigmoid(hidden @ self[f"Wg{layer}"] + self[f"bg{layer}"])
            key = f"{self.name}.P{layer}"
            carry = hidden @ self.params[key] if key in self.params else hidden
            hidden = gate * candidate + (1.0 - gate) * carry
        return hidden @ self["loc_W"] + self["loc_b"], hidden @ self["scale_W"] + self["scale_b"]


def conditioner_forward(net, ctx):
    """Shift and clamped log-scale for a context window (or a context node)."""
    values = ctx.values if isinstance(ctx, ContextWindow) else ctx
    loc, log_scale = net(values)
    return AffineStepParams(shift=loc, log_scale=ad.clip(log_scale, -LOG_SCALE_BOUND, LOG_SCALE_BOUND))


def assemble_context(batch, t, window):
    """Context of step ``t`` (0-based): inputs ``t-K .. t-1``, zero-filled before the start."""
    if not 0 <= t < batch.T:
        raise Invalid(f'key: "t" contains invalid item "{t}": must be between 0 and {batch.T - 1}')
    if window < 1:
        raise Invalid(f'key: "window" contains invalid item "{window}": integer is less then 1')
    values = np.zeros((batch.N, window, batch.D))
    valid = np.zeros(window, dtype=bool)
    for k in range(window):
        step = t - window + k
        if step >= 0:
            values[:, k] = batch.data[:, step]
            valid[k] = True
    return ContextWindow(values=values.reshape(batch.N, window * batch.D), valid=valid)


def rolling_context(x, window):
    """Differentiable contexts for every step: ``[N, T, D] -> [N, T, K*D]``."""
    x = ad.as_node(x)
    n, steps, dims = x.shape
    padded = ad.concat([ad.constant(np.zeros((n, window, dims))), x], axis=1)
    return ad.concat([padded[:, k:k + steps, :] for k in range(window)], axis=-1)
