"""The model menu: standalone flows and SLVMs with optional flow pre-processing."""
import logging

import numpy as np

from . import autodiff as ad
from .flow import FlowStack, StandardNormal, learned_transform, difference_transform
from .latent_flow import LatentFlow
from .slvm import SlvmModel
from .exceptions import Invalid

logger = logging.getLogger(__name__)

MODEL_KINDS = ('af1', 'af2', 'slvm', 'slvm-af1', 'slvm-dx', 'slvm-latent-af')


def required_context(kind, window):
    """Leading steps a model needs before its conditioning windows are full."""
    return {'af1': window, 'af2': 2 * window, 'slvm': 0, 'slvm-af1': window,
            'slvm-dx': 1, 'slvm-latent-af': 0}[kind]


class FlowModel:
    """Flow stack over a standard-normal base; exact likelihood."""
    bound = False

    def __init__(self, stack, base=None):
        self.data_flow = stack
        self.base = base or StandardNormal()

    def parameters(self):
        return self.data_flow.parameters()

    def log_prob(self, x, rng=None, burn_in=None):
        return self.data_flow.log_prob(x, self.base, burn_in)

    def objective(self, x, rng, burn_in=None):
        return -self.log_prob(x, rng, burn_in).mean()

    def evaluate(self, x, rng=None, burn_in=None):
        with ad.no_grad():
            return -self.log_prob(x, rng, burn_in).value

    def sample(self, T, N, rng):
        return self.data_flow.forward(self.base.sample(rng, (N, T, self.data_flow.dim)))


class SlvmFlowModel:
    """SLVM on top of an optional flow; trained and evaluated through the ELBO."""
    bound = True

    def __init__(self, slvm, flow=None, mc_samples=1):
        self.slvm = slvm
        self.data_flow = flow
        self.mc_samples = mc_samples

    def parameters(self):
        params = self.slvm.parameters()
        if self.data_flow is not None:
            params.update(self.data_flow.parameters())
        return params

    def elbo(self, x, rng, burn_in=None, mc_samples=None):
        recon, kl, log_det = self.slvm.elbo_terms(x, self.data_flow, rng, mc_samples or self.mc_samples,
                                                  burn_in or 0)
        return recon - kl - log_det

    def objective(self, x, rng, burn_in=None):
        return -self.elbo(x, rng, burn_in).mean()

    def evaluate(self, x, rng=None, burn_in=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        with ad.no_grad():
            return -self.elbo(x, rng, burn_in).value

    def sample(self, T, N, rng):
        return self.slvm.sample(T, N, rng, flow=self.data_flow)


def build_model(config, data_dim, rng):
    kind = config['model']
    if kind not in MODEL_KINDS:
        raise Invalid(f'key: "model" contains invalid item "{kind}": not in valid choices {list(MODEL_KINDS)}')
    window = config['K']
    net = {'hidden_layers': config['hidden_layers'], 'hidden_units': config['hidden_units']}

    def flow_layer(index):
        return learned_transform(data_dim, rng, window=window, nonlinearity='elu', name=f"flow{index}", **net)

    if kind in ('af1', 'af2'):
        return FlowModel(FlowStack([flow_layer(i) for i in range(1 if kind == 'af1' else 2)]))

    flow = None
    if kind == 'slvm-af1':
        flow = FlowStack([flow_layer(0)])
    elif kind == 'slvm-dx':
        flow = FlowStack([difference_transform(data_dim)])
    latent_flow = None
    if kind == 'slvm-latent-af':
        latent_flow = LatentFlow.learned(config['Z'], rng, window=window, nonlinearity='elu', **net)
    slvm = SlvmModel(data_dim, rng, latent_dim=config['Z'], nonlinearity='tanh', latent_flow=latent_flow, **net)
    return SlvmFlowModel(slvm, flow, mc_samples=config['mc_samples'])


def parameter_count(model):
    return int(sum(p.value.size for p in model.parameters().values()))
