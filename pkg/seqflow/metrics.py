"""Dataset statistics: lag-1 temporal correlation, Gaussian multi-information,
NLL normalisation, generalisation gaps and a Kalman-filter likelihood.

All moments are population (1/N) estimates.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .exceptions import Invalid, NumericFailure
from .extras import protected

logger = logging.getLogger(__name__)

DEGENERATE_STD = 1e-12
RIDGE = 1e-6
NEGATIVE_MI_WARNING = -0.01


def _as_array(data):
    return np.asarray(getattr(data, 'data', data), dtype=np.float64)


@dataclass
class CorrReport:
    mean: np.ndarray
    std: np.ndarray
    xi: np.ndarray
    corr: float
    excluded_dims: int = 0

    def to_dict(self):
        return {'corr': self.corr, 'mean': self.mean.tolist(), 'std': self.std.tolist(),
                'xi': [None if np.isnan(v) else v for v in self.xi.tolist()], 'excluded_dims': self.excluded_dims}


def temporal_correlation(data):
    """Average over dimensions of ``E[(x_t - mu)(x_{t+1} - mu)] / sigma^2``.

    Dimensions with a standard deviation below 1e-12 are left out and
    counted in ``excluded_dims``; their ``xi`` is NaN."""
    x = _as_array(data)
    if x.ndim != 3 or x.shape[0] < 2 or x.shape[1] < 2:
        raise Invalid(f'key: "data" contains invalid item of shape {x.shape}: need N >= 2 sequences of T >= 2 steps')
    flat = x.reshape(-1, x.shape[2])
    mean, std = flat.mean(axis=0), flat.std(axis=0)
    centred = x - mean
    valid = std >= DEGENERATE_STD
    if not valid.any():
        raise Invalid("empty report: every dimension has zero variance")
    lagged = (centred[:, :-1] * centred[:, 1:]).reshape(-1, x.shape[2]).mean(axis=0)
    xi = np.full(x.shape[2], np.nan)
    xi[valid] = lagged[valid] / std[valid] ** 2
    return CorrReport(mean=mean, std=std, xi=xi, corr=float(xi[valid].mean()), excluded_dims=int((~valid).sum()))


@dataclass
class MultiInfoReport:
    marginal_entropy_sum: float
    joint_entropy: float
    multi_information: float
    step_entropies: list = field(default_factory=list)

    def to_dict(self):
        return {'marginal_entropy_sum': self.marginal_entropy_sum, 'joint_entropy': self.joint_entropy,
                'multi_information': self.multi_information, 'step_entropies': list(self.step_entropies)}


def _gaussian_entropy(cov):
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0:
        raise NumericFailure("covariance is singular after ridge regularisation")
    return 0.5 * (cov.shape[0] * np.log(2.0 * np.pi * np.e) + logdet)


def multi_information_gaussian(data):
    """``sum_t H(x_t) - H(x_1:T)`` in nats under a Gaussian fit."""
    x = _as_array(data)
    n, steps, dims = x.shape
    if n <= steps * dims:
        raise Invalid(f'key: "data" contains invalid item: need more than T*D={steps * dims} sequences, got {n}')
    joint = np.cov(x.reshape(n, steps * dims), rowvar=False, bias=True).reshape(steps * dims, steps * dims)
    joint = joint + RIDGE * np.eye(steps * dims)
    step_entropies = [_gaussian_entropy(joint[t * dims:(t + 1) * dims, t * dims:(t + 1) * dims])
                      for t in range(steps)]
    joint_entropy = _gaussian_entropy(joint)
    info = float(sum(step_entropies) - joint_entropy)
    if info < NEGATIVE_MI_WARNING:
        logger.warning("gaussian multi-information estimate is negative: %.6g nats", info)
    return MultiInfoReport(marginal_entropy_sum=float(sum(step_entropies)), joint_entropy=float(joint_entropy),
                           multi_information=info, step_entropies=[float(h) for h in step_entropies])


@protected({
    'total_nll': {'type': 'float', 'cast': True},
    'T_eval': {'type': 'int', 'min_amount': 1},
    'D': {'type': 'int', 'min_amount': 1},
    'unit': {'type': 'str', 'pre_transform': 'unit', 'choices': ['per_dim', 'per_step']},
})
def nll_normalize(total_nll, T_eval, D, unit):
    if unit == 'per_dim':
        return total_nll / (T_eval * D)
    return total_nll / T_eval


@dataclass
class GapReport:
    gap: float
    train_mean: float
    test_mean: float
    bin_edges: list
    train_counts: list
    test_counts: list

    def to_dict(self):
        return {'gap': self.gap, 'train_mean': self.train_mean, 'test_mean': self.test_mean,
                'bins': {'edges': self.bin_edges, 'count': len(self.bin_edges) - 1},
                'train_counts': self.train_counts, 'test_counts': self.test_counts}


def generalization_gap(train_nlls, test_nlls, bins=20):
    """``mean(test) - mean(train)`` with fixed-width histograms over the joint range."""
    train, test = np.asarray(train_nlls, dtype=np.float64), np.asarray(test_nlls, dtype=np.float64)
    if train.size == 0 or test.size == 0:
        raise Invalid('key: "nlls" contains invalid item "[]": both lists must be non empty')
    low, high = min(train.min(), test.min()), max(train.max(), test.max())
    if low == high:
        low, high = low - 0.5, high + 0.5
    edges = np.linspace(low, high, bins + 1)
    return GapReport(gap=float(test.mean() - train.mean()), train_mean=float(train.mean()),
                     test_mean=float(test.mean()), bin_edges=edges.tolist(),
                     train_counts=np.histogram(train, edges)[0].tolist(),
                     test_counts=np.histogram(test, edges)[0].tolist())


def kalman_log_likelihood(y, F, a, Q, H, c, R, burn_in=0):
    """Exact ``log p(y_burn_in:T | y_<burn_in)`` per sequence for a linear-Gaussian state space.

    ``z_t = F z_{t-1} + a + N(0, Q)``, ``y_t = H z_t + c + N(0, R)`` with
    ``z_0 = 0`` known."""
    y = np.asarray(y, dtype=np.float64)
    n, steps, dims = y.shape
    F, Q, H, R = (np.atleast_2d(np.asarray(m, dtype=np.float64)) for m in (F, Q, H, R))
    a, c = np.asarray(a, dtype=np.float64), np.asarray(c, dtype=np.float64)
    mean = np.zeros((n, F.shape[0]))
    cov = np.zeros_like(F)
    total = np.zeros(n)
    for t in range(steps):
        mean = mean @ F.T + a
        cov = F @ cov @ F.T + Q
        innovation_cov = H @ cov @ H.T + R
        factor = cho_factor(innovation_cov, lower=True)
        innovation = y[:, t] - mean @ H.T - c
        solved = cho_solve(factor, innovation.T).T
        if t >= burn_in:
            logdet = 2.0 * np.log(np.diag(factor[0])).sum()
            total += -0.5 * (dims * np.log(2.0 * np.pi) + logdet + np.sum(innovation * solved, axis=1))
        gain = cov @ H.T
        mean = mean + solved @ gain.T
        cov = cov - gain @ cho_solve(factor, gain.T)
    return total
