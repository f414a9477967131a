"""Sequence batches, synthetic generators and CSV ingestion.

Every batch is a dense ``[N, T, D]`` float64 array. CSV files carry one row
per (sequence, step) under the header ``seq_id,t,<dim names...>``.
"""
import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import solve_discrete_lyapunov

from .exceptions import Invalid, ParseError, DimensionMismatch
from .extras import protected
from .schema import validate

logger = logging.getLogger(__name__)


@dataclass
class SequenceBatch:
    data: np.ndarray
    seq_ids: list = None
    dim_names: list = None
    standardization: dict = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise DimensionMismatch(f"sequence data must be [N, T, D], got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise Invalid("sequence data contains non finite entries")
        if self.seq_ids is None:
            self.seq_ids = [str(i) for i in range(self.N)]
        if self.dim_names is None:
            self.dim_names = [f"x{d}" for d in range(self.D)]
        self.seq_ids = [str(s) for s in self.seq_ids]
        self.dim_names = [str(d) for d in self.dim_names]
        if len(self.seq_ids) != self.N or len(self.dim_names) != self.D:
            raise DimensionMismatch(f"{len(self.seq_ids)} ids and {len(self.dim_names)} dim names "
                                    f"for data of shape {self.data.shape}")

    @property
    def N(self):
        return self.data.shape[0]

    @property
    def T(self):
        return self.data.shape[1]

    @property
    def D(self):
        return self.data.shape[2]

    def with_data(self, data):
        return replace(self, data=data, seq_ids=list(self.seq_ids), dim_names=list(self.dim_names))

    def take(self, index):
        index = np.asarray(index, dtype=int)
        return SequenceBatch(self.data[index], [self.seq_ids[i] for i in index], list(self.dim_names),
                             self.standardization)


KINEMATIC_SCHEMA = {
    'sigma': {'type': 'array', 'psd': True},
    'T': {'type': 'int', 'min_amount': 1},
    'N': {'type': 'int', 'min_amount': 1},
    'seed': {'type': 'int', 'min_amount': 0, 'default': 0},
}


@dataclass
class KinematicConfig:
    sigma: np.ndarray
    T: int
    N: int
    seed: int = 0

    def __post_init__(self):
        checked = validate({'sigma': self.sigma, 'T': self.T, 'N': self.N, 'seed': self.seed}, KINEMATIC_SCHEMA)
        self.sigma, self.T, self.N, self.seed = checked['sigma'], checked['T'], checked['N'], checked['seed']

    @property
    def D(self):
        return self.sigma.shape[0]


def _psd_factor(sigma):
    values, vectors = np.linalg.eigh(sigma)
    return vectors * np.sqrt(np.clip(values, 0.0, None))


def _time_difference(data):
    previous = np.concatenate([np.zeros_like(data[:, :1]), data[:, :-1]], axis=1)
    return data - previous


def gen_kinematic(cfg):
    """Noisy particle: ``x_t = x_{t-1} + u_t``, ``u_t = u_{t-1} + w_t`` from zero.

    The returned ``u`` and ``w`` are the first and second time differences of
    the returned ``x``, so double differencing ``x`` reproduces ``w`` bit for bit."""
    rng = np.random.default_rng(cfg.seed)
    noise = rng.standard_normal((cfg.N, cfg.T, cfg.D)) @ _psd_factor(cfg.sigma).T
    x = np.cumsum(np.cumsum(noise, axis=1), axis=1)
    u = _time_difference(x)
    w = _time_difference(u)
    names = [f"x{d}" for d in range(cfg.D)]
    return SequenceBatch(x, dim_names=names), SequenceBatch(u, dim_names=names), SequenceBatch(w, dim_names=names)


def stationary_ar_covariance(coeffs, noise_std):
    """Covariance of the lag vector ``[x_t, ..., x_{t-p+1}]`` of a stationary AR(p)."""
    p = coeffs.size
    companion = np.zeros((p, p))
    companion[0] = coeffs
    companion[1:, :-1] = np.eye(p - 1)
    forcing = np.zeros((p, p))
    forcing[0, 0] = noise_std ** 2
    return solve_discrete_lyapunov(companion, forcing)


@protected({
    'coeffs': {'type': 'stationary'},
    'noise_std': {'type': 'float', 'exclusive_min': 0.0, 'cast': True},
    'T': {'type': 'int', 'min_amount': 1},
    'N': {'type': 'int', 'min_amount': 1},
    'seed': {'type': 'int', 'min_amount': 0, 'default': 0},
    'D': {'type': 'int', 'min_amount': 1, 'default': 1},
})
def gen_ar(coeffs, noise_std, T, N, seed=0, D=1):
    """Stationary-initialised linear-Gaussian AR(p), independently per dimension."""
    p = coeffs.size
    rng = np.random.default_rng(seed)
    lag_cov = stationary_ar_covariance(coeffs, noise_std)
    factor = _psd_factor(lag_cov)
    # lag vector is newest first
    initial = (rng.standard_normal((N, D, p)) @ factor.T)[..., ::-1]
    steps = max(T, p)
    x = np.zeros((N, D, steps))
    x[..., :p] = initial
    innovations = noise_std * rng.standard_normal((N, D, steps))
    for t in range(p, steps):
        x[..., t] = x[..., t - p:t][..., ::-1] @ coeffs + innovations[..., t]
    return SequenceBatch(np.transpose(x[..., :T], (0, 2, 1)))


@protected({
    'N': {'type': 'int', 'min_amount': 1},
    'shifts': {'type': 'list', 'min_amount': 2, 'max_amount': 2, 'transform': 'tuple'},
    'scales': {'type': 'list', 'min_amount': 2, 'max_amount': 2, 'transform': 'tuple'},
    'seed': {'type': 'int', 'min_amount': 0, 'default': 0},
    'T': {'type': 'int', 'min_amount': 2, 'max_amount': 2, 'default': 2},
    'centers': {'type': 'list', 'min_amount': 2, 'max_amount': 2, 'default': (-2.0, 2.0)},
    'spread': {'type': 'float', 'exclusive_min': 0.0, 'cast': True, 'default': 0.5},
    'return_regimes': {'type': 'bool', 'default': False},
})
def gen_two_regime(N, shifts, scales, seed=0, T=2, centers=(-2.0, 2.0), spread=0.5, return_regimes=False):
    """Two steps where the first picks a regime and the second is a shifted, scaled copy.

    ``x_1`` comes from an equal-weight two-component mixture centred on
    ``centers``; ``x_2 = shifts[r] + scales[r] * eps``."""
    shifts, scales = np.asarray(shifts, dtype=np.float64), np.asarray(scales, dtype=np.float64)
    if np.any(scales <= 0):
        raise Invalid(f'key: "scales" contains invalid item "{scales.tolist()}": scales must be positive')
    rng = np.random.default_rng(seed)
    regimes = rng.integers(0, 2, size=N)
    x1 = np.asarray(centers, dtype=np.float64)[regimes] + spread * rng.standard_normal(N)
    x2 = shifts[regimes] + scales[regimes] * rng.standard_normal(N)
    batch = SequenceBatch(np.stack([x1, x2], axis=1)[:, :, None])
    return (batch, regimes) if return_regimes else batch


def save_csv(batch, path):
    with open(path, 'w', newline='', encoding='utf-8') as fh:
        writer = csv.writer(fh)
        writer.writerow(['seq_id', 't'] + list(batch.dim_names))
        for n, seq_id in enumerate(batch.seq_ids):
            for t in range(batch.T):
                writer.writerow([seq_id, t] + [repr(float(v)) for v in batch.data[n, t]])


def load_csv(path, length=None):
    """Read a batch written by :func:`save_csv`.

    Rows may come in any order; each sequence is sorted by ``t``. Sequences
    keep the order in which their id first appears. Sequences of unequal
    length are cropped to ``length`` (default: the shortest), shorter ones
    are dropped with a logged count."""
    with open(path, newline='', encoding='utf-8') as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"line 1: {path} is empty, expected header seq_id,t,<dims>")
        for column in ('seq_id', 't'):
            if column not in header:
                raise ParseError(f"line 1: missing column '{column}' in header {header}")
        if header[:2] != ['seq_id', 't'] or len(header) < 3:
            raise ParseError(f"line 1: header must be seq_id,t,<dim names...>, got {header}")
        dim_names = header[2:]

        sequences = {}
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"line {line}: expected {len(header)} cells got {len(row)}")
            seq_id = row[0]
            try:
                t = int(row[1])
            except ValueError:
                raise ParseError(f"line {line}: column 't' contains non integer cell '{row[1]}'")
            values = []
            for name, cell in zip(dim_names, row[2:]):
                try:
                    value = float(cell)
                except ValueError:
                    raise ParseError(f"line {line}: column '{name}' contains non numeric cell '{cell}'")
                if not math.isfinite(value):
                    raise ParseError(f"line {line}: column '{name}' contains non finite cell '{cell}'")
                values.append(value)
            steps = sequences.setdefault(seq_id, {})
            if t in steps:
                raise ParseError(f"line {line}: duplicate step t={t} for seq_id '{seq_id}'")
            steps[t] = values

    if not sequences:
        raise ParseError(f"{path} contains a header but no rows")

    for seq_id, steps in sequences.items():
        first = min(steps)
        missing = next((t for t in range(first, first + len(steps)) if t not in steps), None)
        if missing is not None:
            raise ParseError(f"{path}: seq_id '{seq_id}' is missing step t={missing}")

    lengths = {seq_id: len(steps) for seq_id, steps in sequences.items()}
    if length is None:
        length = min(lengths.values())
    kept = [seq_id for seq_id in sequences if lengths[seq_id] >= length]
    dropped = len(sequences) - len(kept)
    if dropped:
        logger.warning("dropped %d sequences shorter than %d steps from %s", dropped, length, path)
    if not kept:
        raise ParseError(f"{path} has no sequence with at least {length} steps")
    if any(lengths[s] != length for s in kept):
        logger.info("cropping sequences of %s to %d steps", path, length)

    data = np.array([[sequences[s][t] for t in sorted(sequences[s])[:length]] for s in kept], dtype=np.float64)
    return SequenceBatch(data, seq_ids=kept, dim_names=dim_names)


MANIFEST_SCHEMA = {
    'name': {'type': 'str', 'min_length': 1},
    'path': {'type': 'str', 'min_length': 1},
    'D': {'type': 'int', 'min_amount': 1},
    'dim_names': {'type': 'str', 'regex': r'^[^,]+$', 'nested': True, 'list': True},
    'N': {'type': 'int', 'min_amount': 1},
    'T': {'type': 'int', 'min_amount': 1},
}


def save_manifest(batch, csv_path, manifest_path, name):
    manifest = {'name': name, 'path': str(csv_path), 'D': batch.D, 'dim_names': list(batch.dim_names),
                'N': batch.N, 'T': batch.T}
    with open(manifest_path, 'w', encoding='utf-8') as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def load_manifest(manifest_path):
    try:
        with open(manifest_path, encoding='utf-8') as fh:
            manifest = validate(json.load(fh), MANIFEST_SCHEMA)
    except json.JSONDecodeError as exc:
        raise ParseError(f"line {exc.lineno}: {manifest_path} is not valid JSON: {exc.msg}")
    if len(manifest['dim_names']) != manifest['D']:
        raise DimensionMismatch(f"manifest lists {len(manifest['dim_names'])} dim names for D={manifest['D']}")
    return manifest


def crop_windows(batch, crop_len, rng):
    """Uniform random window of ``crop_len`` steps per sequence."""
    if crop_len < 1 or crop_len > batch.T:
        raise Invalid(f'key: "crop_len" contains invalid item "{crop_len}": must be between 1 and T={batch.T}')
    starts = rng.integers(0, batch.T - crop_len + 1, size=batch.N)
    index = starts[:, None] + np.arange(crop_len)[None, :]
    return batch.with_data(np.take_along_axis(batch.data, index[:, :, None], axis=1))


def default_crop_len(eval_len, num_transforms, window):
    return eval_len + num_transforms * window


def standardization_stats(batch):
    """Population mean/std per dimension; zero-variance dims keep std 1."""
    flat = batch.data.reshape(-1, batch.D)
    std = flat.std(axis=0)
    return {'mean': flat.mean(axis=0).tolist(), 'std': np.where(std < 1e-12, 1.0, std).tolist()}


def standardize(batch, stats=None):
    stats = stats or standardization_stats(batch)
    mean, std = np.asarray(stats['mean']), np.asarray(stats['std'])
    if mean.shape != (batch.D,) or std.shape != (batch.D,):
        raise DimensionMismatch(f"standardization stats for {mean.shape} dims applied to D={batch.D}")
    standardized = batch.with_data((batch.data - mean) / std)
    standardized.standardization = {'mean': mean.tolist(), 'std': std.tolist()}
    return standardized


def split(batch, fractions, seed):
    """Deterministic random partition of the sequences by ``fractions``."""
    fractions = np.asarray(fractions, dtype=np.float64)
    if fractions.ndim != 1 or np.any(fractions < 0) or abs(fractions.sum() - 1.0) > 1e-9:
        raise Invalid(f'key: "fractions" contains invalid item "{fractions.tolist()}": must be non negative and sum to 1')
    order = np.random.default_rng(seed).permutation(batch.N)
    bounds = np.floor(np.cumsum(fractions)[:-1] * batch.N + 1e-9).astype(int)
    return [batch.take(part) for part in np.split(order, bounds)]
