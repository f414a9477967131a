"""Training and evaluation loops, experiment configuration and checkpoints.

Configurations and checkpoints are JSON documents checked with the schema
walker in :mod:`seqflow.schema`; unknown keys are rejected.
"""
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import (load_csv, load_manifest, crop_windows, standardize, standardization_stats, split,
                   SequenceBatch)
from .exceptions import Invalid, DimensionMismatch, NumericFailure, CorruptFile, VersionMismatch
from .metrics import temporal_correlation, nll_normalize, generalization_gap
from .models import MODEL_KINDS, build_model, parameter_count, required_context
from .optim import Adam, AdamState
from .schema import validate

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 'seqflow-checkpoint/1'

EXPERIMENT_SCHEMA = {
    'model': {'type': 'str', 'choices': list(MODEL_KINDS)},
    'data': {'type': 'str', 'default': ''},
    'lr': {'type': 'float', 'exclusive_min': 0.0, 'cast': True, 'default': 1e-4},
    'batch_size': {'type': 'int', 'min_amount': 1, 'default': 16},
    'iterations': {'type': 'int', 'min_amount': 0, 'default': 1000},
    'crop_len': {'type': 'int', 'min_amount': 1, 'null_able': True, 'default': None},
    'eval_len': {'type': 'int', 'min_amount': 1, 'default': 10},
    'K': {'type': 'int', 'min_amount': 1, 'default': 3},
    'hidden_units': {'type': 'int', 'min_amount': 1, 'default': 256},
    'hidden_layers': {'type': 'int', 'min_amount': 0, 'default': 2},
    'Z': {'type': 'int', 'min_amount': 1, 'default': 16},
    'seed': {'type': 'int', 'min_amount': 0, 'default': 0},
    'unit': {'type': 'str', 'pre_transform': 'unit', 'choices': ['per_dim', 'per_step'], 'default': 'per_dim'},
    'mc_samples': {'type': 'int', 'min_amount': 1, 'default': 1},
    'log_every': {'type': 'int', 'min_amount': 1, 'default': 100},
    'corr_every': {'type': 'int', 'min_amount': 0, 'default': 0},
    'train_fraction': {'type': 'float', 'exclusive_min': 0.0, 'max_amount': 1.0, 'cast': True, 'default': 1.0},
    'test_fraction': {'type': 'float', 'min_amount': 0.0, 'exclusive_max': 1.0, 'cast': True, 'default': 0.0},
    'standardize': {'type': 'bool', 'default': True},
}

ARRAY_SCHEMA = {
    'shape': {'type': 'int', 'min_amount': 1, 'nested': True, 'list': True},
    'values': {'type': 'float', 'cast': True, 'nested': True, 'list': True},
}

CHECKPOINT_SCHEMA = {
    'version': {'type': 'str', 'choices': [CHECKPOINT_VERSION]},
    'config': {'type': 'dict', 'nested': EXPERIMENT_SCHEMA},
    'data_dim': {'type': 'int', 'min_amount': 1},
    'dim_names': {'type': 'str', 'nested': True, 'list': True},
    'iteration': {'type': 'int', 'min_amount': 0},
    'params': {'type': 'dict', 'nested': ARRAY_SCHEMA, 'aso_array': True},
    'optimizer': {'type': 'dict', 'nested': {
        'lr': {'type': 'float', 'cast': True},
        'beta1': {'type': 'float', 'cast': True},
        'beta2': {'type': 'float', 'cast': True},
        'eps': {'type': 'float', 'cast': True},
        'step_count': {'type': 'int', 'min_amount': 0},
        'm': {'type': 'dict', 'nested': ARRAY_SCHEMA, 'aso_array': True},
        'v': {'type': 'dict', 'nested': ARRAY_SCHEMA, 'aso_array': True},
    }},
    'standardization': {'type': 'dict', 'null_able': True, 'nested': {
        'mean': {'type': 'float', 'cast': True, 'nested': True, 'list': True},
        'std': {'type': 'float', 'cast': True, 'nested': True, 'list': True},
    }},
}


def resolve_config(raw):
    """Validate an experiment configuration and fill in the derived crop length."""
    config = validate(raw, EXPERIMENT_SCHEMA)
    context = required_context(config['model'], config['K'])
    if config['crop_len'] is None:
        config['crop_len'] = config['eval_len'] + max(context, config['K'])
    if config['eval_len'] + context > config['crop_len']:
        raise Invalid(f'key: "crop_len" contains invalid item "{config["crop_len"]}": '
                      f'eval_len {config["eval_len"]} plus {context} context steps do not fit')
    return config


def load_config(path):
    try:
        with open(path, encoding='utf-8') as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise Invalid(f"line {exc.lineno}: {path} is not valid JSON: {exc.msg}")
    config = resolve_config(raw)
    if config['data'] and not os.path.isabs(config['data']):
        config['data'] = os.path.normpath(os.path.join(os.path.dirname(os.path.abspath(path)), config['data']))
    return config


def load_dataset(ref):
    if not ref:
        raise Invalid('key: "data" contains invalid item "": no dataset configured')
    if ref.endswith('.json'):
        manifest = load_manifest(ref)
        path = manifest['path']
        if not os.path.isabs(path):
            path = os.path.join(os.path.dirname(os.path.abspath(ref)), path)
        batch = load_csv(path)
        if batch.D != manifest['D']:
            raise DimensionMismatch(f"manifest {ref} declares D={manifest['D']}, csv has D={batch.D}")
        return batch
    return load_csv(ref)


def burn_in_steps(config):
    return config['crop_len'] - config['eval_len']


def _encode_array(value):
    return {'shape': list(value.shape), 'values': [float(v) for v in value.reshape(-1)]}


def _decode_array(doc, name):
    values = np.array(doc['values'], dtype=np.float64)
    shape = tuple(doc['shape'])
    if values.size != int(np.prod(shape)):
        raise CorruptFile(f'key: "{name}" contains invalid item: {values.size} values for shape {shape}')
    return values.reshape(shape)


@dataclass
class Checkpoint:
    config: dict
    data_dim: int
    dim_names: list
    params: dict
    optimizer: AdamState
    iteration: int = 0
    standardization: dict = None
    version: str = CHECKPOINT_VERSION

    def to_dict(self):
        return {
            'version': self.version,
            'config': dict(self.config),
            'data_dim': self.data_dim,
            'dim_names': list(self.dim_names),
            'iteration': self.iteration,
            'params': {name: _encode_array(v) for name, v in self.params.items()},
            'optimizer': {
                'lr': self.optimizer.lr, 'beta1': self.optimizer.beta1, 'beta2': self.optimizer.beta2,
                'eps': self.optimizer.eps, 'step_count': self.optimizer.step_count,
                'm': {name: _encode_array(v) for name, v in self.optimizer.m.items()},
                'v': {name: _encode_array(v) for name, v in self.optimizer.v.items()},
            },
            'standardization': None if self.standardization is None else {
                'mean': [float(v) for v in self.standardization['mean']],
                'std': [float(v) for v in self.standardization['std']]},
        }

    @classmethod
    def from_dict(cls, doc):
        if not isinstance(doc, dict):
            raise CorruptFile(f"checkpoint must be a JSON object, got {type(doc).__name__}")
        if doc.get('version') != CHECKPOINT_VERSION:
            raise VersionMismatch(f"unknown checkpoint version {doc.get('version')!r}, expected {CHECKPOINT_VERSION}")
        try:
            doc = validate(doc, CHECKPOINT_SCHEMA)
        except Invalid as exc:
            raise CorruptFile(f"checkpoint does not match schema: {exc}") from exc
        opt = doc['optimizer']
        state = AdamState(lr=opt['lr'], beta1=opt['beta1'], beta2=opt['beta2'], eps=opt['eps'],
                          step_count=opt['step_count'],
                          m={k: _decode_array(v, k) for k, v in opt['m'].items()},
                          v={k: _decode_array(v, k) for k, v in opt['v'].items()})
        return cls(config=doc['config'], data_dim=doc['data_dim'], dim_names=doc['dim_names'],
                   params={k: _decode_array(v, k) for k, v in doc['params'].items()},
                   optimizer=state, iteration=doc['iteration'], standardization=doc['standardization'])


def checkpoint_dumps(ckpt):
    return json.dumps(ckpt.to_dict(), sort_keys=True, separators=(',', ':')) + '\n'


def checkpoint_save(ckpt, path):
    with open(path, 'w', encoding='utf-8') as fh:
        fh.write(checkpoint_dumps(ckpt))


def checkpoint_load(path, expected_dim=None):
    try:
        with open(path, encoding='utf-8') as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CorruptFile(f"line {exc.lineno}: {path} is not a readable checkpoint: {exc.msg}")
    except UnicodeDecodeError as exc:
        raise CorruptFile(f"{path} is not a readable checkpoint: {exc}")
    ckpt = Checkpoint.from_dict(doc)
    if expected_dim is not None and expected_dim != ckpt.data_dim:
        raise DimensionMismatch(f"checkpoint {path} was trained on D={ckpt.data_dim}, dataset has D={expected_dim}")
    return ckpt


def _model_rngs(seed):
    return ad.split_rng(ad.make_rng(seed), 3)


def restore_model(ckpt):
    model_rng, _, _ = _model_rngs(ckpt.config['seed'])
    model = build_model(ckpt.config, ckpt.data_dim, model_rng)
    params = model.parameters()
    if set(params) != set(ckpt.params):
        raise CorruptFile(f"checkpoint parameters {sorted(set(params) ^ set(ckpt.params))} do not match the model")
    for name, node in params.items():
        if node.value.shape != ckpt.params[name].shape:
            raise CorruptFile(f'key: "{name}" contains invalid item: shape {ckpt.params[name].shape}, '
                              f'expected {node.value.shape}')
        node.value[...] = ckpt.params[name]
    return model


def training_split(dataset, config):
    """Training sequences after the held-out and sub-sampling splits."""
    train = dataset
    if config['test_fraction'] > 0:
        train = split(dataset, [1.0 - config['test_fraction'], config['test_fraction']], config['seed'])[0]
    if config['train_fraction'] < 1.0:
        keep = max(1, int(round(config['train_fraction'] * train.N)))
        train = split(train, [keep / train.N, 1.0 - keep / train.N], config['seed'] + 1)[0]
    return train


def held_out_split(dataset, config):
    if config['test_fraction'] <= 0:
        return None
    return split(dataset, [1.0 - config['test_fraction'], config['test_fraction']], config['seed'])[1]


def _log_scale_offset(standardization, dims):
    if standardization is None:
        return 0.0
    return float(np.sum(np.log(standardization['std'][:dims])))


def _snapshot(config, dataset, model, optimizer, iteration, stats):
    return Checkpoint(config=dict(config), data_dim=dataset.D, dim_names=list(dataset.dim_names),
                      params={name: p.value.copy() for name, p in model.parameters().items()},
                      optimizer=AdamState(lr=optimizer.state.lr, beta1=optimizer.state.beta1,
                                          beta2=optimizer.state.beta2, eps=optimizer.state.eps,
                                          step_count=optimizer.state.step_count,
                                          m={k: v.copy() for k, v in optimizer.state.m.items()},
                                          v={k: v.copy() for k, v in optimizer.state.v.items()}),
                      iteration=iteration, standardization=stats)


def flow_output(model, x):
    """``y`` from the model's data flow (``x`` itself when there is none) and the steps it is defined on."""
    if model.data_flow is None:
        return x, 0
    with ad.no_grad():
        y, _ = model.data_flow.inverse(x)
    return y.value, model.data_flow.context_steps


def train(config, out_dir=None, data=None):
    """Fit a model with Adam on random crops; returns ``(checkpoint, log_path)``."""
    config = resolve_config(config)
    model_rng, data_rng, noise_rng = _model_rngs(config['seed'])
    dataset = data if data is not None else load_dataset(config['data'])
    train_set = training_split(dataset, config)
    if train_set.T < config['crop_len']:
        raise Invalid(f'key: "crop_len" contains invalid item "{config["crop_len"]}": sequences have T={train_set.T}')
    stats = standardization_stats(train_set) if config['standardize'] else None
    train_std = standardize(train_set, stats) if stats else train_set

    model = build_model(config, dataset.D, model_rng)
    optimizer = Adam(model.parameters(), lr=config['lr'])
    burn_in = burn_in_steps(config)
    offset = _log_scale_offset(stats, dataset.D) * config['eval_len']
    logger.info("training %s on %d sequences (D=%d), %d parameters", config['model'], train_std.N,
                dataset.D, parameter_count(model))

    log_path = os.path.join(out_dir, 'train_log.jsonl') if out_dir else None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        open(log_path, 'w', encoding='utf-8').close()

    for iteration in range(config['iterations']):
        index = data_rng.choice(train_std.N, size=config['batch_size'], replace=train_std.N < config['batch_size'])
        batch = crop_windows(train_std.take(index), config['crop_len'], data_rng)
        try:
            loss = model.objective(batch.data, noise_rng, burn_in)
            optimizer.zero_grad()
            ad.backward(loss)
        except NumericFailure as exc:
            last_good = _snapshot(config, dataset, model, optimizer, iteration, stats)
            where = ''
            if out_dir:
                where = os.path.join(out_dir, 'last_good.json')
                checkpoint_save(last_good, where)
            logger.error("non finite objective at iteration %d: %s", iteration, exc)
            raise NumericFailure(f"iteration {iteration}: {exc}; last good checkpoint {where or 'not written'}") from exc
        optimizer.step()

        step = iteration + 1
        if step % config['log_every'] == 0 or step == config['iterations']:
            record = {'iteration': step, 'unit': config['unit'],
                      'objective': nll_normalize(float(loss.value) + offset, config['eval_len'], dataset.D,
                                                 config['unit'])}
            if config['corr_every'] and step % config['corr_every'] == 0:
                y, start = flow_output(model, train_std.data)
                record['corr_y'] = temporal_correlation(y[:, start:]).corr
            logger.info("iteration %d objective %.6f", step, record['objective'])
            if log_path:
                with open(log_path, 'a', encoding='utf-8') as fh:
                    fh.write(json.dumps(record, sort_keys=True) + '\n')

    ckpt = _snapshot(config, dataset, model, optimizer, config['iterations'], stats)
    if out_dir:
        checkpoint_save(ckpt, os.path.join(out_dir, 'checkpoint.json'))
    return ckpt, log_path


def _prepare(ckpt, dataset):
    if dataset.D != ckpt.data_dim:
        raise DimensionMismatch(f"checkpoint trained on D={ckpt.data_dim}, dataset has D={dataset.D}")
    return standardize(dataset, ckpt.standardization) if ckpt.standardization else dataset


@dataclass
class EvalReport:
    nlls: list
    normalized: list
    summary: dict = field(default_factory=dict)

    def to_dict(self):
        return {'summary': self.summary, 'per_sequence': self.normalized, 'per_sequence_total': self.nlls}


def evaluate(ckpt, dataset, unit=None, burn_in=None, seed=None):
    """Per-sequence NLL in data space (an ELBO-based upper bound for SLVM models)."""
    config = ckpt.config
    unit = (unit or config['unit']).replace('-', '_')
    model = restore_model(ckpt)
    x = _prepare(ckpt, dataset)
    burn_in = burn_in_steps(config) if burn_in is None else burn_in
    steps = dataset.T - burn_in
    if steps < 1:
        raise Invalid(f'key: "burn_in" contains invalid item "{burn_in}": sequences have only T={dataset.T}')
    rng = ad.make_rng(config['seed'] if seed is None else seed)
    nlls = model.evaluate(x.data, rng, burn_in) + _log_scale_offset(ckpt.standardization, dataset.D) * steps
    normalized = [nll_normalize(float(v), steps, dataset.D, unit) for v in nlls]
    summary = {
        'model': config['model'], 'bound': model.bound, 'unit': unit, 'mean_nll': float(np.mean(normalized)),
        'mean_total_nll': float(np.mean(nlls)), 'N': dataset.N, 'T_eval': steps, 'D': dataset.D,
        'burn_in': burn_in, 'parameter_count': parameter_count(model), 'iteration': ckpt.iteration,
    }
    return EvalReport(nlls=[float(v) for v in nlls], normalized=normalized, summary=summary)


def analyze_corr(dataset, ckpt=None):
    """``corr_x`` of the data and, with a checkpoint, ``corr_y`` through the model's data flow."""
    if ckpt is None:
        return {'corr_x': temporal_correlation(dataset).to_dict()}
    model = restore_model(ckpt)
    x = _prepare(ckpt, dataset).data
    y, start = flow_output(model, x)
    return {'corr_x': temporal_correlation(x[:, start:]).to_dict(),
            'corr_y': temporal_correlation(y[:, start:]).to_dict(),
            'model': ckpt.config['model'], 'steps_skipped': start}


def sample(ckpt, T, N, seed):
    model = restore_model(ckpt)
    with ad.no_grad():
        data = model.sample(T, N, ad.make_rng(seed))
    if ckpt.standardization:
        data = data * np.asarray(ckpt.standardization['std']) + np.asarray(ckpt.standardization['mean'])
    return SequenceBatch(data, dim_names=ckpt.dim_names)


def gap_report(ckpt, train_set, test_set, unit=None):
    train_eval = evaluate(ckpt, train_set, unit)
    test_eval = evaluate(ckpt, test_set, unit)
    report = generalization_gap(train_eval.normalized, test_eval.normalized).to_dict()
    report.update({'model': ckpt.config['model'], 'bound': train_eval.summary['bound'],
                   'unit': train_eval.summary['unit']})
    return report


def gradients_agree(analytic, numeric, tol=1e-3, atol=1e-7):
    """Per coordinate: relative error within ``tol``, or both values negligible."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    negligible = (np.abs(analytic) <= atol) & (np.abs(numeric) <= atol)
    return (ad.relative_error(analytic, numeric) <= tol) | negligible


def gradcheck(config, data=None, coords=4, h=1e-5, tol=1e-3, atol=1e-7, sequences=4):
    """Compare backward() with central differences on every parameter group.

    Parameters are perturbed away from their zero-initialised heads and the
    model's noise is frozen by re-seeding for every evaluation. A coordinate
    passes when its relative error is below ``tol`` or both estimates are
    below ``atol`` in magnitude."""
    config = resolve_config(config)
    model_rng, data_rng, _ = _model_rngs(config['seed'])
    dataset = data if data is not None else load_dataset(config['data'])
    model = build_model(config, dataset.D, model_rng)
    params = model.parameters()
    for node in params.values():
        node.value += 0.1 * data_rng.standard_normal(node.value.shape)

    x = standardize(dataset.take(np.arange(min(sequences, dataset.N))))
    x = crop_windows(x, min(config['crop_len'], x.T), data_rng).data
    burn_in = min(burn_in_steps(config), x.shape[1] - 1)
    noise_seed = config['seed'] + 7

    loss = model.objective(x, ad.make_rng(noise_seed), burn_in)
    ad.backward(loss)
    analytic = {name: node.grad for name, node in params.items()}

    def objective(_):
        with ad.no_grad():
            return model.objective(x, ad.make_rng(noise_seed), burn_in).value

    chosen = {name: data_rng.choice(node.value.size, size=min(coords, node.value.size), replace=False).tolist()
              for name, node in params.items()}
    numeric = ad.finite_difference_gradient(objective, {n: p.value for n, p in params.items()}, h=h, coords=chosen)

    groups = {}
    for name in params:
        mask = np.isfinite(numeric[name])
        a, b = analytic[name][mask], numeric[name][mask]
        rel = ad.relative_error(a, b)
        ok = gradients_agree(a, b, tol, atol)
        groups[name] = {'max_relative_error': float(rel.max()), 'passed': bool(ok.all())}
        if not ok.all():
            logger.warning("gradient check failed for %s: max relative error %.3g", name, rel.max())
    return {'model': config['model'], 'groups': groups, 'passed': all(g['passed'] for g in groups.values())}
