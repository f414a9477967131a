"""Command-line entry point: ``seqflow <subcommand> ...``.

Every subcommand writes a JSON report or a CSV file. Contract errors exit
with status 2, numeric failures with 3 and a failed gradient check with 1.
"""
import argparse
import json
import logging
import os
import sys

import numpy as np

from . import trainer
from .data import KinematicConfig, gen_kinematic, gen_ar, gen_two_regime, save_csv, save_manifest
from .exceptions import Invalid, NumericFailure

logger = logging.getLogger(__name__)

EXIT_INVALID = 2
EXIT_NUMERIC = 3


def parse_matrix(text):
    """``"1,0.5;0.5,1"`` -> 2x2 array; a bare number is a 1x1 matrix."""
    try:
        rows = [[float(cell) for cell in row.split(',')] for row in text.split(';') if row.strip()]
    except ValueError:
        raise Invalid(f'key: "sigma" contains invalid item "{text}": expected rows like "1,0;0,1"')
    if not rows or len({len(r) for r in rows}) != 1:
        raise Invalid(f'key: "sigma" contains invalid item "{text}": rows of unequal length')
    return np.array(rows)


def parse_floats(text, key):
    try:
        return [float(v) for v in text.split(',') if v.strip()]
    except ValueError:
        raise Invalid(f'key: "{key}" contains invalid item "{text}": expected comma separated numbers')


def write_json(report, path):
    text = json.dumps(report, indent=2, sort_keys=True)
    if path in (None, '-'):
        print(text)
        return
    with open(path, 'w', encoding='utf-8') as fh:
        fh.write(text + '\n')
    logger.info("wrote %s", path)


def _write_dataset(batch, path, name):
    save_csv(batch, path)
    manifest_path = os.path.splitext(path)[0] + '.json'
    save_manifest(batch, os.path.basename(path), manifest_path, name)
    logger.info("wrote %d sequences of %d steps to %s", batch.N, batch.T, path)


def cmd_gen_data(args):
    if args.kind == 'kinematic':
        sigma = parse_matrix(args.sigma) if args.sigma else np.eye(args.D)
        x, u, w = gen_kinematic(KinematicConfig(sigma=sigma, T=args.T, N=args.N, seed=args.seed))
        _write_dataset(x, args.out, 'kinematic')
        if args.with_differences:
            stem = os.path.splitext(args.out)[0]
            _write_dataset(u, f"{stem}_u.csv", 'kinematic-u')
            _write_dataset(w, f"{stem}_w.csv", 'kinematic-w')
    elif args.kind == 'ar':
        coeffs = parse_floats(args.coeffs, 'coeffs') if args.coeffs else [args.rho]
        batch = gen_ar(np.array(coeffs), args.noise_std, args.T, args.N, seed=args.seed, D=args.D)
        _write_dataset(batch, args.out, f"ar{len(coeffs)}")
    else:
        batch = gen_two_regime(args.N, parse_floats(args.shifts, 'shifts'), parse_floats(args.scales, 'scales'),
                               seed=args.seed)
        _write_dataset(batch, args.out, 'two-regime')
    return 0


def cmd_train(args):
    config = trainer.load_config(args.config)
    if args.iterations is not None:
        config['iterations'] = args.iterations
    ckpt, log_path = trainer.train(config, args.out_dir)
    logger.info("finished %d iterations, log in %s", ckpt.iteration, log_path)
    return 0


def cmd_eval(args):
    dataset = trainer.load_dataset(args.data)
    ckpt = trainer.checkpoint_load(args.checkpoint, expected_dim=dataset.D)
    report = trainer.evaluate(ckpt, dataset, args.unit, burn_in=args.burn_in, seed=args.seed)
    write_json(report.to_dict(), args.out)
    return 0


def cmd_analyze_corr(args):
    dataset = trainer.load_dataset(args.data)
    ckpt = trainer.checkpoint_load(args.checkpoint, expected_dim=dataset.D) if args.checkpoint else None
    write_json(trainer.analyze_corr(dataset, ckpt), args.out)
    return 0


def cmd_sample(args):
    ckpt = trainer.checkpoint_load(args.checkpoint)
    save_csv(trainer.sample(ckpt, args.T, args.N, args.seed), args.out)
    return 0


def cmd_gradcheck(args):
    config = trainer.load_config(args.config)
    report = trainer.gradcheck(config, coords=args.coords, tol=args.tol)
    write_json(report, args.out)
    return 0 if report['passed'] else 1


def cmd_gap(args):
    train_set, test_set = trainer.load_dataset(args.train), trainer.load_dataset(args.test)
    ckpt = trainer.checkpoint_load(args.checkpoint, expected_dim=train_set.D)
    write_json(trainer.gap_report(ckpt, train_set, test_set, args.unit), args.out)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog='seqflow', description='Affine autoregressive flows for sequences')
    parser.add_argument('--log-level', default='INFO', choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'])
    sub = parser.add_subparsers(dest='command', required=True)

    gen = sub.add_parser('gen-data', help='write a synthetic dataset as CSV plus manifest')
    gen.add_argument('--kind', required=True, choices=['kinematic', 'ar', 'two-regime'])
    gen.add_argument('--out', required=True)
    gen.add_argument('--T', type=int, default=50)
    gen.add_argument('--N', type=int, default=1000)
    gen.add_argument('--D', type=int, default=1)
    gen.add_argument('--seed', type=int, default=0)
    gen.add_argument('--rho', type=float, default=0.95)
    gen.add_argument('--coeffs', help='AR coefficients, comma separated; overrides --rho')
    gen.add_argument('--noise-std', type=float, default=0.3)
    gen.add_argument('--sigma', help='kinematic noise covariance, rows separated by ";"')
    gen.add_argument('--shifts', default='-1,1')
    gen.add_argument('--scales', default='0.5,2')
    gen.add_argument('--with-differences', action='store_true', help='also write u and w for kinematic data')
    gen.set_defaults(func=cmd_gen_data)

    train = sub.add_parser('train', help='fit a model from a JSON config')
    train.add_argument('--config', required=True)
    train.add_argument('--out-dir', required=True)
    train.add_argument('--iterations', type=int)
    train.set_defaults(func=cmd_train)

    evaluate = sub.add_parser('eval', help='per-sequence NLL of a dataset')
    evaluate.add_argument('--checkpoint', required=True)
    evaluate.add_argument('--data', required=True)
    evaluate.add_argument('--unit', choices=['per-dim', 'per-step', 'per_dim', 'per_step'])
    evaluate.add_argument('--burn-in', type=int)
    evaluate.add_argument('--seed', type=int)
    evaluate.add_argument('--out')
    evaluate.set_defaults(func=cmd_eval)

    corr = sub.add_parser('analyze-corr', help='lag-1 temporal correlation of data and flow output')
    corr.add_argument('--data', required=True)
    corr.add_argument('--checkpoint')
    corr.add_argument('--out')
    corr.set_defaults(func=cmd_analyze_corr)

    sample = sub.add_parser('sample', help='draw sequences from a trained model')
    sample.add_argument('--checkpoint', required=True)
    sample.add_argument('--T', type=int, required=True)
    sample.add_argument('--N', type=int, required=True)
    sample.add_argument('--seed', type=int, default=0)
    sample.add_argument('--out', required=True)
    sample.set_defaults(func=cmd_sample)

    grad = sub.add_parser('gradcheck', help='compare analytic and finite difference gradients')
    grad.add_argument('--config', required=True)
    grad.add_argument('--coords', type=int, default=4)
    grad.add_argument('--tol', type=float, default=1e-3)
    grad.add_argument('--out')
    grad.set_defaults(func=cmd_gradcheck)

    gap = sub.add_parser('gap', help='train/test NLL histograms and generalisation gap')
    gap.add_argument('--checkpoint', required=True)
    gap.add_argument('--train', required=True)
    gap.add_argument('--test', required=True)
    gap.add_argument('--unit', choices=['per-dim', 'per-step', 'per_dim', 'per_step'])
    gap.add_argument('--out')
    gap.set_defaults(func=cmd_gap)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    try:
        return args.func(args)
    except Invalid as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return EXIT_INVALID
    except NumericFailure as exc:
        logger.error("NumericFailure: %s", exc)
        return EXIT_NUMERIC
    except OSError as exc:
        logger.error("%s", exc)
        return EXIT_INVALID


if __name__ == '__main__':
    sys.exit(main())
