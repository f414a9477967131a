import json
import os
import sys
import tempfile
import unittest
from unittest import mock

import numpy as np
from deepdiff import DeepDiff as ddiff

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '../')))

from seqflow import autodiff as ad
from seqflow.data import SequenceBatch, gen_ar, save_csv, save_manifest
from seqflow.exceptions import Invalid, NumericFailure, CorruptFile, VersionMismatch, DimensionMismatch
from seqflow.models import MODEL_KINDS
from seqflow.trainer import (resolve_config, load_config, load_dataset, train, evaluate, checkpoint_save,
                             checkpoint_load, checkpoint_dumps, analyze_corr, sample, gap_report, gradcheck,
                             gradients_agree, burn_in_steps, CHECKPOINT_VERSION)

LOG_2PI_E = np.log(2.0 * np.pi * np.e)


def small_config(model='af1', **overrides):
    config = {'model': model, 'hidden_units': 8, 'hidden_layers': 1, 'Z': 3, 'K': 2, 'eval_len': 4,
              'iterations': 3, 'batch_size': 4, 'lr': 1e-3, 'log_every': 1}
    config.update(overrides)
    return config


def toy_data(N=12, T=10, D=2, seed=0):
    return SequenceBatch(np.random.default_rng(seed).standard_normal((N, T, D)) * 2.0 + 1.0)


class TestConfig(unittest.TestCase):

    def test_defaults(self):
        config = resolve_config({'model': 'af2'})
        self.assertEqual(config['lr'], 1e-4)
        self.assertEqual(config['batch_size'], 16)
        self.assertEqual(config['unit'], 'per_dim')
        # eval_len plus two windows of context
        self.assertEqual(config['crop_len'], 16)
        self.assertEqual(burn_in_steps(config), 6)
        self.assertEqual(resolve_config({'model': 'slvm'})['crop_len'], 13)

    def test_unit_accepts_dashes(self):
        self.assertEqual(resolve_config({'model': 'af1', 'unit': 'per-step'})['unit'], 'per_step')

    def test_unknown_key(self):
        with self.assertRaisesRegex(Invalid, 'invalid keys'):
            resolve_config({'model': 'af1', 'learning_rate': 0.1})

    def test_invalid_values(self):
        with self.assertRaisesRegex(Invalid, 'key: "model"'):
            resolve_config({'model': 'maf'})
        with self.assertRaisesRegex(Invalid, 'key: "lr"'):
            resolve_config({'model': 'af1', 'lr': 0})
        with self.assertRaisesRegex(Invalid, 'is not set'):
            resolve_config({})

    def test_crop_too_small_for_context(self):
        with self.assertRaisesRegex(Invalid, 'key: "crop_len"'):
            resolve_config({'model': 'af2', 'K': 3, 'eval_len': 10, 'crop_len': 12})

    def test_relative_data_path(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'exp.json')
            with open(path, 'w', encoding='utf-8') as fh:
                json.dump({'model': 'af1', 'data': 'data/x.csv'}, fh)
            self.assertEqual(load_config(path)['data'], os.path.join(os.path.abspath(tmp), 'data', 'x.csv'))

    def test_broken_json(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'exp.json')
            with open(path, 'w', encoding='utf-8') as fh:
                fh.write('{\n"model": ')
            with self.assertRaisesRegex(Invalid, 'line 2'):
                load_config(path)

    def test_load_dataset_from_manifest(self):
        batch = toy_data(N=3, T=4)
        with tempfile.TemporaryDirectory() as tmp:
            save_csv(batch, os.path.join(tmp, 'toy.csv'))
            save_manifest(batch, 'toy.csv', os.path.join(tmp, 'toy.json'), 'toy')
            np.testing.assert_array_equal(load_dataset(os.path.join(tmp, 'toy.json')).data, batch.data)
        with self.assertRaisesRegex(Invalid, 'key: "data"'):
            load_dataset('')


class TestTraining(unittest.TestCase):

    def test_untrained_flow_is_standard_normal_in_data_space(self):
        """With zero heads the flow is the identity, so NLL per dim is 0.5 log(2 pi e) on N(0,1) data"""
        data = SequenceBatch(np.random.default_rng(0).standard_normal((1000, 103, 1)))
        ckpt, _ = train(small_config('af1', K=3, eval_len=10, hidden_units=16, iterations=0), data=data)
        report = evaluate(ckpt, data)
        self.assertEqual(report.summary['T_eval'], 100)
        self.assertAlmostEqual(report.summary['mean_nll'], 0.5 * LOG_2PI_E, delta=0.01)
        self.assertFalse(report.summary['bound'])
        self.assertEqual(report.summary['iteration'], 0)

    def test_training_is_deterministic(self):
        data = toy_data()
        first, _ = train(small_config('slvm-af1'), data=data)
        second, _ = train(small_config('slvm-af1'), data=data)
        self.assertEqual(checkpoint_dumps(first), checkpoint_dumps(second))
        self.assertEqual(first.iteration, 3)
        self.assertEqual(first.optimizer.step_count, 3)

    def test_training_changes_parameters(self):
        data = toy_data()
        untrained, _ = train(small_config(iterations=0), data=data)
        trained, _ = train(small_config(iterations=5), data=data)
        moved = [name for name in trained.params if not np.array_equal(trained.params[name], untrained.params[name])]
        self.assertTrue(moved)

    def test_log_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            _, log_path = train(small_config(corr_every=3), out_dir=tmp, data=toy_data())
            with open(log_path, encoding='utf-8') as fh:
                records = [json.loads(line) for line in fh]
            self.assertEqual([r['iteration'] for r in records], [1, 2, 3])
            self.assertTrue(all(r['unit'] == 'per_dim' for r in records))
            self.assertNotIn('corr_y', records[0])
            self.assertIn('corr_y', records[2])
            self.assertTrue(os.path.exists(os.path.join(tmp, 'checkpoint.json')))

    def test_sequences_shorter_than_crop(self):
        with self.assertRaisesRegex(Invalid, 'key: "crop_len"'):
            train(small_config('af2'), data=toy_data(T=7))

    def test_gradients_are_cleared_every_iteration(self):
        real_backward = ad.backward
        seen = []

        def checking_backward(loss):
            for leaf in seen:
                self.assertTrue(np.all(leaf.grad == 0.0), leaf.name)
            grads = real_backward(loss)
            seen[:] = list(grads)
            return grads

        with mock.patch('seqflow.autodiff.backward', side_effect=checking_backward):
            train(small_config('slvm-af1', iterations=3), data=toy_data())
        self.assertTrue(seen)

    def test_numeric_failure_keeps_last_good_checkpoint(self):
        real_backward = ad.backward
        calls = []

        def failing_backward(loss):
            calls.append(1)
            if len(calls) == 3:
                raise NumericFailure("exp produced non finite values")
            return real_backward(loss)

        with tempfile.TemporaryDirectory() as tmp:
            with mock.patch('seqflow.autodiff.backward', side_effect=failing_backward):
                with self.assertRaisesRegex(NumericFailure, 'iteration 2'):
                    train(small_config(iterations=5), out_dir=tmp, data=toy_data())
            last_good = checkpoint_load(os.path.join(tmp, 'last_good.json'))
            self.assertEqual(last_good.iteration, 2)
            self.assertEqual(last_good.optimizer.step_count, 2)
            self.assertFalse(os.path.exists(os.path.join(tmp, 'checkpoint.json')))


class TestCheckpoint(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = os.path.join(self.tmp.name, 'ckpt.json')
        self.ckpt, _ = train(small_config('slvm-latent-af'), data=toy_data())

    def tearDown(self):
        self.tmp.cleanup()

    def test_save_load_save_is_byte_identical(self):
        checkpoint_save(self.ckpt, self.path)
        loaded = checkpoint_load(self.path)
        other = os.path.join(self.tmp.name, 'again.json')
        checkpoint_save(loaded, other)
        with open(self.path, 'rb') as a, open(other, 'rb') as b:
            self.assertEqual(a.read(), b.read())
        self.assertEqual(ddiff(loaded.config, self.ckpt.config), {})

    def test_restored_model_evaluates_identically(self):
        checkpoint_save(self.ckpt, self.path)
        data = toy_data(seed=5)
        before = evaluate(self.ckpt, data, seed=1)
        after = evaluate(checkpoint_load(self.path), data, seed=1)
        self.assertEqual(before.nlls, after.nlls)
        self.assertTrue(before.summary['bound'])

    def test_truncated_file(self):
        checkpoint_save(self.ckpt, self.path)
        with open(self.path, encoding='utf-8') as fh:
            text = fh.read()
        with open(self.path, 'w', encoding='utf-8') as fh:
            fh.write(text[:len(text) // 2])
        with self.assertRaises(CorruptFile):
            checkpoint_load(self.path)

    def test_unknown_version(self):
        doc = self.ckpt.to_dict()
        doc['version'] = 'seqflow-checkpoint/0'
        with open(self.path, 'w', encoding='utf-8') as fh:
            json.dump(doc, fh)
        with self.assertRaisesRegex(VersionMismatch, CHECKPOINT_VERSION):
            checkpoint_load(self.path)

    def test_schema_violation(self):
        doc = self.ckpt.to_dict()
        del doc['optimizer']
        with open(self.path, 'w', encoding='utf-8') as fh:
            json.dump(doc, fh)
        with self.assertRaisesRegex(CorruptFile, 'optimizer'):
            checkpoint_load(self.path)

    def test_expected_dim(self):
        checkpoint_save(self.ckpt, self.path)
        with self.assertRaises(DimensionMismatch):
            checkpoint_load(self.path, expected_dim=3)
        with self.assertRaises(DimensionMismatch):
            evaluate(self.ckpt, toy_data(D=3))


class TestReports(unittest.TestCase):

    def setUp(self):
        self.data = toy_data(N=20)
        self.ckpt, _ = train(small_config('af1', test_fraction=0.25), data=self.data)

    def test_evaluate_units_and_burn_in(self):
        per_dim = evaluate(self.ckpt, self.data)
        per_step = evaluate(self.ckpt, self.data, unit='per-step')
        np.testing.assert_allclose(per_step.normalized, np.array(per_dim.normalized) * 2)
        self.assertEqual(per_dim.summary['burn_in'], 2)
        self.assertEqual(per_dim.summary['T_eval'], 8)
        self.assertEqual(len(per_dim.to_dict()['per_sequence']), 20)
        with self.assertRaisesRegex(Invalid, 'key: "burn_in"'):
            evaluate(self.ckpt, self.data, burn_in=10)

    def test_data_space_nll_tracks_scale(self):
        """Rescaling the data by c adds T_eval * D * log c to the total NLL"""
        scaled = self.data.with_data(self.data.data * 10.0)
        base = evaluate(self.ckpt, self.data)
        ckpt = self.ckpt
        ckpt.standardization = {'mean': [m * 10.0 for m in ckpt.standardization['mean']],
                                'std': [s * 10.0 for s in ckpt.standardization['std']]}
        shifted = evaluate(ckpt, scaled)
        np.testing.assert_allclose(np.array(shifted.nlls) - np.array(base.nlls), 16 * np.log(10.0), rtol=1e-9)

    def test_analyze_corr(self):
        plain = analyze_corr(self.data)
        self.assertEqual(set(plain), {'corr_x'})
        report = analyze_corr(self.data, self.ckpt)
        self.assertEqual(report['steps_skipped'], 2)
        self.assertIn('corr', report['corr_y'])

    def test_sample(self):
        drawn = sample(self.ckpt, T=6, N=5, seed=2)
        self.assertEqual(drawn.data.shape, (5, 6, 2))
        np.testing.assert_array_equal(sample(self.ckpt, T=6, N=5, seed=2).data, drawn.data)
        self.assertEqual(drawn.dim_names, self.data.dim_names)

    def test_gap_report(self):
        report = gap_report(self.ckpt, self.data.take(range(10)), self.data.take(range(10, 20)))
        self.assertEqual(report['bins']['count'], 20)
        self.assertEqual(report['unit'], 'per_dim')
        self.assertFalse(report['bound'])
        self.assertAlmostEqual(report['gap'], report['test_mean'] - report['train_mean'])


class TestGradcheck(unittest.TestCase):

    def test_every_model_kind(self):
        data = toy_data(N=4, T=12)
        for kind in MODEL_KINDS:
            report = gradcheck(small_config(kind), data=data, coords=3)
            self.assertTrue(report['passed'], f"{kind}: {report['groups']}")
            self.assertEqual(report['model'], kind)

    def test_tolerance_needs_both_values_negligible(self):
        self.assertTrue(gradients_agree(np.array([1.0]), np.array([1.0005])).all())
        self.assertTrue(gradients_agree(np.array([5e-8]), np.array([-5e-8])).all())
        # a small absolute gap is still a factor of two
        self.assertFalse(gradients_agree(np.array([2e-7]), np.array([1e-7])).any())
        self.assertFalse(gradients_agree(np.array([1.0]), np.array([1.5])).any())

    def test_detects_wrong_gradient(self):
        real_backward = ad.backward

        def scaled_backward(loss):
            grads = real_backward(loss)
            for leaf in grads:
                leaf.grad = leaf.grad * 1.5
            return grads

        with mock.patch('seqflow.autodiff.backward', side_effect=scaled_backward):
            report = gradcheck(small_config('af1'), data=toy_data(N=4, T=12))
        self.assertFalse(report['passed'])


if __name__ == '__main__':
    unittest.main()
