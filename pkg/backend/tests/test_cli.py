import json
import os
import shutil
import tempfile
import unittest

import click
import yaml
from click.testing import CliRunner

from backend.app import create_app
from backend.app.commands.experiment import parse_seeds
from backend.app.ml.losses import LossWeights
from backend.app.ml.model import ModelParams
from backend.app.models.manifest import load_manifest
from backend.app.services.training_service import (
    TrainConfig,
    TrainingService,
    derive_seed,
    load_samples,
    read_loss_trace,
)
from backend.app.utils.error_handlers import EXIT_UNEXPECTED, ConfigError, register_error_handlers
from backend.config import TestConfig

SYNTH_ARGS = [
    '--classes', '3', '--feature-dim', '4', '--height', '6', '--width', '6', '--patches', '3',
    '--n-source', '6', '--n-target', '10', '--n-eval', '4',
]


class CliTestCase(unittest.TestCase):
    """End-to-end runs of the `ilm` command group."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.runner = CliRunner(mix_stderr=False)
        self.cli = create_app(TestConfig)
        self.data = self.path('data')
        self.invoke('--seed', '1', 'synth', '--out', self.data, *SYNTH_ARGS)

    def tearDown(self):
        self.tmp.cleanup()

    def path(self, *parts):
        return os.path.join(self.tmp.name, *parts)

    def data_file(self, name):
        return os.path.join(self.data, name)

    def invoke(self, *args, expect=0):
        result = self.runner.invoke(self.cli, list(args))
        self.assertEqual(result.exit_code, expect, result.stdout + result.stderr)
        return result

    def last_error(self, result):
        return json.loads(result.stderr.strip().splitlines()[-1])

    def test_synth_writes_manifests(self):
        for name in ('source.yaml', 'target.yaml', 'ground_truth.yaml', 'eval.yaml', 'classes.yaml'):
            self.assertTrue(os.path.exists(self.data_file(name)), name)
        self.assertEqual(len(load_manifest(self.data_file('target.yaml')).unlabeled()), 10)

    def test_synth_refuses_to_overwrite(self):
        result = self.invoke('synth', '--out', self.data, *SYNTH_ARGS, expect=3)
        self.assertEqual(self.last_error(result)['error'], 'IOError')
        self.invoke('--force', 'synth', '--out', self.data, *SYNTH_ARGS)

    def test_train_score_select_ingest(self):
        classes = self.data_file('classes.yaml')
        target = self.data_file('target.yaml')
        model_dir = self.path('model')
        self.invoke('train', '--source', self.data_file('source.yaml'), '--target', target,
                    '--classes', classes, '--out', model_dir, '--epochs', '2', '--batch-size', '4')
        teacher = os.path.join(model_dir, 'teacher.ilmw')
        self.assertEqual(len(read_loss_trace(os.path.join(model_dir, 'trace.yaml'))), 2)

        scores = self.path('scores.tsv')
        self.invoke('score', '--checkpoint', teacher, '--manifest', target, '--out', scores)
        with open(scores) as handle:
            lines = handle.read().splitlines()
        self.assertEqual(len(lines), 10)
        values = [float(line.split('\t')[1]) for line in lines]
        self.assertEqual(values, sorted(values, reverse=True))

        exported = self.path('labelme')
        selected = self.path('selected.txt')
        result = self.invoke('select', '--scores', scores, '--budget', '3', '--out', selected,
                             '--export-dir', exported, '--checkpoint', teacher,
                             '--manifest', target, '--classes', classes)
        picks = result.stdout.split()
        self.assertEqual(picks, [line.split('\t')[0] for line in lines[:3]])
        self.assertEqual(sorted(os.listdir(exported)), sorted(f"{i}.json" for i in picks))

        inbox = self.path('inbox')
        shutil.copytree(exported, inbox)
        updated = self.path('target_updated.yaml')
        result = self.invoke('ingest', '--manifest', target, '--annotations', inbox,
                             '--classes', classes, '--out', updated)
        self.assertIn('ingested 3', result.stdout)
        manifest = load_manifest(updated)
        self.assertEqual(sorted(manifest.labeled().ids), sorted(picks))
        self.assertEqual(len(load_manifest(target).labeled()), 0)

    def test_train_without_unlabeled_losses_matches_supervised_run(self):
        model_dir = self.path('ablation')
        self.invoke('--seed', '4', 'train', '--source', self.data_file('source.yaml'),
                    '--target', self.data_file('target.yaml'), '--classes', self.data_file('classes.yaml'),
                    '--out', model_dir, '--epochs', '3', '--no-unsup', '--no-contrast')
        trace = read_loss_trace(os.path.join(model_dir, 'trace.yaml'))

        samples = load_samples(load_manifest(self.data_file('source.yaml')))
        labeled = [samples[i] for i in sorted(samples)]
        config = TrainConfig(epochs=3, weights=LossWeights(0.0, 0.0, TestConfig.TEMPERATURE))
        student = ModelParams.initialize(4, 3, config.embed_dim, seed=derive_seed(4, 0, 2))
        direct = TrainingService.train_stage(student, student, labeled, [], config, seed=derive_seed(4, 1, 0))

        self.assertEqual(len(trace), len(direct.trace))
        for written, expected in zip(trace, direct.trace):
            self.assertAlmostEqual(written['total'], expected['total'], delta=1e-6)
            self.assertEqual(written['unsupervised'], 0.0)
            self.assertEqual(written['contrastive'], 0.0)

    def test_eval_identical_masks(self):
        eval_manifest = self.data_file('eval.yaml')
        result = self.invoke('eval', '--manifest', eval_manifest, '--predictions', eval_manifest,
                             '--classes', self.data_file('classes.yaml'))
        self.assertRegex(result.stdout, r"mIoU\s+1\.0000")

        result = self.invoke('eval', '--manifest', eval_manifest, '--predictions', eval_manifest,
                             '--classes', self.data_file('classes.yaml'), '--format', 'json')
        self.assertEqual(json.loads(result.stdout)['miou'], 1.0)

    def test_loop_with_oracle(self):
        out_dir = self.path('run')
        result = self.invoke(
            '--seed', '2', 'loop',
            '--source', self.data_file('source.yaml'),
            '--target', self.data_file('target.yaml'),
            '--eval', self.data_file('eval.yaml'),
            '--ground-truth', self.data_file('ground_truth.yaml'),
            '--classes', self.data_file('classes.yaml'),
            '--out', out_dir, '--rounds', '2,3', '--epochs', '1',
        )
        self.assertIn('annotated 5 images in 2 rounds', result.stdout)
        self.assertIn('final\tmIoU', result.stdout)
        self.assertTrue(os.path.exists(os.path.join(out_dir, 'snapshot.yaml')))
        self.assertEqual(len(os.listdir(os.path.join(out_dir, 'labels'))), 5)

    def test_eval_on_a_class_subset(self):
        eval_manifest = self.data_file('eval.yaml')
        result = self.invoke('eval', '--manifest', eval_manifest, '--predictions', eval_manifest,
                             '--classes', self.data_file('classes.yaml'), '--subset', '0,1', '--format', 'json')
        self.assertEqual(json.loads(result.stdout)['miou'], 1.0)

    def test_resume_from_snapshot_without_pool(self):
        snapshot = self.path('snapshot.yaml')
        with open(snapshot, 'w') as handle:
            yaml.safe_dump({'version': 1}, handle)
        result = self.invoke('loop', '--resume', snapshot,
                             '--ground-truth', self.data_file('ground_truth.yaml'), expect=3)
        error = self.last_error(result)
        self.assertEqual(error['error'], 'IOError')
        self.assertIn('pool', error['message'])

    def test_invalid_config_file(self):
        config = self.path('bad.yaml')
        with open(config, 'w') as handle:
            yaml.safe_dump({'train': {'epochs': 0, 'colour': 'blue'}}, handle)
        result = self.invoke('--config', config, 'synth', '--out', self.path('other'), expect=2)
        error = self.last_error(result)
        self.assertEqual(error['error'], 'InvalidConfig')
        self.assertEqual(set(error['errors']), {'train.epochs', 'train.colour'})

    def test_missing_input_is_an_io_error(self):
        result = self.invoke('eval', '--manifest', self.path('missing.yaml'),
                             '--checkpoint', self.path('none.ilmw'), expect=3)
        self.assertFalse(self.last_error(result)['success'])

    def test_eval_needs_exactly_one_source_of_predictions(self):
        result = self.invoke('eval', '--manifest', self.data_file('eval.yaml'), expect=2)
        self.assertEqual(self.last_error(result)['code'], 2)


class UnexpectedErrorTestCase(unittest.TestCase):

    def test_unhandled_exception_is_a_server_error(self):
        @click.group()
        def cli():
            pass

        @cli.command('boom')
        def boom():
            raise RuntimeError('wiring fault')

        register_error_handlers(cli)
        result = CliRunner(mix_stderr=False).invoke(cli, ['boom'])
        self.assertEqual(result.exit_code, EXIT_UNEXPECTED)
        error = json.loads(result.stderr.strip().splitlines()[-1])
        self.assertEqual(error['error'], 'Server Error')
        self.assertFalse(error['success'])
        self.assertIn('RuntimeError: wiring fault', error['message'])


class ParseSeedsTestCase(unittest.TestCase):

    def test_ranges_and_lists(self):
        self.assertEqual(parse_seeds('0-3'), [0, 1, 2, 3])
        self.assertEqual(parse_seeds('5, 1,2-3'), [5, 1, 2, 3])
        with self.assertRaises(ConfigError):
            parse_seeds('a')
        with self.assertRaises(ConfigError):
            parse_seeds('')


if __name__ == '__main__':
    unittest.main()
