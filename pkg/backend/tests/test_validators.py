import os
import tempfile
import unittest

import yaml

from backend.app.models.run_config import RunConfig
from backend.app.utils.error_handlers import ConfigError
from backend.app.utils.validators import require_valid_run_config, validate_run_config
from backend.config import TestConfig


class ValidateRunConfigTestCase(unittest.TestCase):

    def test_empty_document_is_valid(self):
        self.assertEqual(validate_run_config(None), {'valid': True, 'errors': {}})
        self.assertTrue(validate_run_config({})['valid'])

    def test_unknown_keys(self):
        result = validate_run_config({'trian': {}, 'train': {'epoch': 3}})
        self.assertFalse(result['valid'])
        self.assertIn('trian', result['errors'])
        self.assertIn('train.epoch', result['errors'])

    def test_ranges(self):
        result = validate_run_config({
            'train': {'epochs': 0, 'alpha0': 1.5, 'omega': 0, 'momentum': 1.0, 'lambda_u': -1},
            'synth': {'classes': 1, 'n_target': -2},
            'threads': 0,
        })
        self.assertEqual(
            set(result['errors']),
            {'train.epochs', 'train.alpha0', 'train.omega', 'train.momentum', 'train.lambda_u',
             'synth.classes', 'synth.n_target', 'threads'},
        )

    def test_booleans_are_not_numbers(self):
        result = validate_run_config({'train': {'epochs': True}, 'loop': {'source_free': 'yes'}})
        self.assertEqual(set(result['errors']), {'train.epochs', 'loop.source_free'})

    def test_choices(self):
        result = validate_run_config({
            'train': {'threshold_scope': 'global'},
            'loop': {'rounds': '1%,x', 'strategy': 'margin', 'score_with': 'both'},
        })
        self.assertEqual(
            set(result['errors']),
            {'train.threshold_scope', 'loop.rounds', 'loop.strategy', 'loop.score_with'},
        )

    def test_require_raises_with_every_error(self):
        with self.assertRaises(ConfigError) as raised:
            require_valid_run_config({'seed': -1, 'paths': {'nowhere': 'x'}})
        self.assertEqual(set(raised.exception.errors), {'seed', 'paths.nowhere'})


class RunConfigTestCase(unittest.TestCase):

    def test_defaults_come_from_config_class(self):
        run = RunConfig.build(config_class=TestConfig)
        self.assertEqual(run.threads, 1)
        self.assertEqual(run.train['epochs'], TestConfig.EPOCHS_PER_ROUND)
        loop = run.loop_config()
        self.assertEqual([str(b) for b in loop.rounds], ['1%', '1.2%'])
        self.assertEqual(loop.train.weights.lambda_c, 0.1)
        self.assertEqual(loop.train.ema_momentum, 0.99)

    def test_overrides_beat_document(self):
        document = {'train': {'epochs': 2, 'lambda_u': 0.5}, 'seed': 4}
        run = RunConfig.build(document, {'train': {'epochs': 7, 'lambda_u': None}}, TestConfig)
        train = run.train_config()
        self.assertEqual(train.epochs, 7)
        self.assertEqual(train.weights.lambda_u, 0.5)
        self.assertEqual(run.seed, 4)
        self.assertEqual(run.synth_config().seed, 4)
        self.assertEqual(run.loop_config().seed, 4)

    def test_load_from_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'run.yaml')
            with open(path, 'w') as handle:
                yaml.safe_dump({'synth': {'classes': 5}, 'loop': {'rounds': '30,35'}}, handle)
            run = RunConfig.load(path, config_class=TestConfig)
        self.assertEqual(run.synth_config().classes, 5)
        self.assertEqual([str(b) for b in run.loop_config().rounds], ['30', '35'])

    def test_invalid_file_is_rejected_before_work(self):
        with self.assertRaises(ConfigError):
            RunConfig.build({'loop': {'strategy': 'margin'}}, config_class=TestConfig)

    def test_to_dict(self):
        run = RunConfig.build({'paths': {'out': 'runs/a'}}, config_class=TestConfig)
        self.assertEqual(run.to_dict()['paths'], {'out': 'runs/a'})
        self.assertEqual(RunConfig.build(run.to_dict(), config_class=TestConfig), run)


if __name__ == '__main__':
    unittest.main()
