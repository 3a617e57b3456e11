import unittest
from dataclasses import replace

from backend.app.ml.synthetic_data import SynthConfig
from backend.app.models.run_config import RunConfig
from backend.app.services.experiment_service import (
    ARM_ACTIVE,
    ARM_RANDOM,
    ARM_SOURCE_ONLY,
    ARM_SSL,
    ExperimentService,
    run_ablation,
    training_stages,
)
from backend.app.services.loop_service import LoopConfig
from backend.app.services.training_service import TrainConfig
from backend.app.utils.error_handlers import ConfigError
from backend.config import TestConfig

SMALL_TRAIN = TrainConfig(epochs=1, batch_size=4, embed_dim=4, anchors=4, negatives=8, learning_rate=0.05)


class AblationOrderingTestCase(unittest.TestCase):
    """Default synthetic shift, default loop: every added component must pay off on average."""

    @classmethod
    def setUpClass(cls):
        run = RunConfig.build(config_class=TestConfig)
        cls.synth = run.synth_config()
        cls.loop = run.loop_config()
        cls.report = run_ablation(cls.synth, cls.loop, range(20), include_source_free=True)

    def mean(self, arm):
        return self.report['arms'][arm]['mean']

    def test_dataset_matches_the_reference_setting(self):
        self.assertEqual(self.synth, replace(SynthConfig(), seed=TestConfig.SEED))
        self.assertEqual(self.loop.rounds, LoopConfig(rounds=TestConfig.ROUNDS).rounds)
        self.assertEqual(len(self.report['arms'][ARM_SSL]['miou']), 20)

    def test_pseudo_labels_beat_source_only(self):
        self.assertLess(self.mean(ARM_SOURCE_ONLY), self.mean(ARM_SSL))

    def test_contrast_and_active_selection_beat_pseudo_labels_alone(self):
        self.assertLess(self.mean(ARM_SSL), self.mean(ARM_ACTIVE))

    def test_uncertainty_beats_random_selection_on_most_seeds(self):
        self.assertGreaterEqual(self.report['active_beats_random'], 0.7)
        self.assertEqual(len(self.report['arms'][ARM_RANDOM]['miou']), 20)

    def test_source_free_rounds_improve_on_the_pretrained_model(self):
        runs = self.report['source_free']
        improved = [final > start for start, final in zip(runs['round0'][:10], runs['final'][:10])]
        self.assertGreaterEqual(sum(improved), 8)


class ExperimentHelpersTestCase(unittest.TestCase):

    def test_training_stages(self):
        self.assertEqual(training_stages(LoopConfig(rounds='1%,1.2%')), 2)
        self.assertEqual(training_stages(LoopConfig(rounds='1%,1.2%', random_first_round=False)), 3)
        self.assertEqual(training_stages(LoopConfig(rounds='5', final_retrain=False)), 1)

    def test_needs_a_seed(self):
        with self.assertRaises(ConfigError):
            run_ablation(SynthConfig(), LoopConfig(rounds='1'), [])

    def test_single_seed_report(self):
        synth = SynthConfig(classes=3, feature_dim=4, height=6, width=6, patches=3,
                            n_source=4, n_target=20, n_eval=4)
        loop = LoopConfig(rounds='2,3', train=SMALL_TRAIN, pretrain_epochs=2)
        result = ExperimentService.run_seed(synth, loop, seed=1, include_source_free=True)
        for arm in (ARM_SOURCE_ONLY, ARM_SSL, ARM_ACTIVE, ARM_RANDOM):
            self.assertTrue(0.0 <= result[arm] <= 1.0, arm)
        self.assertIsNotNone(result['source_free']['round0'])


if __name__ == '__main__':
    unittest.main()
