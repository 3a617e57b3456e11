import filecmp
import os
import tempfile
import unittest

import numpy as np
import yaml

from backend.app.ml.losses import LossWeights
from backend.app.ml.model import FeatureMap
from backend.app.ml.pseudo_label import LabelMask
from backend.app.ml.synthetic_data import SynthConfig, generate
from backend.app.models.manifest import SOURCE, TARGET, DatasetManifest, ManifestEntry
from backend.app.models.pool_state import PoolState
from backend.app.services.annotator_service import SimulatedAnnotator, simulated_annotator
from backend.app.services.loop_service import (
    LoopConfig,
    LoopContext,
    initial_models,
    initial_seed_selection,
    load_snapshot,
    resume_loop,
    run_loop,
    run_round,
)
from backend.app.services.selection_service import SelectionBudget
from backend.app.services.training_service import Sample, TrainConfig
from backend.app.utils.error_handlers import MissingGroundTruthError, RoundAbortedError, StorageError

SUPERVISED = TrainConfig(epochs=1, batch_size=8, weights=LossWeights(0.0, 0.0, 0.1),
                         embed_dim=2, anchors=2, negatives=2, learning_rate=0.05)


def memory_context(n_source=4, n_target=3000, seed=0):
    """Tiny 2x2 two-class images held in memory; returns (context, ground truth)."""
    rng = np.random.default_rng(seed)
    samples, entries, truth = {}, [], {}
    for domain, prefix, count in ((SOURCE, 's', n_source), (TARGET, 't', n_target)):
        for i in range(count):
            image_id = f"{prefix}{i:05d}"
            labels = rng.integers(0, 2, size=(2, 2))
            features = FeatureMap(np.eye(2)[labels] * 2.0 + rng.normal(0.0, 1.0, size=(2, 2, 2)))
            mask = LabelMask(labels)
            if domain == SOURCE:
                samples[image_id] = Sample(image_id, features, mask)
                entries.append(ManifestEntry(image_id, f"{image_id}.ilmf", f"{image_id}.pgm", SOURCE))
            else:
                samples[image_id] = Sample(image_id, features)
                entries.append(ManifestEntry(image_id, f"{image_id}.ilmf", None, TARGET))
                truth[image_id] = mask
    context = LoopContext(samples=samples, manifest=DatasetManifest(tuple(entries)), classes=2)
    return context, truth


class FlakyAnnotator(SimulatedAnnotator):
    """Oracle that fails once on the n-th request."""

    def __init__(self, ground_truth, fail_on):
        super().__init__(ground_truth)
        self.calls = 0
        self.fail_on = fail_on

    def annotate(self, image_id, prediction=None):
        self.calls += 1
        if self.calls == self.fail_on:
            raise MissingGroundTruthError(image_id)
        return super().annotate(image_id, prediction)


class BudgetAccountingTestCase(unittest.TestCase):

    def run_rounds(self, rounds, **options):
        context, truth = memory_context()
        config = LoopConfig(rounds=rounds, train=SUPERVISED, final_retrain=False, **options)
        return run_loop(config, context, SimulatedAnnotator(truth))

    def test_thirty_then_thirty_five_by_count(self):
        result = self.run_rounds(['30', '35'])
        self.assertEqual(result.state.ledger, (30, 35))
        self.assertEqual(result.state.budget_spent, 65)
        self.assertEqual(len(result.state.target_labeled), 65)

    def test_one_then_one_point_two_percent(self):
        result = self.run_rounds('1%,1.2%')
        self.assertEqual(result.state.ledger, (30, 36))
        self.assertEqual(result.state.budget_spent, 66)
        self.assertEqual([len(ids) for ids in result.selections], [30, 36])

    def test_one_then_four_percent(self):
        result = self.run_rounds('1%,4%')
        self.assertEqual(result.state.ledger, (30, 120))
        self.assertEqual(result.state.budget_spent, 150)
        self.assertEqual(result.state.size, 3004)
        self.assertEqual([len(ids) for ids in result.selections], [30, 120])

    def test_zero_budgets_only_advance_the_round(self):
        context, truth = memory_context(n_target=20)
        initial = PoolState.from_manifests(context.manifest.domain(SOURCE), context.manifest.domain(TARGET))
        config = LoopConfig(rounds=['0', '0'], train=SUPERVISED)
        result = run_loop(config, context, SimulatedAnnotator(truth))
        self.assertEqual(result.state.round, 2)
        self.assertEqual(result.state.budget_spent, 0)
        self.assertEqual(result.state.target_unlabeled, initial.target_unlabeled)
        self.assertEqual(result.state.source_labeled, initial.source_labeled)
        self.assertIsNotNone(result.history[-1]['trace'])

    def test_same_seed_same_selection(self):
        first = self.run_rounds(['5', '7'], seed=3)
        second = self.run_rounds(['5', '7'], seed=3)
        self.assertEqual(first.selections, second.selections)
        self.assertTrue(first.student.equals(second.student))

    def test_random_strategy(self):
        result = self.run_rounds(['5', '7'], strategy='random')
        self.assertEqual(result.state.ledger, (5, 7))

    def test_warmup_is_recorded_as_round_zero(self):
        result = self.run_rounds(['5', '7'])
        self.assertEqual(result.history[0]['round'], 0)
        self.assertEqual(result.history[0]['strategy'], 'warmup')
        self.assertEqual(len(result.history[0]['trace']), SUPERVISED.epochs)
        self.assertEqual(result.history[1]['strategy'], 'random-seed')

    def test_without_warmup_the_seed_round_comes_first(self):
        result = self.run_rounds(['5', '7'], warmup=False)
        self.assertEqual(result.history[0]['strategy'], 'random-seed')
        self.assertEqual(result.state.ledger, (5, 7))


class SeedSelectionTestCase(unittest.TestCase):

    def setUp(self):
        self.state = PoolState(target_unlabeled={f"t{i:04d}" for i in range(3000)})

    def test_one_percent_is_thirty(self):
        state = initial_seed_selection(self.state, '1%', seed=1)
        self.assertEqual(len(state.target_labeled), 30)
        self.assertEqual(state.target_labeled, initial_seed_selection(self.state, '1%', seed=1).target_labeled)
        self.assertNotEqual(state.target_labeled, initial_seed_selection(self.state, '1%', seed=2).target_labeled)

    def test_zero_budget_is_unchanged(self):
        self.assertIs(initial_seed_selection(self.state, SelectionBudget(count=0), seed=1), self.state)

    def test_budget_larger_than_pool_clamps(self):
        small = PoolState(target_unlabeled={'a', 'b'})
        self.assertEqual(initial_seed_selection(small, '5', seed=0).budget_spent, 2)


class SimulatedAnnotatorTestCase(unittest.TestCase):

    def test_returns_stored_mask(self):
        mask = LabelMask(np.array([[0, 1], [1, 0]]))
        self.assertIs(simulated_annotator('a', {'a': mask}), mask)

    def test_missing_id_is_named(self):
        with self.assertRaisesRegex(MissingGroundTruthError, 'zzz'):
            simulated_annotator('zzz', {})


class RunRoundTestCase(unittest.TestCase):

    def test_metrics_and_conservation(self):
        context, truth = memory_context(n_target=40)
        config = LoopConfig(rounds=['4', '6'], train=SUPERVISED)
        state = PoolState.from_manifests(context.manifest.domain(SOURCE), context.manifest.domain(TARGET))
        state = initial_seed_selection(state, '4', seed=0, annotator=SimulatedAnnotator(truth),
                                       context=context, config=config)
        models = initial_models(config, context)
        after, (student, teacher), metrics = run_round(state, config, SimulatedAnnotator(truth), context, models)
        self.assertEqual(after.round, 2)
        self.assertEqual(len(metrics['selected']), 6)
        self.assertEqual(metrics['budget_spent'], 10)
        self.assertEqual(after.size, state.size)
        self.assertEqual(len(metrics['trace']), 1)
        for image_id in metrics['selected']:
            self.assertEqual(context.samples[image_id].label, truth[image_id])


class ResumableLoopTestCase(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        config = SynthConfig(classes=3, feature_dim=4, height=6, width=6, patches=3,
                             n_source=4, n_target=20, n_eval=4, seed=5)
        self.dataset = generate(config, os.path.join(self.tmp.name, 'data'))
        self.truth = {entry.id: entry.label for entry in self.dataset.ground_truth}
        self.config = LoopConfig(rounds=['3', '4', '2'], train=SUPERVISED, seed=2)

    def tearDown(self):
        self.tmp.cleanup()

    def context(self, name, **options):
        return LoopContext.from_manifests(
            self.dataset.source, self.dataset.target, 3, eval_manifest=self.dataset.eval,
            out_dir=os.path.join(self.tmp.name, name), **options,
        )

    def test_abort_then_resume(self):
        reference = run_loop(self.config, self.context('reference'), SimulatedAnnotator(self.truth))

        with self.assertRaises(RoundAbortedError) as raised:
            run_loop(self.config, self.context('run'), FlakyAnnotator(self.truth, fail_on=5))
        path = raised.exception.snapshot_path
        self.assertTrue(os.path.exists(path))

        snapshot = load_snapshot(path)
        self.assertEqual(snapshot.state.round, 1)
        self.assertEqual(snapshot.state.budget_spent, 3)
        self.assertEqual(len(snapshot.pending), 4)
        self.assertIsNotNone(snapshot.models())

        resumed = resume_loop(path, SimulatedAnnotator(self.truth))
        self.assertEqual(resumed.state.ledger, (3, 4, 2))
        self.assertEqual(resumed.selections[:2], reference.selections[:2])
        self.assertEqual(len(resumed.history), len(reference.history))
        self.assertIsNotNone(resumed.final['miou'])
        self.assertTrue(os.path.exists(os.path.join(self.tmp.name, 'run', 'student.ilmw')))
        labels = os.listdir(os.path.join(self.tmp.name, 'run', 'labels'))
        self.assertEqual(len(labels), 9)

    def test_abort_in_seed_round_leaves_pool_untouched(self):
        with self.assertRaises(RoundAbortedError) as raised:
            run_loop(self.config, self.context('seed'), FlakyAnnotator(self.truth, fail_on=2))
        snapshot = load_snapshot(raised.exception.snapshot_path)
        self.assertEqual(snapshot.state.round, 0)
        self.assertEqual(snapshot.state.budget_spent, 0)
        self.assertEqual(len(snapshot.pending), 3)

    def test_same_seed_writes_identical_checkpoints(self):
        first = run_loop(self.config, self.context('first'), SimulatedAnnotator(self.truth))
        second = run_loop(self.config, self.context('second'), SimulatedAnnotator(self.truth))
        self.assertEqual(first.selections, second.selections)
        for name in ('student.ilmw', 'teacher.ilmw'):
            self.assertTrue(filecmp.cmp(os.path.join(self.tmp.name, 'first', name),
                                        os.path.join(self.tmp.name, 'second', name), shallow=False), name)

    def test_snapshot_without_pool_is_a_storage_error(self):
        path = os.path.join(self.tmp.name, 'snapshot.yaml')
        with open(path, 'w') as handle:
            yaml.safe_dump({'version': 1, 'config': self.config.to_dict()}, handle)
        with self.assertRaisesRegex(StorageError, 'pool'):
            load_snapshot(path)

    def test_snapshot_with_malformed_pool_is_a_storage_error(self):
        path = os.path.join(self.tmp.name, 'snapshot.yaml')
        with open(path, 'w') as handle:
            yaml.safe_dump({'version': 1, 'pool': 'oops', 'config': self.config.to_dict(),
                            'manifest': [], 'classes': 3}, handle)
        with self.assertRaises(StorageError):
            load_snapshot(path)

    def test_source_free_run_completes(self):
        config = LoopConfig(rounds=['3', '4'], train=SUPERVISED, source_free=True, pretrain_epochs=2)
        result = run_loop(config, self.context('free'), SimulatedAnnotator(self.truth))
        self.assertEqual(result.state.source_labeled, frozenset())
        self.assertIsNotNone(result.round0_miou)
        self.assertEqual(result.history[0]['strategy'], 'source-pretrain')
        self.assertEqual(result.state.budget_spent, 7)

    def test_source_free_without_source_data(self):
        context = LoopContext.from_manifests(None, self.dataset.target, 3, eval_manifest=self.dataset.eval)
        config = LoopConfig(rounds=['3', '4'], train=SUPERVISED, source_free=True)
        result = run_loop(config, context, SimulatedAnnotator(self.truth))
        self.assertIsNone(result.round0_miou)
        self.assertEqual(result.state.budget_spent, 7)

    def test_semi_supervised_loop(self):
        config = LoopConfig(
            rounds=['3', '4'],
            train=TrainConfig(epochs=2, batch_size=4, embed_dim=4, anchors=4, negatives=8, learning_rate=0.05),
        )
        result = run_loop(config, self.context('ssl'), SimulatedAnnotator(self.truth))
        self.assertEqual(result.state.budget_spent, 7)
        self.assertGreater(result.final['trace'][0]['steps'], 0)
        self.assertTrue(0.0 <= result.final['miou'] <= 1.0)


if __name__ == '__main__':
    unittest.main()
