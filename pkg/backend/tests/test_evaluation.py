import unittest

import numpy as np

from backend.app.ml.evaluation import (
    ConfusionMatrix,
    accumulate,
    confusion_for_pairs,
    evaluate_model,
    evaluation_report,
    format_report,
    miou,
    pixel_accuracy,
)
from backend.app.ml.model import FeatureMap, ModelParams
from backend.app.ml.pseudo_label import IGNORE, LabelMask
from backend.app.utils.error_handlers import InvalidInputError


def mask(values):
    return LabelMask(np.array(values).reshape(1, -1))


class AccumulateTestCase(unittest.TestCase):

    def test_hand_tally(self):
        cm = accumulate(ConfusionMatrix.empty(2), mask([0, 1, 1, 1]), mask([0, 0, 1, 1]))
        np.testing.assert_array_equal(cm.counts[:, :2], [[1, 1], [0, 2]])
        self.assertEqual(cm.total, 4)

    def test_perfect_prediction_fills_diagonal(self):
        labels = mask(np.arange(10) % 3)
        cm = accumulate(ConfusionMatrix.empty(3), labels, labels)
        self.assertEqual(int(np.trace(cm.counts[:, :3])), 10)

    def test_ignore_ground_truth_is_skipped(self):
        cm = ConfusionMatrix.empty(2)
        self.assertEqual(accumulate(cm, mask([0, 1]), mask([IGNORE, IGNORE])), cm)

    def test_ignore_prediction_is_a_miss(self):
        cm = accumulate(ConfusionMatrix.empty(2), mask([IGNORE, 1]), mask([0, 1]))
        self.assertEqual(cm.counts[0, 2], 1)
        per_class, _ = miou(cm)
        self.assertEqual(per_class[0], 0.0)

    def test_shape_mismatch(self):
        with self.assertRaises(InvalidInputError):
            accumulate(ConfusionMatrix.empty(2), mask([0, 1]), mask([0, 1, 1]))

    def test_order_does_not_matter(self):
        rng = np.random.default_rng(4)
        pairs = [
            (LabelMask(rng.integers(0, 4, size=(5, 5))), LabelMask(rng.integers(0, 4, size=(5, 5))))
            for _ in range(6)
        ]
        forward = confusion_for_pairs(pairs, 4)
        backward = confusion_for_pairs(list(reversed(pairs)), 4, threads=3)
        self.assertEqual(forward, backward)


class MiouTestCase(unittest.TestCase):

    def test_accumulate_example(self):
        cm = accumulate(ConfusionMatrix.empty(2), mask([0, 1, 1, 1]), mask([0, 0, 1, 1]))
        per_class, mean = miou(cm)
        self.assertAlmostEqual(per_class[0], 0.5)
        self.assertAlmostEqual(per_class[1], 2.0 / 3.0)
        self.assertAlmostEqual(mean, 7.0 / 12.0)

    def test_perfect_and_swapped(self):
        gt = mask([0, 1, 0, 1])
        _, perfect = miou(accumulate(ConfusionMatrix.empty(2), gt, gt))
        _, swapped = miou(accumulate(ConfusionMatrix.empty(2), mask([1, 0, 1, 0]), gt))
        self.assertEqual(perfect, 1.0)
        self.assertEqual(swapped, 0.0)

    def test_absent_class_is_undefined(self):
        cm = accumulate(ConfusionMatrix.empty(3), mask([0, 1]), mask([0, 1]))
        per_class, mean = miou(cm)
        self.assertIsNone(per_class[2])
        self.assertEqual(mean, 1.0)

    def test_empty_subset(self):
        cm = accumulate(ConfusionMatrix.empty(3), mask([0, 1]), mask([0, 1]))
        with self.assertRaises(InvalidInputError):
            miou(cm, subset=[2])
        with self.assertRaises(InvalidInputError):
            miou(cm, subset=[5])

    def test_permutation_invariance(self):
        rng = np.random.default_rng(11)
        perm = rng.permutation(5)
        gt = rng.integers(0, 5, size=(6, 6))
        pred = rng.integers(0, 5, size=(6, 6))
        subset = [0, 2, 3]
        _, before = miou(accumulate(ConfusionMatrix.empty(5), LabelMask(pred), LabelMask(gt)), subset)
        _, after = miou(
            accumulate(ConfusionMatrix.empty(5), LabelMask(perm[pred]), LabelMask(perm[gt])),
            [int(perm[c]) for c in subset],
        )
        self.assertAlmostEqual(before, after)

    def test_full_subset_matches_default(self):
        rng = np.random.default_rng(12)
        cm = accumulate(
            ConfusionMatrix.empty(4),
            LabelMask(rng.integers(0, 4, size=(8, 8))),
            LabelMask(rng.integers(0, 4, size=(8, 8))),
        )
        self.assertEqual(miou(cm)[1], miou(cm, subset=[0, 1, 2, 3])[1])

    def test_pixel_accuracy(self):
        cm = accumulate(ConfusionMatrix.empty(2), mask([0, 1, 1, 1]), mask([0, 0, 1, 1]))
        self.assertAlmostEqual(pixel_accuracy(cm), 0.75)


class ReportTestCase(unittest.TestCase):

    def test_text_table(self):
        cm = accumulate(ConfusionMatrix.empty(3), mask([0, 1, 1, 1]), mask([0, 0, 1, 1]))
        report = evaluation_report(cm, ['road', 'car', 'sky'])
        text = format_report(report)
        self.assertIn('road   0.5000', text)
        self.assertIn('car    0.6667', text)
        self.assertIn('sky    undefined', text)
        self.assertIn('mIoU   0.5833', text)

    def test_evaluate_model(self):
        params = ModelParams(np.eye(2), np.zeros(2), np.eye(2))
        features = FeatureMap(np.array([[[1.0, 0.0], [0.0, 1.0]]]))
        cm = evaluate_model(params, [(features, LabelMask(np.array([[0, 0]])))] * 3, threads=2)
        np.testing.assert_array_equal(cm.counts[:, :2], [[3, 3], [0, 0]])


if __name__ == '__main__':
    unittest.main()
