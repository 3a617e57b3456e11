import os
import tempfile
import unittest

import numpy as np

from backend.app.utils import storage
from backend.app.utils.error_handlers import StorageError


class StorageTestCase(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmp.cleanup()

    def path(self, name):
        return os.path.join(self.tmp.name, name)

    def test_feature_header_layout(self):
        values = np.arange(2 * 3 * 4, dtype=np.float64).reshape(2, 3, 4)
        payload = storage.encode_dense(storage.FEATURE_MAGIC, values)
        self.assertEqual(payload[:4], b'ILMF')
        self.assertEqual(payload[4:16], bytes([2, 0, 0, 0, 3, 0, 0, 0, 4, 0, 0, 0]))
        self.assertEqual(len(payload), 16 + 24 * 4)
        self.assertEqual(np.frombuffer(payload[16:20], dtype='<f4')[0], 0.0)
        self.assertEqual(np.frombuffer(payload[20:24], dtype='<f4')[0], 1.0)

    def test_features_file(self):
        values = np.random.default_rng(0).normal(size=(3, 2, 5)).astype(np.float32)
        storage.write_features(self.path('f.ilmf'), values)
        np.testing.assert_array_equal(storage.read_features(self.path('f.ilmf')), values)

    def test_wrong_magic_and_truncation(self):
        payload = storage.encode_dense(storage.PROB_MAGIC, np.zeros((1, 1, 2)))
        with self.assertRaises(StorageError):
            storage.decode_dense(storage.FEATURE_MAGIC, payload)
        with self.assertRaises(StorageError):
            storage.decode_dense(storage.PROB_MAGIC, payload[:-1])
        with self.assertRaises(StorageError):
            storage.decode_dense(storage.PROB_MAGIC, payload[:8])

    def test_weights_layout(self):
        payload = storage.encode_weights(np.ones((3, 2)), np.zeros(2), np.ones((3, 4)))
        self.assertEqual(payload[:4], b'ILMW')
        self.assertEqual(len(payload), 16 + (6 + 2 + 12) * 4)
        weights, bias, projection = storage.decode_weights(payload)
        self.assertEqual((weights.shape, bias.shape, projection.shape), ((3, 2), (2,), (3, 4)))

    def test_pgm(self):
        mask = np.array([[0, 1, 255], [3, 4, 5]], dtype=np.uint8)
        payload = storage.encode_pgm(mask)
        self.assertTrue(payload.startswith(b'P5\n3 2\n255\n'))
        np.testing.assert_array_equal(storage.decode_pgm(payload), mask)
        with self.assertRaises(StorageError):
            storage.decode_pgm(b'P2\n3 2\n255\n')
        with self.assertRaises(StorageError):
            storage.decode_pgm(payload[:-1])

    def test_refuses_overwrite_without_force(self):
        storage.write_pgm(self.path('m.pgm'), np.zeros((1, 1)))
        with self.assertRaises(StorageError):
            storage.write_pgm(self.path('m.pgm'), np.zeros((1, 1)), force=False)
        with self.assertRaises(StorageError):
            storage.ensure_new_path(self.path('m.pgm'))
        self.assertEqual(storage.ensure_new_path(self.path('new.pgm')), self.path('new.pgm'))

    def test_missing_file(self):
        with self.assertRaises(StorageError):
            storage.read_features(self.path('absent.ilmf'))

    def test_yaml_converts_numpy_values(self):
        storage.write_yaml(self.path('a/b.yaml'), {'x': np.float64(0.5), 'y': (np.int64(2), 3)})
        self.assertEqual(storage.read_yaml(self.path('a/b.yaml')), {'x': 0.5, 'y': [2, 3]})


if __name__ == '__main__':
    unittest.main()
