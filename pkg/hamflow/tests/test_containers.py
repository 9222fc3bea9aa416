import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from hamflow.containers import FORMAT_TAG, load_arrays, save_arrays
from hamflow.exceptions import CheckpointFormatError


class ContainerTests(SimpleTestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self._tmp.cleanup)
        self.root = Path(self._tmp.name)

    def test_arrays_and_meta_survive(self):
        arrays = {'w': np.arange(6.0).reshape(2, 3), 'b': np.array([0.1, 1 / 3])}
        path = save_arrays(self.root / 'nested' / 'c.npz', arrays, {'iteration': 3, 'kind': 'fixed'})
        loaded, meta = load_arrays(path)
        np.testing.assert_array_equal(loaded['w'], arrays['w'])
        np.testing.assert_array_equal(loaded['b'], arrays['b'])
        self.assertEqual(meta, {'iteration': 3, 'kind': 'fixed'})

    def test_reserved_names(self):
        with self.assertRaises(CheckpointFormatError):
            save_arrays(self.root / 'c.npz', {'__meta__': np.zeros(1)})

    def test_missing_file(self):
        with self.assertRaises(CheckpointFormatError):
            load_arrays(self.root / 'absent.npz')

    def test_untagged_archive(self):
        path = self.root / 'plain.npz'
        np.savez(path, w=np.zeros(2))
        with self.assertRaises(CheckpointFormatError):
            load_arrays(path)

    def test_other_version(self):
        path = self.root / 'future.npz'
        np.savez(path, w=np.zeros(2), __format__=np.array(f"{FORMAT_TAG}:2"))
        with self.assertRaises(CheckpointFormatError) as ctx:
            load_arrays(path)
        self.assertIn(':2', str(ctx.exception))
