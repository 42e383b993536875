import os
import shutil
import tempfile
import unittest

import numpy as np

from collabdet.collaborative_network import CollaborativeNetwork
from collabdet.errors import ConfigurationError
from collabdet.gradient_checks import TINY_META
from collabdet.save_load_checkpoint import (
    CHECKPOINT_MAGIC,
    checkpoint_bytes,
    load_checkpoint,
    parse_checkpoint,
    save_checkpoint,
)


class TestCheckpoint(unittest.TestCase):
    def setUp(self):
        self.directory = tempfile.mkdtemp()
        self.network = CollaborativeNetwork(TINY_META, seed=2)

    def tearDown(self):
        shutil.rmtree(self.directory)

    def test_save_and_load(self):
        path = save_checkpoint(os.path.join(self.directory, "run", "final.ckpt"), self.network.registry,
                               "collaborative", 7, self.network.meta)
        checkpoint = load_checkpoint(path)
        self.assertEqual(checkpoint.mode, "collaborative")
        self.assertEqual(checkpoint.epoch, 7)
        self.assertEqual(checkpoint.meta, self.network.meta)
        self.assertEqual(list(checkpoint.values), self.network.registry.names())
        for name, tensor in self.network.registry:
            np.testing.assert_array_equal(checkpoint.values[name], tensor.values)

    def test_rebuild_network_from_checkpoint(self):
        data = checkpoint_bytes(self.network.registry, "weak_only", 0, self.network.meta)
        rebuilt = CollaborativeNetwork.from_checkpoint(parse_checkpoint(data))
        self.assertEqual(checkpoint_bytes(rebuilt.registry, "weak_only", 0, rebuilt.meta), data)

    def test_bytes_are_deterministic(self):
        other = CollaborativeNetwork(TINY_META, seed=2)
        self.assertEqual(checkpoint_bytes(self.network.registry, "cascade", 1, self.network.meta),
                         checkpoint_bytes(other.registry, "cascade", 1, other.meta))

    def test_bad_magic(self):
        data = checkpoint_bytes(self.network.registry, "cascade", 1)
        with self.assertRaises(ConfigurationError):
            parse_checkpoint(b"XXXXXX" + data[len(CHECKPOINT_MAGIC):])

    def test_truncated_payload(self):
        data = checkpoint_bytes(self.network.registry, "cascade", 1)
        with self.assertRaises(ConfigurationError):
            parse_checkpoint(data[:-8])

    def test_trailing_bytes(self):
        data = checkpoint_bytes(self.network.registry, "cascade", 1)
        with self.assertRaises(ConfigurationError):
            parse_checkpoint(data + b"\0")

    def test_missing_file(self):
        with self.assertRaises(ConfigurationError):
            load_checkpoint(os.path.join(self.directory, "missing.ckpt"))

    def test_architecture_mismatch(self):
        checkpoint = parse_checkpoint(checkpoint_bytes(self.network.registry, "cascade", 1, self.network.meta))
        checkpoint.meta = dict(checkpoint.meta, fc_width=8)
        with self.assertRaises(ConfigurationError):
            CollaborativeNetwork.from_checkpoint(checkpoint)


if __name__ == "__main__":
    unittest.main()
