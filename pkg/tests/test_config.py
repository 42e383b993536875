import argparse
import os
import shutil
import tempfile
import unittest

from collabdet.config import TrainConfig, add_config_arguments, config_from_args
from collabdet.errors import ConfigurationError


class TestTrainConfig(unittest.TestCase):
    def setUp(self):
        self.directory = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.directory)

    def _write(self, text):
        path = os.path.join(self.directory, "train.cfg")
        with open(path, "w", encoding="utf-8") as f:
            f.write(text)
        return path

    def test_defaults(self):
        cfg = TrainConfig().validate()
        self.assertEqual(cfg.mode, "collaborative")
        self.assertEqual(cfg.beta, 0.8)
        self.assertEqual(cfg.epochs, 20)
        self.assertEqual(cfg.scales, (0.75, 1.0, 1.25))
        self.assertEqual(cfg.consistency().match_threshold, 0.5)

    def test_learning_rate_step(self):
        cfg = TrainConfig()
        self.assertEqual(cfg.lr_switch_epoch, 12)
        self.assertEqual(cfg.lr_for_epoch(11), 1e-3)
        self.assertEqual(cfg.lr_for_epoch(12), 1e-4)

    def test_file_values_and_comments(self):
        path = self._write("# tiny run\nmode = cascade\nepochs = 3  # short\nflip = off\nscales = 1.0, 1.25\n"
                           "channels = 4,8,8\n")
        cfg = TrainConfig.from_file(path)
        self.assertEqual(cfg.mode, "cascade")
        self.assertEqual(cfg.epochs, 3)
        self.assertFalse(cfg.flip)
        self.assertEqual(cfg.scales, (1.0, 1.25))
        self.assertEqual(cfg.channels, (4, 8, 8))

    def test_command_line_wins_over_file(self):
        path = self._write("epochs = 3\nbeta = 0.5\n")
        parser = argparse.ArgumentParser()
        add_config_arguments(parser)
        cfg = config_from_args(parser.parse_args(["--config", path, "--epochs", "9"]))
        self.assertEqual(cfg.epochs, 9)
        self.assertEqual(cfg.beta, 0.5)

    def test_unknown_key(self):
        with self.assertRaises(ConfigurationError):
            TrainConfig.from_file(self._write("gamma = 1\n"))

    def test_bad_values(self):
        with self.assertRaises(ConfigurationError):
            TrainConfig.from_file(self._write("epochs = many\n"))
        with self.assertRaises(ConfigurationError):
            TrainConfig.from_file(self._write("mode = strong_only\n"))
        with self.assertRaises(ConfigurationError):
            TrainConfig.from_file(self._write("beta = 1.0\n"))
        with self.assertRaises(ConfigurationError):
            TrainConfig.from_file(self._write("no equals sign\n"))

    def test_missing_file(self):
        with self.assertRaises(ConfigurationError):
            TrainConfig.from_file(os.path.join(self.directory, "none.cfg"))

    def test_replace_validates(self):
        with self.assertRaises(ConfigurationError):
            TrainConfig().replace(eval_every=0)
        self.assertEqual(TrainConfig().replace(seed=4).seed, 4)

    def test_network_meta(self):
        meta = TrainConfig(n_classes=3, channels=(4, 8, 8)).network_meta()
        self.assertEqual(meta["n_classes"], 3)
        self.assertEqual(meta["channels"], [4, 8, 8])


if __name__ == "__main__":
    unittest.main()
