import os
import shutil
import tempfile
import unittest

from collabdet.errors import ConfigurationError, InvalidInputError
from collabdet.plotting import emit_plots, epoch_limits, read_chart_series
from collabdet.run_log import ITERATION_FIELDS, IterationLog, RunLog, RunLogRow


def _sample_log():
    run_log = RunLog()
    for epoch, (weak, strong) in enumerate([(0.1, 0.2), (0.3, 0.45), (0.35, 0.5)]):
        run_log.append(RunLogRow(epoch, "CL_W", weak, weak + 0.1, loss_weak=1.5 - epoch * 0.1))
        run_log.append(RunLogRow(epoch, "CL_S", strong, strong + 0.05, loss_strong=0.9, matched_pairs=12))
    return run_log


class TestRunLog(unittest.TestCase):
    def setUp(self):
        self.directory = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.directory)

    def test_series_and_final(self):
        run_log = _sample_log()
        self.assertEqual(run_log.detectors(), ["CL_W", "CL_S"])
        self.assertEqual(run_log.series("CL_S"), ([0, 1, 2], [0.2, 0.45, 0.5]))
        self.assertEqual(run_log.final("CL_W").epoch, 2)
        self.assertIsNone(run_log.final("I_W"))

    def test_rejects_bad_rows(self):
        run_log = _sample_log()
        with self.assertRaises(InvalidInputError):
            run_log.append(RunLogRow(1, "CL_W", 0.0, 0.0))
        with self.assertRaises(InvalidInputError):
            run_log.append(RunLogRow(2, "CL_W", 0.0, 0.0))
        with self.assertRaises(InvalidInputError):
            run_log.append(RunLogRow(3, "XX", 0.0, 0.0))

    def test_csv_round_trip(self):
        run_log = _sample_log()
        path = run_log.write_csv(os.path.join(self.directory, "runlog.csv"))
        self.assertEqual(RunLog.read_csv(path), run_log)

    def test_read_missing(self):
        with self.assertRaises(ConfigurationError):
            RunLog.read_csv(os.path.join(self.directory, "none.csv"))

    def test_iteration_log(self):
        path = os.path.join(self.directory, "iterations.csv")
        with IterationLog(path) as log:
            log.write(epoch=0, iteration=0, image_id="train_0000", lr=0.001, loss_weak=1.25, extra=3)
        with open(path, encoding="utf-8") as f:
            lines = f.read().splitlines()
        self.assertEqual(lines[0], ",".join(ITERATION_FIELDS))
        self.assertTrue(lines[1].startswith("0,0,train_0000,0.001,1.25,0,"))
        self.assertEqual(log.rows, 1)


class TestEmitPlots(unittest.TestCase):
    def setUp(self):
        self.directory = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.directory)

    def test_charts_hold_the_logged_series(self):
        run_log = _sample_log()
        emitted = emit_plots(run_log, os.path.join(self.directory, "plots"))
        for path in list(emitted["charts"].values()) + [emitted["csv"]]:
            self.assertTrue(os.path.getsize(path) > 0)
        with open(emitted["charts"]["map"], encoding="utf-8") as f:
            self.assertIn("<svg", f.read())
        for metric in ("map", "corloc"):
            for tag in ("CL_W", "CL_S"):
                self.assertEqual(emitted["series"][metric][tag], run_log.series(tag, metric))
        self.assertEqual(RunLog.read_csv(emitted["csv"]), run_log)

    def test_written_svg_parses_back_to_the_series(self):
        run_log = _sample_log()
        emitted = emit_plots(run_log, os.path.join(self.directory, "plots"))
        self.assertEqual(epoch_limits(run_log), (0, 2))
        for metric in ("map", "corloc"):
            parsed = read_chart_series(emitted["charts"][metric], metric, epoch_limits(run_log))
            self.assertEqual(sorted(parsed), ["CL_S", "CL_W"])
            for tag, (epochs, values) in parsed.items():
                expected_epochs, expected_values = run_log.series(tag, metric)
                self.assertEqual(len(epochs), len(expected_epochs))
                for got, want in zip(epochs, expected_epochs):
                    self.assertAlmostEqual(got, want, places=4)
                for got, want in zip(values, expected_values):
                    self.assertAlmostEqual(got, want, places=4)

    def test_unreadable_chart(self):
        path = os.path.join(self.directory, "broken.svg")
        with open(path, "w", encoding="utf-8") as f:
            f.write("<svg")
        with self.assertRaises(ConfigurationError):
            read_chart_series(path, "map", (0, 1))

    def test_empty_log_writes_nothing(self):
        target = os.path.join(self.directory, "plots")
        self.assertIsNone(emit_plots(RunLog(), target))
        self.assertFalse(os.path.exists(target))


if __name__ == "__main__":
    unittest.main()
