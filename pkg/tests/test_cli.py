"""Tests for the ewe command line: exit codes, outputs and manifests."""

import sys
import os
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import contextlib
import io
import tempfile
import unittest
from types import SimpleNamespace
from unittest import mock

import numpy as np
import pandas as pd
import yaml

from attacks.neural_cleanse import CleanseResult
from cli.report import SUMMARY_COLUMNS
from cli.run_ewe import main
from cli.toy_demo import WATERMARK_X1, ToyResult
from nn_models.container import save_model
from nn_models.models import toy_victim
from task_data.datasets import gen_toy2d, toy_watermark_points
from watermark.ewe_trainer import EpochMetrics
from watermark.pipeline import TaskData, VictimRun
from watermark.watermark_gen import Trigger, WatermarkSet


def _run(argv):
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = main(argv)
    return code, out.getvalue(), err.getvalue()


class TestExitCodes(unittest.TestCase):

    def test_unknown_subcommand(self):
        code, _, _ = _run(["frobnicate"])
        self.assertEqual(code, 2)

    def test_unknown_config_key(self):
        with tempfile.TemporaryDirectory() as tmp:
            code, _, err = _run(["toy", "--set", "no_such_key=1", "--out-dir", tmp, "-q"])
        self.assertEqual(code, 2)
        self.assertIn("no_such_key", err)

    def test_missing_model_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            code, _, _ = _run(["verify", "--suspect", os.path.join(tmp, "none.ewem"),
                               "--wm", os.path.join(tmp, "none.ewem"), "--out-dir", tmp, "-q"])
        self.assertEqual(code, 1)


class TestCommands(unittest.TestCase):

    def test_toy_prints_table_and_writes_manifest(self):
        fake = ToyResult(1.0, np.ones(len(WATERMARK_X1), dtype=int), np.zeros(len(WATERMARK_X1), dtype=int), 0.99)
        with tempfile.TemporaryDirectory() as tmp, mock.patch("cli.run_ewe.run_toy", return_value=fake):
            code, out, _ = _run(["toy", "--out-dir", tmp, "-q"])
            with open(os.path.join(tmp, "toy.manifest.yaml")) as f:
                manifest = yaml.safe_load(f)
        self.assertEqual(code, 0)
        self.assertIn("watermark removed by extraction: yes", out)
        self.assertEqual(manifest["command"], "toy")
        self.assertEqual(manifest["seed"], 0)
        self.assertIsNotNone(manifest["finished"])

    def test_verify_claims_watermarked_model(self):
        wm = WatermarkSet(toy_watermark_points(np.linspace(0.1, 0.9, 40)), 1, 0, (0, 0), Trigger.square(1))
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "victim.ewem")
            save_model(path, toy_victim(), wm)
            code, out, _ = _run(["verify", "--suspect", path, "--wm", path, "--p0", "0.5", "--n", "30",
                                 "--out-dir", tmp, "-q"])
            table = pd.read_csv(os.path.join(tmp, "ownership.csv"))
            with open(os.path.join(tmp, "verify.manifest.yaml")) as f:
                manifest = yaml.safe_load(f)
        self.assertEqual(code, 0)
        self.assertIn("CLAIM", out)
        self.assertEqual(list(table["verdict"]), ["claim"])
        self.assertIn(path, manifest["inputs"])
        self.assertEqual(len(manifest["inputs"][path]), 64)

    def test_report_aggregates_runs(self):
        rows = []
        for label, acc in (("ewe", 0.9), ("ewe", 0.8), ("baseline", 0.95)):
            row = {"label": label}
            row.update({c: acc for c in SUMMARY_COLUMNS})
            rows.append(row)
        with tempfile.TemporaryDirectory() as tmp:
            src = os.path.join(tmp, "extraction_summary.csv")
            pd.DataFrame(rows).to_csv(src, index=False)
            code, out, _ = _run(["report", src, "--out-dir", tmp, "-q"])
            summary = pd.read_csv(os.path.join(tmp, "report.csv"))
        self.assertEqual(code, 0)
        self.assertIn("ewe (2 runs)", out)
        ewe = summary[summary["label"] == "ewe"].iloc[0]
        self.assertAlmostEqual(ewe["victim_acc_mean"], 0.85, places=5)
        self.assertEqual(int(summary[summary["label"] == "baseline"].iloc[0]["runs"]), 1)




def _toy_task():
    return TaskData(gen_toy2d(200, seed=0), gen_toy2d(100, seed=1))


def _line_wm():
    return WatermarkSet(toy_watermark_points(np.linspace(0.1, 0.9, 40)), 1, 0, (0, 0), Trigger.square(1))


class TestTrainAndAttackOutputs(unittest.TestCase):

    def test_train_writes_summary_and_tradeoff(self):
        history = [EpochMetrics(1, 0.9, 0.2, [0.1], [1.0]), EpochMetrics(2, 0.85, 0.7, [0.2], [1.0])]
        victim = VictimRun(toy_victim(), toy_victim(), _line_wm(), SimpleNamespace(history=history))
        with tempfile.TemporaryDirectory() as tmp, \
                mock.patch("cli.run_ewe.load_task", return_value=_toy_task()), \
                mock.patch("cli.run_ewe.train_victim", return_value=victim), \
                mock.patch("cli.run_ewe.false_rate", return_value=0.1) as p0:
            code, out, _ = _run(["train", "--mode", "ewe", "--out", os.path.join(tmp, "ewe.ewem"),
                                 "--out-dir", tmp, "-q"])
            summary = pd.read_csv(os.path.join(tmp, "train_summary.csv"))
            tradeoff = pd.read_csv(os.path.join(tmp, "train_ewe_tradeoff.csv"))
        self.assertEqual(code, 0)
        p0.assert_called_once()
        self.assertIn("false watermark rate 0.1000", out)
        self.assertEqual(list(summary.columns), ["mode", "seed", "test_acc", "clean_acc", "wm_success", "false_rate"])
        self.assertAlmostEqual(summary["wm_success"][0], 1.0)
        self.assertAlmostEqual(summary["false_rate"][0], 0.1)
        self.assertTrue(np.isnan(tradeoff["ratio"][0]))
        self.assertAlmostEqual(tradeoff["ratio"][1], 10.0, places=5)

    def test_fineprune_runs_once_at_configured_fraction(self):
        with tempfile.TemporaryDirectory() as tmp, \
                mock.patch("cli.run_ewe.load_task", return_value=_toy_task()), \
                mock.patch("cli.run_ewe.fine_prune", return_value=toy_victim()) as pruner:
            path = os.path.join(tmp, "victim.ewem")
            save_model(path, toy_victim(), _line_wm())
            code, _, _ = _run(["attack", "fineprune", "--model", path, "--p0", "0.5",
                               "--set", "fineprune_fraction=0.3", "--out-dir", tmp, "-q"])
            table = pd.read_csv(os.path.join(tmp, "attack_fineprune.csv"))
        self.assertEqual(code, 0)
        self.assertEqual(pruner.call_count, 1)
        self.assertAlmostEqual(pruner.call_args[0][1], 0.3)
        self.assertEqual(len(table), 1)
        self.assertAlmostEqual(table["fraction"][0], 0.3)
        self.assertAlmostEqual(table["wm_adjusted"][0], 0.5)
        self.assertEqual(int(table["queries_needed"][0]), 30)

    def test_cleanse_reports_recovered_trigger_success(self):
        result = CleanseResult(np.array([2.0, 0.5]), np.array([True, True]), 0.0, False, 1,
                               masks=[np.zeros(2), np.ones(2)], patterns=[np.zeros(2), np.array([0.1, -1.0])])
        with tempfile.TemporaryDirectory() as tmp, \
                mock.patch("cli.run_ewe.load_task", return_value=_toy_task()), \
                mock.patch("cli.run_ewe.neural_cleanse", return_value=result):
            path = os.path.join(tmp, "victim.ewem")
            save_model(path, toy_victim(), _line_wm())
            code, out, _ = _run(["attack", "cleanse", "--model", path, "--p0", "0.5", "--out-dir", tmp, "-q"])
            table = pd.read_csv(os.path.join(tmp, "attack_cleanse.csv"))
        self.assertEqual(code, 0)
        self.assertIn("not flagged", out)
        self.assertLess(table["trigger_success"][0], 0.05)
        self.assertAlmostEqual(table["trigger_success"][1], 1.0)


if __name__ == "__main__":
    unittest.main()
