#!/usr/bin/env python
# -*- coding: utf-8 -*-

from dualoss_def.evaluation import *
from dualoss_def.attacks import AttackConfig
from dualoss_def.data import Sequence
from dualoss_def.geometry import Box
from dualoss_def.tracker import ScoreMaps, track_sequence
from tests.fixtures import tiny_defense, tiny_sequences, tiny_tracker

import os
import shutil
import tempfile
import unittest

import cv2
import numpy as np
import torch


class _FakeSession(object):
    """Returns the ground truth except on `failures`, where it reports a far away box."""

    def __init__(self, failures):
        self.failures = set(failures)
        self.timings = []

    def init(self, frame, box):
        return box

    def update(self, frame, gt):
        return Box(500, 500, 10, 10) if frame in self.failures else gt


def _sequence(n=100, name="seq"):
    return Sequence(name, list(range(n)), [Box(0, 0, 10, 10)] * n)


class TestMetrics(unittest.TestCase):
    def test_success(self):
        self.assertEqual(success_auc([0.0, 0.0]), 0.0)
        self.assertAlmostEqual(success_auc([1.0] * 4), 20.0 / 21.0)
        self.assertAlmostEqual(success_auc([0.5] * 4), 10.0 / 21.0)
        self.assertAlmostEqual(success_auc([1.0, 0.5, 0.0]), 30.0 / 63.0)

    def test_precision(self):
        self.assertEqual(precision_at([0.0, 0.0]), 1.0)
        self.assertEqual(precision_at([10.0, 30.0], tau=20), 0.5)
        self.assertEqual(precision_at([5.0, 20.0, 25.0, np.inf]), 0.5)

    def test_norm_precision(self):
        self.assertEqual(norm_precision([0.0]), 1.0)
        self.assertEqual(norm_precision([10.0, 10.0]), 0.0)
        self.assertAlmostEqual(norm_precision([0.0, 0.6]), 0.5)

    def test_empty(self):
        with self.assertRaises(EvaluationError):
            success_auc([])

    def test_oracle(self):
        gt = [Box(i, 2 * i, 20, 30) for i in range(10)]
        result = evaluate_predictions("oracle", list(gt), gt)
        self.assertTrue(np.all(result.ious == 1.0))
        metrics = ope_metrics([result])
        self.assertAlmostEqual(metrics["success"], 20.0 / 21.0)
        self.assertEqual(metrics["precision"], 1.0)
        self.assertEqual(metrics["norm_precision"], 1.0)

    def test_lost_frames_score_zero(self):
        gt = [Box(0, 0, 10, 10)] * 2
        result = SequenceResult("lost", [gt[0], None], gt)
        self.assertEqual(list(result.ious), [1.0, 0.0])
        self.assertEqual(precision_at(result), 0.5)

    def test_curves(self):
        x, y = success_curve([1.0])
        self.assertEqual(len(x), 21)
        self.assertEqual(y[-1], 0.0)
        x, y = precision_curve([25.0])
        self.assertEqual(list(x), list(range(51)))
        self.assertEqual(y[24], 0.0)
        self.assertEqual(y[25], 1.0)


class TestResetProtocol(unittest.TestCase):
    def test_oracle(self):
        result = reset_sequence(_FakeSession([]), _sequence())
        self.assertEqual(reset_metrics([result]), (1.0, 0.0, 1.0))

    def test_single_failure(self):
        result = reset_sequence(_FakeSession([40]), _sequence())
        self.assertEqual(result.failures, [40])
        self.assertEqual(result.reinits, [45])
        self.assertTrue(all(b is None for b in result.boxes[41:45]))
        accuracy, robustness, eao_s = reset_metrics([result])
        self.assertEqual(robustness, 1.0)
        self.assertAlmostEqual(eao_s, 0.95)
        self.assertEqual(accuracy, 1.0)
        # burn-in frames after the re-init are left out of accuracy
        self.assertFalse(result.accuracy_mask[50])
        self.assertTrue(result.accuracy_mask[56])

    def test_failure_near_end(self):
        result = reset_sequence(_FakeSession([97]), _sequence())
        self.assertEqual(result.reinits, [])
        self.assertAlmostEqual(reset_metrics([result])[2], 97.0 / 100.0)

    def test_mean_robustness(self):
        spec = RunSpec("fake", None, [_sequence(name="a"), _sequence(name="b")])
        failures = {0: [], 1: [20, 60]}
        _, robustness, _ = run_reset_protocol(spec, session_factory=lambda i: _FakeSession(failures[i]))
        self.assertEqual(robustness, 1.0)


class TestReports(unittest.TestCase):
    def _report(self, run, success, precision=0.9, dataset="synthetic"):
        return RunReport(run, dataset, "none", "none", False, {"success": success, "precision": precision})

    def test_reported_deltas(self):
        table = compare_runs([self._report("attacked", 0.349, 0.905), self._report("defended", 0.561, 0.847)])
        row = table[(table.run == "defended") & (table.metric == "success")].iloc[0]
        self.assertEqual(row["delta"], "+0.212")
        self.assertEqual(row["delta_pct"], "+60.74%")
        row = table[(table.run == "defended") & (table.metric == "precision")].iloc[0]
        self.assertEqual(row["delta"], "-0.058")
        self.assertEqual(row["delta_pct"], "-6.40%")

    def test_baseline_rows_are_empty(self):
        table = compare_runs([self._report("a", 0.5)])
        self.assertTrue((table["delta"] == "").all())
        table = compare_runs([self._report("a", 0.5), self._report("b", 0.5)])
        self.assertEqual(list(table[table.run == "b"]["delta_pct"]), ["+0.00%", "+0.00%"])

    def test_errors(self):
        with self.assertRaises(EvaluationError):
            compare_runs([self._report("a", 0.5), self._report("b", 0.5, dataset="otb")])
        other = RunReport("c", "synthetic", "none", "none", False, {"success": 0.5})
        with self.assertRaises(EvaluationError):
            compare_runs([self._report("a", 0.5), other])
        with self.assertRaises(EvaluationError):
            compare_runs([])

    def test_zero_base(self):
        self.assertEqual(format_delta_pct(0.0, 0.3), "n/a")

    def test_frame_round_trip(self):
        reports = [self._report("a", 0.25), self._report("b", 0.75)]
        df = pd.concat([r.frame() for r in reports], ignore_index=True)
        back = RunReport.from_frame(df)
        self.assertEqual([r.run for r in back], ["a", "b"])
        self.assertEqual(back[1].metrics, {"precision": 0.9, "success": 0.75})

    def test_write_report(self):
        tmp = tempfile.mkdtemp()
        try:
            df = compare_runs([self._report("a", 0.5), self._report("b", 0.6)])
            csv_path, json_path = write_report(df, tmp, "report")
            self.assertTrue(os.path.isfile(csv_path))
            self.assertEqual(len(pd.read_json(json_path)), 4)
        finally:
            shutil.rmtree(tmp)


class TestTiming(unittest.TestCase):
    def test_stage_sum(self):
        report = timing_report([{"tracker": 1.0, "defense_search": 2.5}])
        self.assertAlmostEqual(report["total_ms"], 3.5)
        self.assertAlmostEqual(report["fps"], 1000.0 / 3.5)

    def test_delta_against_baseline(self):
        frames = [{"tracker": 9.35, "defense_template": 2.0, "defense_search": 3.36}]
        self.assertAlmostEqual(timing_report(frames, baseline_ms=9.35)["delta_ms"], -5.36)

    def test_no_defense(self):
        report = timing_report([{"tracker": 5.0}, {"tracker": 7.0}])
        self.assertEqual(report["delta_ms"], 0.0)
        self.assertEqual(report["defense_search_ms"], 0.0)

    def test_attack_is_not_inference(self):
        report = timing_report([{"tracker": 5.0, "attack": 100.0}])
        self.assertEqual(report["total_ms"], 5.0)
        self.assertEqual(report["attack_ms"], 100.0)


class TestRuns(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.tracker = tiny_tracker()
        cls.sequences = tiny_sequences(count=2, length=5)
        cls.defenses = {"template": tiny_defense("template", cls.tracker),
                        "search": tiny_defense("search", cls.tracker)}

    def setUp(self):
        self.tmp = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def _boxes(self, results):
        return [[b.json() for b in r.boxes] for r in results]

    def test_plain_run_matches_tracker(self):
        results = run_ope(RunSpec("clean", self.tracker, self.sequences))
        for r, s in zip(results, self.sequences):
            self.assertEqual(r.boxes, track_sequence(self.tracker, s.frames, s.gt[0]))
            self.assertEqual(len(r.timings), len(s) - 1)

    def test_jobs_do_not_change_results(self):
        spec = RunSpec("pgd", self.tracker, self.sequences, attack=AttackConfig(steps=2))
        self.assertEqual(self._boxes(run_ope(spec, jobs=1)), self._boxes(run_ope(spec, jobs=2)))

    def test_fresh_defense_is_identity(self):
        clean = run_ope(RunSpec("clean", self.tracker, self.sequences))
        defended = run_ope(RunSpec("both", self.tracker, self.sequences, pattern="both", defenses=self.defenses))
        self.assertEqual(self._boxes(clean), self._boxes(defended))

    def test_validation(self):
        with self.assertRaises(CheckpointError):
            RunSpec("x", self.tracker, self.sequences, pattern="search")
        with self.assertRaises(CheckpointError):
            RunSpec("x", self.tracker, self.sequences, pattern="search",
                    defenses={"search": self.defenses["template"]})
        with self.assertRaises(EvaluationError):
            RunSpec("x", self.tracker, self.sequences, attack=AttackConfig(adaptive=True))
        with self.assertRaises(EvaluationError):
            RunSpec("x", self.tracker, [])

    def test_describe(self):
        spec = RunSpec("a", self.tracker, self.sequences, pattern="search", defenses=self.defenses,
                       attack=AttackConfig(kind="iou", adaptive=True))
        self.assertEqual(spec.describe(), {"run": "a", "dataset": "synthetic", "pattern": "search",
                                           "attack": "iou_blackbox", "adaptive": True})

    def test_dump_score_maps(self):
        spec = RunSpec("pgd", self.tracker, self.sequences, pattern="search", defenses=self.defenses,
                       attack=AttackConfig(steps=1))
        paths = dump_score_maps(spec, [1, 3], self.tmp, size=64)
        self.assertEqual(len(paths), 6)
        for path in paths:
            image = cv2.imread(path, cv2.IMREAD_GRAYSCALE)
            self.assertEqual(image.shape, (64, 64))
            self.assertEqual(int(image.max()), 255)
        with self.assertRaises(EvaluationError):
            dump_score_maps(spec, [0], self.tmp)

    def test_dump_score_maps_keeps_request_order(self):
        spec = RunSpec("pgd", self.tracker, self.sequences, attack=AttackConfig(steps=1))
        paths = dump_score_maps(spec, [3, 1, 3], self.tmp, size=32)
        self.assertEqual(len(paths), 9)
        self.assertIn("-0003-clean", os.path.basename(paths[0]))
        self.assertIn("-0001-clean", os.path.basename(paths[3]))
        self.assertEqual(paths[6:], paths[:3])
        self.assertEqual(len(set(paths)), 6)

    def test_score_map_peak(self):
        grid = self.tracker.grid
        k, n = grid.num_anchors, grid.grid_h
        cls = torch.zeros(1, 2 * k, n, n)
        cls[0, k + 1, 2, 6] = 8.0
        fg = score_map(ScoreMaps(cls, torch.zeros(1, 4 * k, n, n)), grid)
        self.assertEqual(np.unravel_index(np.argmax(fg), fg.shape), (2, 6))
        self.assertEqual(fg.max(), 1.0)

    def test_plot_curves(self):
        results = run_ope(RunSpec("clean", self.tracker, self.sequences))
        paths = plot_curves({"clean": results}, self.tmp)
        self.assertEqual([os.path.basename(p) for p in paths], ["success_plot.png", "precision_plot.png"])
        self.assertTrue(all(os.path.getsize(p) > 0 for p in paths))


if __name__ == "__main__":
    unittest.main()
