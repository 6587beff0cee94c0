#!/usr/bin/env python
# -*- coding: utf-8 -*-

from dualoss_def.geometry import IGNORE, NEGATIVE, POSITIVE
from dualoss_def.losses import *
from dualoss_def.tracker import ScoreMaps

import math
import unittest

import torch


def _labels(cls, reg=None):
    cls = torch.tensor([cls], dtype=torch.long)
    if reg is None:
        reg = torch.zeros(1, cls.shape[1], 4, dtype=torch.float64)
    return LabelBatch(cls, torch.as_tensor(reg, dtype=torch.float64).reshape(1, -1, 4))


class TestSmoothL1(unittest.TestCase):
    def test_values(self):
        self.assertEqual(float(smooth_l1(0.0)), 0.0)
        self.assertAlmostEqual(float(smooth_l1(0.5)), 0.125)
        self.assertAlmostEqual(float(smooth_l1(2.0)), 1.5)
        self.assertAlmostEqual(float(smooth_l1(0.5, sigma=3.0)), 0.5 - 0.5 / 9.0)

    def test_symmetric(self):
        d = torch.linspace(-3, 3, 13, dtype=torch.float64)
        self.assertTrue(torch.equal(smooth_l1(d), smooth_l1(-d)))

    def test_bad_sigma(self):
        with self.assertRaises(LossError):
            smooth_l1(1.0, sigma=0.0)

    def test_continuous_at_the_knee(self):
        for sigma in (0.5, 1.0, 3.0):
            knee = 1.0 / sigma ** 2
            below = float(smooth_l1(knee - 1e-9, sigma))
            above = float(smooth_l1(knee + 1e-9, sigma))
            self.assertAlmostEqual(below, 0.5 / sigma ** 2, places=7)
            self.assertAlmostEqual(above, 0.5 / sigma ** 2, places=7)


class TestFlatten(unittest.TestCase):
    def test_anchor_major_layout(self):
        k, h, w = 3, 2, 4
        cls_map = torch.zeros(1, 2 * k, h, w)
        cls_map[0, 1 * k + 2, 1, 3] = 5.0
        flat = flatten_cls(cls_map)
        self.assertEqual(tuple(flat.shape), (1, k * h * w, 2))
        self.assertEqual(float(flat[0, 2 * h * w + 1 * w + 3, 1]), 5.0)
        self.assertEqual(float(flat.abs().sum()), 5.0)

        reg_map = torch.zeros(1, 4 * k, h, w)
        reg_map[0, 2 * k + 1, 0, 2] = 7.0
        flat = flatten_reg(reg_map)
        self.assertEqual(float(flat[0, 1 * h * w + 0 * w + 2, 2]), 7.0)


class TestClsLoss(unittest.TestCase):
    def test_uniform_logits(self):
        cls_map = torch.zeros(1, 2, 1, 2, dtype=torch.float64)
        loss = cls_loss(cls_map, _labels([POSITIVE, NEGATIVE]))
        self.assertAlmostEqual(float(loss), math.log(2))

    def test_perfect_logits(self):
        cls_map = torch.tensor([[[[-30.0, 30.0]], [[30.0, -30.0]]]], dtype=torch.float64)
        self.assertLess(float(cls_loss(cls_map, _labels([POSITIVE, NEGATIVE]))), 1e-12)

    def test_ignored(self):
        cls_map = torch.zeros(1, 2, 1, 2, dtype=torch.float64)
        cls_map[0, 1, 0, 1] = 100.0
        # the badly scored anchor is ignored
        self.assertAlmostEqual(float(cls_loss(cls_map, _labels([POSITIVE, IGNORE]))), math.log(2))
        with self.assertRaises(LossError):
            cls_loss(cls_map, _labels([IGNORE, IGNORE]))

    def test_shape_mismatch(self):
        with self.assertRaises(LossError):
            cls_loss(torch.zeros(1, 2, 1, 3), _labels([POSITIVE, NEGATIVE]))


class TestRegLoss(unittest.TestCase):
    def test_exact(self):
        reg = torch.tensor([[0.1, -0.2, 0.3, 0.4], [1.0, 1.0, 1.0, 1.0]], dtype=torch.float64)
        reg_map = reg.t().reshape(1, 4, 1, 2)
        self.assertEqual(float(reg_loss(reg_map, _labels([POSITIVE, NEGATIVE], reg))), 0.0)

    def test_single_positive(self):
        reg_map = torch.zeros(1, 4, 1, 2, dtype=torch.float64)
        reg_map[0, 0, 0, 0] = 0.5
        self.assertAlmostEqual(float(reg_loss(reg_map, _labels([POSITIVE, NEGATIVE]))), 0.125)

    def test_mean_over_positives(self):
        # per-anchor sums 0.2 and 0.4 (quadratic branch: 0.5 d^2)
        reg_map = torch.zeros(1, 4, 1, 3, dtype=torch.float64)
        reg_map[0, 0, 0, 0] = math.sqrt(0.4)
        reg_map[0, 0, 0, 1] = math.sqrt(0.8)
        reg_map[0, 0, 0, 2] = 5.0
        loss = reg_loss(reg_map, _labels([POSITIVE, POSITIVE, NEGATIVE]))
        self.assertAlmostEqual(float(loss), 0.3)

    def test_no_positive(self):
        with self.assertRaises(LossError):
            reg_loss(torch.zeros(1, 4, 1, 2), _labels([NEGATIVE, NEGATIVE]))


class TestDuaLoss(unittest.TestCase):
    def setUp(self):
        self.labels = _labels([POSITIVE, NEGATIVE])
        torch.manual_seed(0)
        self.maps = ScoreMaps(torch.randn(1, 2, 1, 2, dtype=torch.float64),
                              torch.randn(1, 4, 1, 2, dtype=torch.float64))

    def test_sum(self):
        total = dua_loss(self.maps, self.labels)
        expected = cls_loss(self.maps.cls, self.labels) + reg_loss(self.maps.reg, self.labels)
        self.assertAlmostEqual(float(total), float(expected))

    def test_reg_weight_zero(self):
        loss = dua_loss(self.maps, self.labels, DuaLossConfig(reg_weight=0.0))
        self.assertTrue(torch.equal(loss, cls_loss(self.maps.cls, self.labels)))

    def test_modes(self):
        self.assertTrue(torch.equal(dua_loss(self.maps, self.labels, DuaLossConfig(mode="cls")),
                                    cls_loss(self.maps.cls, self.labels)))
        self.assertTrue(torch.equal(dua_loss(self.maps, self.labels, DuaLossConfig(mode="reg")),
                                    reg_loss(self.maps.reg, self.labels)))
        with self.assertRaises(LossError):
            DuaLossConfig(mode="both")

    def test_perfect_maps(self):
        cls_map = torch.tensor([[[[-20.0, 20.0]], [[20.0, -20.0]]]], dtype=torch.float64)
        maps = ScoreMaps(cls_map, torch.zeros(1, 4, 1, 2, dtype=torch.float64))
        self.assertLess(float(dua_loss(maps, self.labels)), 1e-3)

    def test_non_negative_on_random_maps(self):
        gen = torch.Generator().manual_seed(1)
        for mode in LOSS_MODES:
            cfg = DuaLossConfig(mode=mode, sigma=2.0)
            for _ in range(20):
                k, n = 3, 4
                cls = torch.randint(-1, 2, (2, k * n * n), generator=gen)
                cls[:, 0] = POSITIVE
                labels = LabelBatch(cls, torch.randn(2, k * n * n, 4, generator=gen, dtype=torch.float64))
                maps = ScoreMaps(5 * torch.randn(2, 2 * k, n, n, generator=gen, dtype=torch.float64),
                                 5 * torch.randn(2, 4 * k, n, n, generator=gen, dtype=torch.float64))
                self.assertGreaterEqual(float(dua_loss(maps, labels, cfg)), 0.0)

    def test_collate(self):
        class _Set(object):
            def __init__(self, cls):
                self.cls = torch.tensor(cls).numpy()
                self.reg = torch.zeros(len(cls), 4).numpy()

        batch = collate_labels([_Set([1, 0]), _Set([0, -1])], dtype=torch.float64)
        self.assertEqual(tuple(batch.cls.shape), (2, 2))
        self.assertEqual(batch.cls.dtype, torch.long)
        self.assertEqual(batch.reg.dtype, torch.float64)


if __name__ == "__main__":
    unittest.main()
