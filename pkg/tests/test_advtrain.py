#!/usr/bin/env python
# -*- coding: utf-8 -*-

from dualoss_def.advtrain import *
from dualoss_def.checkpoint import CheckpointError
from dualoss_def.losses import LabelBatch
from tests.fixtures import tiny_dataset, tiny_defense, tiny_tracker

import os
import shutil
import tempfile
import unittest

import torch


class TestPerturbation(unittest.TestCase):
    def test_zero_budget(self):
        self.assertTrue(torch.equal(init_perturbation((2, 3), 0.0), torch.zeros(2, 3)))

    def test_uniform(self):
        g = torch.Generator().manual_seed(0)
        d = init_perturbation((100000,), 0.1, g, dtype=torch.float64)
        self.assertLessEqual(float(d.abs().max()), 0.1)
        self.assertAlmostEqual(float(d.mean()), 0.0, places=2)
        self.assertGreater(float(d.max()), 0.099)

    def test_gaussian_is_clamped(self):
        g = torch.Generator().manual_seed(0)
        d = init_perturbation((10000,), 0.1, g, mode="gaussian")
        self.assertLessEqual(float(d.abs().max()), 0.1)
        with self.assertRaises(DefenseTrainingError):
            init_perturbation((2,), 0.1, mode="laplace")

    def test_seeded(self):
        a = init_perturbation((5,), 0.1, torch.Generator().manual_seed(4))
        b = init_perturbation((5,), 0.1, torch.Generator().manual_seed(4))
        self.assertTrue(torch.equal(a, b))


class TestFgsmStep(unittest.TestCase):
    def test_sign_step(self):
        delta = torch.tensor([0.0, 0.05, -0.05, 0.0])
        grad = torch.tensor([2.0, 1.0, 1.0, 0.0])
        out = fgsm_step(delta, grad, 0.1)
        self.assertTrue(torch.allclose(out, torch.tensor([0.1, 0.1, 0.05, 0.0])))

    def test_image_range(self):
        x = torch.tensor([0.98, 0.02])
        out = fgsm_step(torch.zeros(2), torch.tensor([1.0, -1.0]), 0.1, x)
        self.assertTrue(torch.allclose(x + out, torch.tensor([1.0, 0.0])))

    def test_errors(self):
        with self.assertRaises(DefenseTrainingError):
            fgsm_step(torch.zeros(2), torch.zeros(3), 0.1)
        with self.assertRaises(NonFiniteGradient):
            fgsm_step(torch.zeros(2), torch.tensor([float("nan"), 0.0]), 0.1)


class TestTrainConfig(unittest.TestCase):
    def test_defaults(self):
        cfg = TrainConfig()
        self.assertEqual(cfg.betas, [0.5, 0.999])
        self.assertAlmostEqual(cfg.lr, 0.005)
        self.assertAlmostEqual(cfg.epsilon, 8.0 / 255.0)

    def test_invalid(self):
        with self.assertRaises(DefenseTrainingError):
            TrainConfig(epsilon=0.0)
        with self.assertRaises(DefenseTrainingError):
            TrainConfig(branch="both")
        with self.assertRaises(DefenseTrainingError):
            TrainConfig(betas=[0.5])
        with self.assertRaises(DefenseTrainingError):
            TrainConfig(batch_size="16")


class TestTrainDefense(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.tracker = tiny_tracker()
        cls.dataset = tiny_dataset(cls.tracker, count=4)

    def _train(self, branch="search", seed=0, epochs=1):
        cfg = TrainConfig(epochs=epochs, batch_size=2, branch=branch, seed=seed, train_pairs=4)
        net = tiny_defense(branch, self.tracker, seed=seed)
        return train_defense(self.tracker, net, self.dataset, cfg)

    def test_two_passes_one_step(self):
        before = state_checksum(self.tracker)
        net, log = self._train()
        self.assertEqual(log.forward_counts, [2, 2])
        self.assertEqual(log.optimizer_steps, 2)
        self.assertEqual(log.skipped, 0)
        self.assertEqual(state_checksum(self.tracker), before)
        self.assertFalse(net.training)

    def test_parameters_move(self):
        net, _ = self._train()
        self.assertGreater(float(net.residual.weight.abs().sum()), 0.0)

    def test_log(self):
        _, log = self._train(epochs=2)
        df = log.frame()
        self.assertEqual(list(df.columns), LOG_COLUMNS)
        self.assertEqual(len(df), 4)
        self.assertEqual(len(log.epoch_means()), 2)
        self.assertTrue((df["grad_norm"] >= 0).all())

    def test_template_branch(self):
        _, log = self._train(branch="template")
        self.assertEqual(log.optimizer_steps, 2)

    def test_variant_mismatch(self):
        net = tiny_defense("template", self.tracker)
        with self.assertRaises(DefenseTrainingError):
            train_defense(self.tracker, net, self.dataset, TrainConfig(branch="search", batch_size=2))

    def test_deterministic(self):
        a, _ = self._train(seed=3)
        b, _ = self._train(seed=3)
        self.assertEqual(state_checksum(a), state_checksum(b))

    def test_fgsm_pass_does_not_lower_loss(self):
        _, log = self._train(epochs=3)
        df = log.frame()
        self.assertGreaterEqual(df["loss_pass2"].mean(), 0.95 * df["loss_pass1"].mean())

    def _recorded_inputs(self, branch):
        seen = []
        hook = self.tracker.register_forward_hook(
            lambda module, inputs, output: seen.append((inputs[0].detach().clone(), inputs[1].detach().clone())))
        try:
            self._train(branch=branch)
        finally:
            hook.remove()
        return seen

    def _is_clean(self, batch, clean):
        return all(any(torch.equal(row, ref) for ref in clean) for row in batch)

    def test_opposite_branch_stays_clean(self):
        z_clean, x_clean = self.dataset.tensors[0], self.dataset.tensors[1]
        seen = self._recorded_inputs("template")
        self.assertEqual(len(seen), 4)
        self.assertTrue(all(self._is_clean(x, x_clean) for _, x in seen))
        self.assertFalse(all(self._is_clean(z, z_clean) for z, _ in seen))

        seen = self._recorded_inputs("search")
        self.assertTrue(all(self._is_clean(z, z_clean) for z, _ in seen))
        self.assertFalse(all(self._is_clean(x, x_clean) for _, x in seen))

    def test_input_gradient_matches_finite_difference(self):
        tracker = tiny_tracker().double()
        net = tiny_defense("search", tracker, seed=1).double()
        with torch.no_grad():
            net.residual.weight.normal_(0.0, 0.01)
        z, x, cls, reg = self.dataset[0:1]
        z, x = z.double(), x.double()
        labels = LabelBatch(cls, reg.double())

        x = (0.1 + 0.8 * x).requires_grad_(True)
        loss = dua_loss(tracker(z, net(x)), labels)
        grad, = torch.autograd.grad(loss, x)

        direction = torch.randn(x.shape, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
        h = 1e-6
        with torch.no_grad():
            up = dua_loss(tracker(z, net(x + h * direction)), labels)
            down = dua_loss(tracker(z, net(x - h * direction)), labels)
        numeric = float(up - down) / (2 * h)
        analytic = float((grad * direction).sum())
        self.assertAlmostEqual(numeric, analytic, delta=1e-4 * max(1.0, abs(analytic)))


class TestDefenseCheckpoint(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.mkdtemp()
        self.tracker = tiny_tracker()

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def test_bitwise_reload(self):
        net = tiny_defense("search", self.tracker)
        with torch.no_grad():
            net.residual.bias.fill_(0.01)
        path = save_defense_checkpoint(net, TrainConfig(), os.path.join(self.tmp, "d.pt"))
        loaded = load_defense_checkpoint(path, "search")
        self.assertEqual(state_checksum(loaded), state_checksum(net))
        self.assertEqual(loaded.input_size, 128)
        self.assertEqual(load_train_config(path), TrainConfig())
        x = torch.rand(1, 3, 128, 128)
        self.assertTrue(torch.equal(loaded(x), net.eval()(x)))

    def test_wrong_variant(self):
        path = save_defense_checkpoint(tiny_defense("template", self.tracker), None,
                                       os.path.join(self.tmp, "d.pt"))
        with self.assertRaises(CheckpointError):
            load_defense_checkpoint(path, "search")

    def test_truncated(self):
        path = save_defense_checkpoint(tiny_defense("search", self.tracker), None, os.path.join(self.tmp, "d.pt"))
        with open(path, "rb") as f:
            data = f.read()
        with open(path, "wb") as f:
            f.write(data[:len(data) // 2])
        with self.assertRaises(CheckpointError):
            load_defense_checkpoint(path)

    def test_wrong_kind(self):
        from dualoss_def.tracker import save_tracker_checkpoint
        path = save_tracker_checkpoint(self.tracker, os.path.join(self.tmp, "t.pt"))
        with self.assertRaises(CheckpointError):
            load_defense_checkpoint(path)


if __name__ == "__main__":
    unittest.main()
