#-*- coding: utf-8 -*-
"""
Dua-Loss guided adversarial training of a defense network against a frozen tracker.

Every batch runs two passes through Def -> tracker. The first pass starts from
random noise inside the l-inf ball and only produces the input gradient used
for one signed step; the second pass scores the resulting adversarial input
and is the only one that updates the defense parameters.
"""

import logging
import math
import os
import time

import numpy as np
import pandas as pd
import torch
from torch.utils.data import DataLoader
from tqdm import tqdm

from dualoss_def.checkpoint import save_checkpoint, load_checkpoint
from dualoss_def.defense import DefenseConfig, DefenseNet, VARIANTS
from dualoss_def.losses import DuaLossConfig, dua_loss
from dualoss_def.tracker import TrainingAborted, batch_tensors
from dualoss_def.utils import SlotDefinedClass, Number, check_list, seed_everything, state_checksum


logger = logging.getLogger(__name__)

LOG_COLUMNS = ["epoch", "batch", "loss_pass1", "loss_pass2", "grad_norm", "wall_ms"]

# Slack on the l-inf check for float rounding in x + delta - x.
LINF_TOLERANCE = 1e-6


class DefenseTrainingError(Exception):
    pass


class NonFiniteGradient(Exception):
    pass


class TrainConfig(SlotDefinedClass):
    __slots__ = ("epochs", "batch_size", "lr", "betas", "epsilon", "branch", "seed",
                 "init_noise", "train_pairs")
    __types__ = (int, int, Number, [Number], Number, str, int, str, int)
    __defaults__ = {
        "epochs": 10,
        "batch_size": 16,
        "lr": 0.005,
        "betas": [0.5, 0.999],
        "epsilon": 8.0 / 255.0,
        "branch": "search",
        "seed": 0,
        "init_noise": "uniform",
        "train_pairs": 1024,
    }
    __error__ = DefenseTrainingError

    def validate(self):
        if min(self.epochs, self.batch_size, self.train_pairs) <= 0 or self.lr <= 0:
            raise DefenseTrainingError("Training hyperparameters must be positive")
        check_list(self.betas, Number)
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise DefenseTrainingError("betas must be two coefficients in [0, 1)")
        if not 0 < self.epsilon < 0.5:
            raise DefenseTrainingError("epsilon must be in (0, 0.5)")
        if self.branch not in VARIANTS:
            raise DefenseTrainingError("branch must be one of {}".format(VARIANTS))
        if self.init_noise not in ("uniform", "gaussian"):
            raise DefenseTrainingError("init_noise must be 'uniform' or 'gaussian'")


def init_perturbation(shape, epsilon, generator=None, mode="uniform", dtype=torch.float32, device=None):
    if epsilon <= 0:
        return torch.zeros(shape, dtype=dtype, device=device)
    if mode == "uniform":
        u = torch.rand(shape, generator=generator, dtype=dtype, device=device)
        return (2.0 * u - 1.0) * epsilon
    if mode == "gaussian":
        n = torch.randn(shape, generator=generator, dtype=dtype, device=device)
        return torch.clamp(n * (epsilon / 2.0), -epsilon, epsilon)
    raise DefenseTrainingError("Unknown perturbation init '{}'".format(mode))


def fgsm_step(delta, grad, epsilon, x=None):
    """delta + eps * sign(grad), projected on the eps-ball and, given x, onto x + delta in [0, 1]."""
    if delta.shape != grad.shape:
        raise DefenseTrainingError("Perturbation shape {} does not match gradient {}".format(
            tuple(delta.shape), tuple(grad.shape)))
    if not torch.isfinite(grad).all():
        raise NonFiniteGradient("Non-finite input gradient")
    adv = torch.clamp(delta + epsilon * torch.sign(grad), -epsilon, epsilon)
    if x is not None:
        adv = torch.clamp(x + adv, 0.0, 1.0) - x
    return adv


class TrainingLog(object):
    def __init__(self):
        self.rows = []
        self.forward_counts = []
        self.optimizer_steps = 0
        self.skipped = 0

    def frame(self):
        return pd.DataFrame(self.rows, columns=LOG_COLUMNS)

    def epoch_means(self, column="loss_pass2"):
        df = self.frame()
        return df.groupby("epoch")[column].mean() if len(df) else pd.Series(dtype=float)


def _split(z, x, branch):
    return (z, x) if branch == "template" else (x, z)


def _join(target, other, branch):
    return (target, other) if branch == "template" else (other, target)


def train_defense(tracker, net, dataset, cfg, loss_cfg=None, log_path=None):
    """
    Adversarially train `net` in front of the `cfg.branch` input of a frozen tracker.

    The opposite branch always sees its clean patch. Returns the trained net and
    a TrainingLog; the tracker checksum is compared before and after training.
    """
    loss_cfg = loss_cfg or DuaLossConfig()
    if net.variant != cfg.branch:
        raise DefenseTrainingError("A {} defense cannot be trained on the {} branch".format(net.variant, cfg.branch))
    seed_everything(cfg.seed)
    tracker.eval()
    for p in tracker.parameters():
        p.requires_grad_(False)
    checksum = state_checksum(tracker)

    calls = [0]
    hook = tracker.register_forward_hook(lambda module, inputs, output: calls.__setitem__(0, calls[0] + 1))
    optimizer = torch.optim.Adam(net.parameters(), lr=cfg.lr, betas=tuple(cfg.betas))
    loader = DataLoader(dataset, batch_size=cfg.batch_size, shuffle=True,
                        generator=torch.Generator().manual_seed(cfg.seed))
    noise = torch.Generator().manual_seed(cfg.seed + 1)
    dtype = next(net.parameters()).dtype

    if log_path and os.path.exists(log_path):
        os.remove(log_path)
    log = TrainingLog()
    try:
        for epoch in tqdm(range(1, cfg.epochs + 1), desc="defense", disable=not logger.isEnabledFor(logging.INFO)):
            net.train()
            rows = []
            for i, batch in enumerate(loader):
                start = time.perf_counter()
                calls[0] = 0
                z, x, labels = batch_tensors(batch, dtype=dtype)
                target, other = _split(z, x, cfg.branch)

                # first pass: gradient of L_Dua w.r.t. the noisy input
                delta = init_perturbation(target.shape, cfg.epsilon, noise, cfg.init_noise, dtype)
                noisy = torch.clamp(target + delta, 0.0, 1.0).requires_grad_(True)
                loss1 = dua_loss(tracker(*_join(net(noisy), other, cfg.branch)), labels, loss_cfg)
                if not torch.isfinite(loss1):
                    raise TrainingAborted("Non-finite first-pass loss at epoch {} batch {}".format(epoch, i))
                grad, = torch.autograd.grad(loss1, noisy)
                try:
                    delta = fgsm_step(delta, grad, cfg.epsilon, target)
                except NonFiniteGradient:
                    logger.warning("Skipping epoch %d batch %d: non-finite input gradient", epoch, i)
                    log.skipped += 1
                    continue
                linf = float(delta.abs().max())
                assert linf <= cfg.epsilon + LINF_TOLERANCE, "Perturbation {} exceeds budget {}".format(linf, cfg.epsilon)

                # second pass: update theta on the adversarial input
                adv = torch.clamp(target + delta, 0.0, 1.0)
                loss2 = dua_loss(tracker(*_join(net(adv), other, cfg.branch)), labels, loss_cfg)
                if not torch.isfinite(loss2):
                    raise TrainingAborted("Non-finite second-pass loss at epoch {} batch {}".format(epoch, i))
                optimizer.zero_grad()
                loss2.backward()
                grad_norm = math.sqrt(sum(float(p.grad.pow(2).sum()) for p in net.parameters() if p.grad is not None))
                optimizer.step()
                log.optimizer_steps += 1
                log.forward_counts.append(calls[0])

                row = {"epoch": epoch, "batch": i, "loss_pass1": float(loss1), "loss_pass2": float(loss2),
                       "grad_norm": grad_norm, "wall_ms": (time.perf_counter() - start) * 1000.0}
                rows.append(row)
                log.rows.append(row)
                logger.debug("epoch %d batch %d pass1 %.4f pass2 %.4f", epoch, i, row["loss_pass1"], row["loss_pass2"])
            if log_path and rows:
                pd.DataFrame(rows, columns=LOG_COLUMNS).to_csv(
                    log_path, mode="a", header=not os.path.exists(log_path), index=False)
            if rows:
                logger.info("Epoch %d: pass1 %.4f, pass2 %.4f", epoch,
                            np.mean([r["loss_pass1"] for r in rows]), np.mean([r["loss_pass2"] for r in rows]))
    finally:
        hook.remove()

    if state_checksum(tracker) != checksum:
        raise TrainingAborted("Tracker parameters changed during defense training")
    net.eval()
    return net, log


def save_defense_checkpoint(net, cfg, path, loss_cfg=None):
    extra = {"train": cfg.json() if cfg is not None else None,
             "loss": loss_cfg.json() if loss_cfg is not None else None,
             "input_size": net.input_size}
    return save_checkpoint(path, "defense", net.state_dict(), net.cfg.json(), variant=net.variant, extra=extra)


def load_defense_checkpoint(path, variant=None):
    payload = load_checkpoint(path, "defense", variant=variant)
    cfg = DefenseConfig.from_json(payload["config"])
    net = DefenseNet(payload["variant"], payload["extra"]["input_size"], cfg)
    net.load_state_dict(payload["state_dict"])
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return net


def load_train_config(path):
    payload = load_checkpoint(path, "defense")
    train = payload["extra"].get("train")
    return TrainConfig.from_json(train) if train else None
