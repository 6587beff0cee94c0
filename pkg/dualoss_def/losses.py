#-*- coding: utf-8 -*-
"""Dua-Loss: fore/background cross-entropy plus SmoothL1 box regression."""

import collections

import numpy as np
import torch
import torch.nn.functional as F

from dualoss_def.geometry import IGNORE, POSITIVE
from dualoss_def.utils import SlotDefinedClass, Number


LOSS_MODES = ("dua", "cls", "reg")


class LossError(Exception):
    pass


class DuaLossConfig(SlotDefinedClass):
    __slots__ = ("sigma", "reg_weight", "mode", "normalization")
    __types__ = (Number, Number, str, str)
    __defaults__ = {
        "sigma": 1.0,
        "reg_weight": 1.0,
        "mode": "dua",
        "normalization": "positives",
    }
    __error__ = LossError

    def validate(self):
        if self.sigma <= 0:
            raise LossError("sigma must be positive")
        if self.reg_weight < 0:
            raise LossError("reg_weight must be non-negative")
        if self.mode not in LOSS_MODES:
            raise LossError("Unknown loss mode '{}', expected one of {}".format(self.mode, LOSS_MODES))
        if self.normalization not in ("positives", "anchors"):
            raise LossError("Unknown normalization '{}'".format(self.normalization))


LabelBatch = collections.namedtuple("LabelBatch", ["cls", "reg"])


def collate_labels(label_sets, device=None, dtype=torch.float32):
    cls = torch.as_tensor(np.stack([l.cls for l in label_sets]), dtype=torch.long, device=device)
    reg = torch.as_tensor(np.stack([l.reg for l in label_sets]), dtype=dtype, device=device)
    return LabelBatch(cls, reg)


def flatten_cls(cls_map):
    """(B, 2K, H, W) -> (B, K*H*W, 2), anchor-major like geometry.AnchorGrid."""
    b, c, h, w = cls_map.shape
    return cls_map.view(b, 2, c // 2, h, w).permute(0, 2, 3, 4, 1).reshape(b, -1, 2)


def flatten_reg(reg_map):
    """(B, 4K, H, W) -> (B, K*H*W, 4)."""
    b, c, h, w = reg_map.shape
    return reg_map.view(b, 4, c // 4, h, w).permute(0, 2, 3, 4, 1).reshape(b, -1, 4)


def smooth_l1(d, sigma=1.0):
    if sigma <= 0:
        raise LossError("sigma must be positive")
    if not torch.is_tensor(d):
        d = torch.tensor(d, dtype=torch.float64)
    sigma2 = sigma * sigma
    absd = d.abs()
    return torch.where(absd < 1.0 / sigma2,
                       0.5 * sigma2 * d * d,
                       absd - 0.5 / sigma2)


def cls_loss(cls_map, labels):
    logits = flatten_cls(cls_map)
    target = labels.cls
    if target.shape != logits.shape[:2]:
        raise LossError("Label shape {} does not match map anchors {}".format(
            tuple(target.shape), tuple(logits.shape[:2])))
    if not (target != IGNORE).any():
        raise LossError("Every anchor in the batch is ignored")
    return F.cross_entropy(logits.reshape(-1, 2), target.reshape(-1), ignore_index=IGNORE)


def reg_loss(reg_map, labels, cfg=None):
    cfg = cfg or DuaLossConfig()
    pred = flatten_reg(reg_map)
    pos = labels.cls == POSITIVE
    num_pos = int(pos.sum())
    if num_pos == 0:
        raise LossError("Regression loss needs at least one positive anchor")
    diff = pred[pos] - labels.reg.to(pred.dtype)[pos]
    per_anchor = smooth_l1(diff, cfg.sigma).sum(dim=-1)
    if cfg.normalization == "positives":
        return per_anchor.sum() / num_pos
    return per_anchor.sum() / pos.numel()


def dua_loss(maps, labels, cfg=None):
    cfg = cfg or DuaLossConfig()
    if cfg.mode == "reg":
        return reg_loss(maps.reg, labels, cfg)
    loss = cls_loss(maps.cls, labels)
    if cfg.mode == "cls" or cfg.reg_weight == 0:
        return loss
    return loss + cfg.reg_weight * reg_loss(maps.reg, labels, cfg)
