#-*- coding: utf-8 -*-
"""
A small anchor-based siamese tracker.

The network is a reduced SiamRPN: a strided convolutional backbone shared by
both branches, and one depthwise cross-correlation head per output (fore/back
ground logits, box deltas). Cropping and post-processing follow the usual
siamese tracking recipe (context-padded template, search region twice as
large, cosine window, size damping).
"""

import collections
import logging
import math
import os
import time

import cv2
import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.utils.data import DataLoader
from tqdm import tqdm

from dualoss_def.checkpoint import save_checkpoint, load_checkpoint
from dualoss_def.geometry import (AnchorConfig, Box, clip_box, decode_box,
                                  make_anchor_grid)
from dualoss_def.losses import DuaLossConfig, LabelBatch, dua_loss, flatten_cls, flatten_reg
from dualoss_def.utils import SlotDefinedClass, Number, seed_everything, state_checksum


logger = logging.getLogger(__name__)

PRESETS = {
    "toy": {"template_size": 64, "search_size": 128, "anchor_scales": [32]},
    "full": {"template_size": 127, "search_size": 255, "anchor_scales": [64]},
}


class TrackerError(Exception):
    pass


class TrainingAborted(Exception):
    pass


ScoreMaps = collections.namedtuple("ScoreMaps", ["cls", "reg"])


class TrackerConfig(SlotDefinedClass):
    __slots__ = ("preset", "template_size", "search_size", "width", "depth",
                 "context", "window_influence", "size_lr", "anchors")
    __types__ = (str, int, int, int, int, Number, Number, Number, AnchorConfig)
    __defaults__ = {
        "preset": "toy",
        "template_size": 64,
        "search_size": 128,
        "width": 16,
        "depth": 3,
        "context": 0.5,
        "window_influence": 0.3,
        "size_lr": 0.5,
        "anchors": None,
    }
    __error__ = TrackerError

    def validate(self):
        if self.anchors is None:
            self.anchors = AnchorConfig()
        if self.preset not in PRESETS:
            raise TrackerError("Unknown preset '{}'".format(self.preset))
        if self.template_size <= 0 or self.search_size <= self.template_size:
            raise TrackerError("Expected 0 < template_size < search_size")
        if not 3 <= self.depth <= 6:
            raise TrackerError("Backbone depth must be in [3, 6]")
        if self.width <= 0:
            raise TrackerError("Backbone width must be positive")
        if not 0 <= self.window_influence <= 1:
            raise TrackerError("window_influence must be in [0, 1]")
        if not 0 < self.size_lr <= 1:
            raise TrackerError("size_lr must be in (0, 1]")

    @classmethod
    def from_preset(cls, preset="toy", **overrides):
        if preset not in PRESETS:
            raise TrackerError("Unknown preset '{}'".format(preset))
        p = PRESETS[preset]
        anchors = overrides.pop("anchors", None) or AnchorConfig(scales=list(p["anchor_scales"]))
        kwargs = {"preset": preset, "template_size": p["template_size"],
                  "search_size": p["search_size"], "anchors": anchors}
        kwargs.update(overrides)
        return cls(**kwargs)

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        d["anchors"] = AnchorConfig.from_json(d.get("anchors"))
        return cls(**d)


class TrackerTrainConfig(SlotDefinedClass):
    __slots__ = ("epochs", "batch_size", "lr", "weight_decay", "train_pairs", "eval_pairs", "seed")
    __types__ = (int, int, Number, Number, int, int, int)
    __defaults__ = {
        "epochs": 20,
        "batch_size": 16,
        "lr": 0.001,
        "weight_decay": 0.0001,
        "train_pairs": 2048,
        "eval_pairs": 256,
        "seed": 0,
    }
    __error__ = TrackerError

    def validate(self):
        if min(self.epochs, self.batch_size, self.train_pairs, self.eval_pairs) <= 0 or self.lr <= 0:
            raise TrackerError("Tracker training hyperparameters must be positive")


def _conv_out(n, kernel=3, stride=2, padding=1):
    return (n + 2 * padding - kernel) // stride + 1


def feature_size(n, depth):
    for i in range(depth):
        n = _conv_out(n, stride=2 if i < 3 else 1)
    return n


def score_size(cfg):
    """Side of the correlation map: (search features - 2) - (template features - 2) + 1."""
    return feature_size(cfg.search_size, cfg.depth) - feature_size(cfg.template_size, cfg.depth) + 1


def tracker_grid(cfg):
    n = score_size(cfg)
    return make_anchor_grid(cfg.anchors, n, n, cfg.search_size)


def xcorr_depthwise(x, kernel):
    batch, channel = kernel.shape[:2]
    x = x.reshape(1, batch * channel, x.shape[2], x.shape[3])
    kernel = kernel.reshape(batch * channel, 1, kernel.shape[2], kernel.shape[3])
    out = F.conv2d(x, kernel, groups=batch * channel)
    return out.reshape(batch, channel, out.shape[2], out.shape[3])


class Backbone(nn.Module):
    def __init__(self, width, depth):
        super(Backbone, self).__init__()
        layers = []
        in_channels = 3
        for i in range(depth):
            out_channels = width * min(2 ** i, 4)
            layers += [nn.Conv2d(in_channels, out_channels, 3, stride=2 if i < 3 else 1, padding=1),
                       nn.ReLU(inplace=True)]
            in_channels = out_channels
        self.features = nn.Sequential(*layers)
        self.out_channels = in_channels

    def forward(self, x):
        return self.features(x - 0.5)


class DepthwiseXCorr(nn.Module):
    def __init__(self, in_channels, hidden, out_channels):
        super(DepthwiseXCorr, self).__init__()
        self.conv_kernel = nn.Sequential(nn.Conv2d(in_channels, hidden, 3), nn.ReLU(inplace=True))
        self.conv_search = nn.Sequential(nn.Conv2d(in_channels, hidden, 3), nn.ReLU(inplace=True))
        self.head = nn.Sequential(
            nn.Conv2d(hidden, hidden, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, out_channels, 1),
        )

    def forward(self, kernel, search):
        kernel = self.conv_kernel(kernel)
        search = self.conv_search(search)
        return self.head(xcorr_depthwise(search, kernel))


class SiameseTracker(nn.Module):
    def __init__(self, cfg):
        super(SiameseTracker, self).__init__()
        self.cfg = cfg
        k = cfg.anchors.num_anchors
        self.backbone = Backbone(cfg.width, cfg.depth)
        channels = self.backbone.out_channels
        self.cls_head = DepthwiseXCorr(channels, channels, 2 * k)
        self.reg_head = DepthwiseXCorr(channels, channels, 4 * k)
        self.score_size = score_size(cfg)
        if self.score_size <= 0:
            raise TrackerError("Template and search sizes give an empty score map")
        self.grid = tracker_grid(cfg)

    def _check(self, patch, size, role):
        if patch.dim() != 4 or tuple(patch.shape[1:]) != (3, size, size):
            raise TrackerError("Expected {} patch of shape (B, 3, {}, {}), got {}".format(
                role, size, size, tuple(patch.shape)))

    def template_features(self, z):
        self._check(z, self.cfg.template_size, "template")
        return self.backbone(z)

    def track(self, zf, x):
        self._check(x, self.cfg.search_size, "search")
        xf = self.backbone(x)
        if zf.shape[0] != xf.shape[0]:
            if zf.shape[0] != 1:
                raise TrackerError("Template batch {} does not match search batch {}".format(
                    zf.shape[0], xf.shape[0]))
            zf = zf.expand(xf.shape[0], -1, -1, -1)
        return ScoreMaps(self.cls_head(zf, xf), self.reg_head(zf, xf))

    def forward(self, z, x):
        return self.track(self.template_features(z), x)


def build_tracker(cfg, seed=0):
    torch.manual_seed(seed)
    return SiameseTracker(cfg)


def freeze(model):
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def to_tensor(patch, dtype=torch.float32, device=None):
    """HxWx3 array (or a list of them) -> (B, 3, H, W) tensor."""
    arr = np.stack(patch) if isinstance(patch, (list, tuple)) else patch[None]
    return torch.as_tensor(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)), dtype=dtype, device=device)


class CoordinateMapping(object):
    """Affine map between frame and patch coordinates (continuous, pixel edges at integers)."""

    def __init__(self, x0, y0, scale):
        self.x0 = x0
        self.y0 = y0
        self.scale = scale

    def patch_to_frame_point(self, u, v):
        return self.x0 + u / self.scale, self.y0 + v / self.scale

    def frame_to_patch_point(self, x, y):
        return (x - self.x0) * self.scale, (y - self.y0) * self.scale

    def patch_to_frame(self, box):
        x, y = self.patch_to_frame_point(box.x, box.y)
        return Box(x, y, box.w / self.scale, box.h / self.scale)

    def frame_to_patch(self, box):
        u, v = self.frame_to_patch_point(box.x, box.y)
        return Box(u, v, box.w * self.scale, box.h * self.scale)


def template_side(box, context=0.5):
    p = context * (box.w + box.h)
    return math.sqrt((box.w + p) * (box.h + p))


def crop_patch(frame, cx, cy, side, out_size):
    """Square crop centered on (cx, cy), resized to out_size, padded with the channel mean."""
    scale = out_size / side
    x0 = cx - side / 2.0
    y0 = cy - side / 2.0
    # dst pixel u (center u + 0.5) samples src pixel x0 + (u + 0.5) / scale - 0.5
    m = np.array([[1.0 / scale, 0.0, x0 + 0.5 / scale - 0.5],
                  [0.0, 1.0 / scale, y0 + 0.5 / scale - 0.5]], dtype=np.float64)
    mean = frame.reshape(-1, frame.shape[-1]).mean(axis=0)
    patch = cv2.warpAffine(frame.astype(np.float32), m, (out_size, out_size),
                           flags=cv2.INTER_LINEAR | cv2.WARP_INVERSE_MAP,
                           borderMode=cv2.BORDER_CONSTANT,
                           borderValue=tuple(float(c) for c in mean))
    return np.clip(patch, 0.0, 1.0), CoordinateMapping(x0, y0, scale)


def _check_intersects(frame, box):
    h, w = frame.shape[:2]
    if box.x >= w or box.y >= h or box.x + box.w <= 0 or box.y + box.h <= 0:
        raise TrackerError("Box {} does not intersect the {}x{} frame".format(box, w, h))


def crop_template(frame, gt, out_size, context=0.5):
    if gt.w <= 0 or gt.h <= 0:
        raise TrackerError("Degenerate template box {}".format(gt))
    _check_intersects(frame, gt)
    patch, _ = crop_patch(frame, gt.cx, gt.cy, template_side(gt, context), out_size)
    return patch


def crop_search(frame, prev, out_size, template_size, context=0.5):
    side = template_side(prev, context) * out_size / float(template_size)
    return crop_patch(frame, prev.cx, prev.cy, side, out_size)


def cosine_window(grid):
    window = np.outer(np.hanning(grid.grid_h), np.hanning(grid.grid_w))
    return np.tile(window.ravel(), grid.num_anchors)


class TrackState(object):
    def __init__(self, template, box, frame_size, window_influence=0.3, size_lr=0.5):
        self.template = template
        self.template_features = None
        self.template_source = None
        self.box = box
        self.frame_size = frame_size
        self.window_influence = window_influence
        self.size_lr = size_lr


def anchor_scores(maps):
    """Foreground probability per anchor of a batch-1 map, float64."""
    logits = flatten_cls(maps.cls.detach())[0].double()
    return F.softmax(logits, dim=-1)[:, 1].cpu().numpy()


def select_box(maps, grid, state, mapping):
    score = anchor_scores(maps)
    window = cosine_window(grid)
    pscore = score * (1 - state.window_influence) + window * state.window_influence
    # np.argmax returns the first maximum: ties go to the lowest flat index.
    best = int(np.argmax(pscore))
    deltas = flatten_reg(maps.reg.detach())[0, best].double().cpu().numpy()
    pred = mapping.patch_to_frame(decode_box(grid.anchor(best), deltas))

    prev = state.box
    w = prev.w + state.size_lr * (pred.w - prev.w)
    h = prev.h + state.size_lr * (pred.h - prev.h)
    frame_w, frame_h = state.frame_size
    return clip_box(Box.from_center(pred.cx, pred.cy, w, h), frame_w, frame_h)


def target_confidence(maps, grid, region):
    """Highest foreground probability among anchors centred inside `region` (patch coordinates)."""
    score = anchor_scores(maps)
    a = grid.anchors
    cx = a[:, 0] + a[:, 2] / 2.0
    cy = a[:, 1] + a[:, 3] / 2.0
    inside = (cx >= region.x) & (cx <= region.x + region.w) & (cy >= region.y) & (cy <= region.y + region.h)
    return float(score[inside].max()) if inside.any() else float(score.max())


FrameContext = collections.namedtuple("FrameContext", ["index", "frame", "prev_box", "mapping", "gt", "session"])


def _ms(start):
    return (time.perf_counter() - start) * 1000.0


class TrackingSession(object):
    """
    Frame-by-frame tracking with optional attack and defense hooks.

    attack(z, x, context) -> (z, x) runs on the clean patches, defense(z, x) ->
    (z, x) on whatever the attack returned, then the tracker sees the result.
    A hook returning its template input object unchanged lets the session
    reuse the cached template features.
    """

    def __init__(self, model, defense=None, attack=None):
        self.model = model
        self.defense = defense
        self.attack = attack
        self.state = None
        self.index = 0
        self.timings = []
        self._dtype = next(model.parameters()).dtype
        self._device = next(model.parameters()).device

    def init(self, frame, box):
        cfg = self.model.cfg
        z = to_tensor(crop_template(frame, box, cfg.template_size, cfg.context), self._dtype, self._device)
        self.state = TrackState(z, box, (frame.shape[1], frame.shape[0]),
                                cfg.window_influence, cfg.size_lr)
        self.index = 0
        self.timings.append({"tracker": 0.0, "defense_template": 0.0, "defense_search": 0.0, "attack": 0.0})
        return box

    def crop(self, frame):
        cfg = self.model.cfg
        patch, mapping = crop_search(frame, self.state.box, cfg.search_size, cfg.template_size, cfg.context)
        return to_tensor(patch, self._dtype, self._device), mapping

    def _features(self, z):
        state = self.state
        if state.template_source is not z:
            state.template_features = self.model.template_features(z)
            state.template_source = z
        return state.template_features

    def predict(self, z, x, mapping, defend=True, score=False):
        """
        Box for (z, x) without advancing the session; used by query attacks.
        With score=True also returns the foreground confidence on the current
        target region.
        """
        with torch.no_grad():
            if defend and self.defense is not None:
                z, x = self.defense(z, x)
            maps = self.model(z, x)
        box = select_box(maps, self.model.grid, self.state, mapping)
        if score:
            return box, target_confidence(maps, self.model.grid, mapping.frame_to_patch(self.state.box))
        return box

    def update(self, frame, gt=None):
        assert self.state is not None, "init() must be called before update()"
        self.index += 1
        timing = {"tracker": 0.0, "defense_template": 0.0, "defense_search": 0.0, "attack": 0.0}
        x, mapping = self.crop(frame)
        z = self.state.template

        if self.attack is not None:
            start = time.perf_counter()
            context = FrameContext(self.index, frame, self.state.box, mapping, gt, self)
            z, x = self.attack(z, x, context)
            timing["attack"] = _ms(start)

        with torch.no_grad():
            if self.defense is not None:
                start = time.perf_counter()
                z, x = self.defense(z, x)
                elapsed = _ms(start)
                split = getattr(self.defense, "last_timing", None)
                if split:
                    timing["defense_template"] = split.get("template", 0.0)
                    timing["defense_search"] = split.get("search", 0.0)
                else:
                    timing["defense_search"] = elapsed

            start = time.perf_counter()
            maps = self.model.track(self._features(z), x)
            box = select_box(maps, self.model.grid, self.state, mapping)
            timing["tracker"] = _ms(start)

        self.state.box = box
        self.timings.append(timing)
        return box


def track_sequence(model, frames, init, defense=None, attack=None, gt=None, session=None):
    if len(frames) == 0:
        raise TrackerError("Cannot track an empty sequence")
    session = session or TrackingSession(model, defense=defense, attack=attack)
    boxes = [session.init(frames[0], init)]
    for i in range(1, len(frames)):
        boxes.append(session.update(frames[i], gt[i] if gt is not None else None))
    return boxes


def batch_tensors(batch, device=None, dtype=torch.float32):
    z, x, cls, reg = batch
    return (z.to(device=device, dtype=dtype), x.to(device=device, dtype=dtype),
            LabelBatch(cls.to(device), reg.to(device=device, dtype=dtype)))


def evaluate_loss(model, dataset, loss_cfg=None, batch_size=64):
    model.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for batch in DataLoader(dataset, batch_size=batch_size, shuffle=False):
            z, x, labels = batch_tensors(batch)
            n = z.shape[0]
            total += float(dua_loss(model(z, x), labels, loss_cfg)) * n
            count += n
    return total / max(count, 1)


def train_baseline_tracker(cfg, train_cfg, train_set, eval_set=None, loss_cfg=None, log_path=None):
    """
    Fit the tracker on clean pairs by minimizing Dua-Loss with Adam.

    Returns the trained (frozen) model and a per-epoch history frame. Training
    stops with TrainingAborted as soon as the loss is not finite.
    """
    loss_cfg = loss_cfg or DuaLossConfig()
    seed_everything(train_cfg.seed)
    model = build_tracker(cfg, seed=train_cfg.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=train_cfg.lr, weight_decay=train_cfg.weight_decay)
    loader = DataLoader(train_set, batch_size=train_cfg.batch_size, shuffle=True,
                        generator=torch.Generator().manual_seed(train_cfg.seed))

    if log_path and os.path.exists(log_path):
        os.remove(log_path)
    history = []
    init_loss = evaluate_loss(model, eval_set, loss_cfg) if eval_set is not None else float("nan")
    logger.info("Initial held-out loss %.4f", init_loss)

    for epoch in tqdm(range(1, train_cfg.epochs + 1), desc="tracker", disable=not logger.isEnabledFor(logging.INFO)):
        model.train()
        rows = []
        for i, batch in enumerate(loader):
            start = time.perf_counter()
            z, x, labels = batch_tensors(batch)
            loss = dua_loss(model(z, x), labels, loss_cfg)
            if not torch.isfinite(loss):
                raise TrainingAborted("Non-finite tracker loss at epoch {} batch {}".format(epoch, i))
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            rows.append({"epoch": epoch, "batch": i, "loss": float(loss), "wall_ms": _ms(start)})
            logger.debug("epoch %d batch %d loss %.4f", epoch, i, float(loss))
        if log_path:
            pd.DataFrame(rows).to_csv(log_path, mode="a", header=not os.path.exists(log_path), index=False)
        train_loss = float(np.mean([r["loss"] for r in rows]))
        eval_loss = evaluate_loss(model, eval_set, loss_cfg) if eval_set is not None else float("nan")
        history.append({"epoch": epoch, "train_loss": train_loss, "eval_loss": eval_loss})
        logger.info("Epoch %d: train loss %.4f, held-out loss %.4f", epoch, train_loss, eval_loss)

    history = pd.DataFrame(history)
    history.attrs["initial_eval_loss"] = init_loss
    return freeze(model), history


def save_tracker_checkpoint(model, path, train_cfg=None):
    extra = {"train": train_cfg.json() if train_cfg is not None else None,
             "checksum": state_checksum(model)}
    return save_checkpoint(path, "tracker", model.state_dict(), model.cfg.json(), extra=extra)


def load_tracker_checkpoint(path):
    payload = load_checkpoint(path, "tracker")
    cfg = TrackerConfig.from_json(payload["config"])
    model = SiameseTracker(cfg)
    model.load_state_dict(payload["state_dict"])
    return freeze(model)
