#-*- coding: utf-8 -*-
"""Synthetic sequences, OTB-format loading and training-pair sampling."""

import logging
import os
import re

import cv2
import numpy as np
import torch
import yaml
from torch.utils.data import TensorDataset

from dualoss_def.geometry import Box, GeometryError, build_label_set
from dualoss_def.tracker import crop_patch, crop_template, template_side
from dualoss_def.utils import SlotDefinedClass, Number


logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".jpg", ".jpeg", ".png", ".bmp")
ANNOTATION_FILE = "groundtruth_rect.txt"
MAX_RESAMPLE = 50


class DataError(Exception):
    pass


class Sequence(object):
    def __init__(self, name, frames, gt):
        if len(frames) == 0 or len(frames) != len(gt):
            raise DataError("Sequence '{}' has {} frames and {} boxes".format(name, len(frames), len(gt)))
        self.name = name
        self.frames = frames
        self.gt = gt

    def __len__(self):
        return len(self.frames)

    def __repr__(self):
        return "<Sequence name={} frames={}>".format(self.name, len(self))


class SyntheticConfig(SlotDefinedClass):
    __slots__ = ("frame_size", "length", "target_size", "target_color", "texture",
                 "max_speed", "acceleration", "distractors", "occluder",
                 "illumination", "background_contrast")
    __types__ = ([int], int, [Number], [Number], Number, Number, Number, int, bool, Number, Number)
    __defaults__ = {
        "frame_size": [256, 256],
        "length": 60,
        "target_size": [24, 40],
        "target_color": [0.9, 0.2, 0.1],
        "texture": 0.15,
        "max_speed": 4.0,
        "acceleration": 0.8,
        "distractors": 1,
        "occluder": False,
        "illumination": 0.1,
        "background_contrast": 0.25,
    }
    __error__ = DataError

    def validate(self):
        if len(self.frame_size) != 2 or min(self.frame_size) <= 0:
            raise DataError("frame_size must be [width, height] with positive values")
        if len(self.target_size) != 2 or not 0 < self.target_size[0] <= self.target_size[1]:
            raise DataError("target_size must be [min, max] with 0 < min <= max")
        if self.target_size[1] >= min(self.frame_size):
            raise DataError("Target size {} does not fit in a {} frame".format(self.target_size, self.frame_size))
        if self.length < 1:
            raise DataError("Sequence length must be at least 1")
        if len(self.target_color) != 3:
            raise DataError("target_color must have three channels")
        if self.max_speed < 0 or self.acceleration < 0:
            raise DataError("max_speed and acceleration must be non-negative")


def _background(rng, w, h, contrast):
    noise = rng.random((h // 8 + 1, w // 8 + 1, 3)).astype(np.float32)
    noise = cv2.resize(noise, (w, h), interpolation=cv2.INTER_CUBIC)
    noise = cv2.GaussianBlur(noise, (0, 0), 3)
    base = rng.uniform(0.3, 0.6, size=3).astype(np.float32)
    return np.clip(base + contrast * (noise - 0.5), 0.0, 1.0)


def _sprite(rng, w, h, color, texture):
    """A textured rectangle with a dark border: easy to tell apart from the background."""
    sprite = np.empty((h, w, 3), dtype=np.float32)
    sprite[:] = color
    yy, xx = np.mgrid[0:h, 0:w]
    checker = ((xx // 4 + yy // 4) % 2).astype(np.float32)[..., None]
    sprite += texture * (checker - 0.5)
    sprite += 0.02 * rng.standard_normal(sprite.shape).astype(np.float32)
    sprite[:2], sprite[-2:], sprite[:, :2], sprite[:, -2:] = 0.05, 0.05, 0.05, 0.05
    return np.clip(sprite, 0.0, 1.0)


def _paste(frame, sprite, x, y):
    h, w = sprite.shape[:2]
    fh, fw = frame.shape[:2]
    x0, y0 = int(round(x)), int(round(y))
    xa, ya = max(x0, 0), max(y0, 0)
    xb, yb = min(x0 + w, fw), min(y0 + h, fh)
    if xa < xb and ya < yb:
        frame[ya:yb, xa:xb] = sprite[ya - y0:yb - y0, xa - x0:xb - x0]


class _Walker(object):
    """Smooth random walk bouncing inside [0, limit]."""

    def __init__(self, rng, pos, limit, max_speed, acceleration):
        self.rng = rng
        self.pos = np.array(pos, dtype=np.float64)
        self.limit = np.array(limit, dtype=np.float64)
        self.max_speed = max_speed
        self.acceleration = acceleration
        self.vel = rng.uniform(-max_speed, max_speed, size=2) if max_speed > 0 else np.zeros(2)

    def step(self):
        if self.max_speed > 0:
            self.vel += self.rng.normal(0.0, self.acceleration, size=2)
            speed = np.linalg.norm(self.vel)
            if speed > self.max_speed:
                self.vel *= self.max_speed / speed
        self.pos += self.vel
        for i in range(2):
            if self.pos[i] < 0:
                self.pos[i], self.vel[i] = -self.pos[i], -self.vel[i]
            elif self.pos[i] > self.limit[i]:
                self.pos[i], self.vel[i] = 2 * self.limit[i] - self.pos[i], -self.vel[i]
        self.pos = np.clip(self.pos, 0.0, self.limit)
        return self.pos.copy()


def gen_synthetic_sequence(cfg, seed, name=None):
    rng = np.random.default_rng(seed)
    fw, fh = cfg.frame_size
    tw, th = (int(round(v)) for v in rng.uniform(cfg.target_size[0], cfg.target_size[1], size=2))
    if tw >= fw or th >= fh:
        raise DataError("Target {}x{} larger than frame {}x{}".format(tw, th, fw, fh))

    background = _background(rng, fw, fh, cfg.background_contrast)
    target = _sprite(rng, tw, th, np.asarray(cfg.target_color, dtype=np.float32), cfg.texture)
    walker = _Walker(rng, rng.uniform([0, 0], [fw - tw, fh - th]), [fw - tw, fh - th],
                     cfg.max_speed, cfg.acceleration)

    distractors = []
    for _ in range(cfg.distractors):
        dw, dh = (int(round(v)) for v in rng.uniform(cfg.target_size[0], cfg.target_size[1], size=2))
        color = rng.uniform(0.0, 1.0, size=3).astype(np.float32)
        distractors.append((_sprite(rng, dw, dh, color, cfg.texture),
                            _Walker(rng, rng.uniform([0, 0], [fw - dw, fh - dh]), [fw - dw, fh - dh],
                                    cfg.max_speed, cfg.acceleration)))

    occluder_w = max(4, tw // 3)
    occluder_x = rng.uniform(0, fw)
    phase = rng.uniform(0, 2 * np.pi)

    frames, gt = [], []
    pos = walker.pos.copy()
    for i in range(cfg.length):
        if i > 0:
            pos = walker.step()
        frame = background.copy()
        for sprite, dwalker in distractors:
            dpos = dwalker.pos.copy() if i == 0 else dwalker.step()
            _paste(frame, sprite, dpos[0], dpos[1])
        x, y = round(pos[0]), round(pos[1])
        _paste(frame, target, x, y)
        if cfg.occluder:
            ox = int(occluder_x + 2.0 * i) % (fw + occluder_w) - occluder_w
            frame[:, max(ox, 0):max(ox + occluder_w, 0)] = 0.15
        if cfg.illumination:
            frame = frame * (1.0 + cfg.illumination * np.sin(phase + 2 * np.pi * i / max(cfg.length, 2)))
        frames.append(np.clip(frame, 0.0, 1.0).astype(np.float32))
        gt.append(Box(x, y, tw, th))
    return Sequence(name or "synthetic-{}".format(seed), frames, gt)


def gen_synthetic_set(cfg, count, seed):
    return [gen_synthetic_sequence(cfg, seed * 1000 + i, name="synthetic-{}-{}".format(seed, i))
            for i in range(count)]


def _frame_number(filename):
    digits = re.findall(r"\d+", os.path.splitext(filename)[0])
    return int(digits[-1]) if digits else -1


def parse_annotation_line(line, line_no):
    fields = [f for f in re.split(r"[,\s]+", line.strip()) if f]
    if len(fields) != 4:
        raise DataError("Line {}: expected 4 values 'x,y,w,h', got '{}'".format(line_no, line.strip()))
    try:
        x, y, w, h = (float(f) for f in fields)
        # OTB annotations are 1-based
        return Box(x - 1.0, y - 1.0, w, h)
    except (ValueError, GeometryError) as e:
        raise DataError("Line {}: cannot parse '{}': {}".format(line_no, line.strip(), e))


def load_otb_sequence(directory):
    img_dir = os.path.join(directory, "img")
    ann_path = os.path.join(directory, ANNOTATION_FILE)
    if not os.path.isdir(img_dir) or not os.path.isfile(ann_path):
        raise DataError("'{}' is not an OTB sequence directory (needs img/ and {})".format(directory, ANNOTATION_FILE))

    gt = []
    with open(ann_path, "r") as f:
        for line_no, line in enumerate(f, 1):
            if line.strip():
                gt.append(parse_annotation_line(line, line_no))

    names = sorted((n for n in os.listdir(img_dir) if n.lower().endswith(IMAGE_EXTENSIONS)), key=_frame_number)
    if len(names) != len(gt):
        raise DataError("'{}' has {} frames but {} annotations".format(directory, len(names), len(gt)))

    frames = []
    for n in names:
        image = cv2.imread(os.path.join(img_dir, n), cv2.IMREAD_COLOR)
        if image is None:
            raise DataError("Cannot decode frame '{}'".format(n))
        frames.append(cv2.cvtColor(image, cv2.COLOR_BGR2RGB).astype(np.float32) / 255.0)
    return Sequence(os.path.basename(os.path.normpath(directory)), frames, gt)


def save_otb_sequence(sequence, directory, generator_cfg=None, seed=None):
    """Write frames as lossless 8-bit PNG and 1-based annotations; the generator config goes alongside."""
    img_dir = os.path.join(directory, "img")
    os.makedirs(img_dir, exist_ok=True)
    for i, frame in enumerate(sequence.frames, 1):
        image = np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)
        cv2.imwrite(os.path.join(img_dir, "{:04d}.png".format(i)), cv2.cvtColor(image, cv2.COLOR_RGB2BGR))
    with open(os.path.join(directory, ANNOTATION_FILE), "w") as f:
        for box in sequence.gt:
            f.write("{!r},{!r},{!r},{!r}\n".format(box.x + 1.0, box.y + 1.0, box.w, box.h))
    if generator_cfg is not None:
        with open(os.path.join(directory, "generator.yaml"), "w") as f:
            yaml.safe_dump({"seed": seed, "synthetic": generator_cfg.json()}, f, default_flow_style=False)
    return directory


class TrainingPair(object):
    def __init__(self, template, search, labels):
        self.template = template
        self.search = search
        self.labels = labels


class PairConfig(SlotDefinedClass):
    __slots__ = ("max_gap", "max_shift", "scale_jitter")
    __types__ = (int, Number, Number)
    __defaults__ = {"max_gap": 30, "max_shift": 0.0, "scale_jitter": 0.0}
    __error__ = DataError


def sample_pair(sequence, i, j, tracker_cfg, grid, rng, pair_cfg):
    """
    Template from frame i; search from frame j centred on its box. With
    max_shift or scale_jitter set the search crop is displaced and rescaled so
    the target is not always at the patch centre.
    """
    z = crop_template(sequence.frames[i], sequence.gt[i], tracker_cfg.template_size, tracker_cfg.context)
    gt = sequence.gt[j]
    side = template_side(gt, tracker_cfg.context) * tracker_cfg.search_size / float(tracker_cfg.template_size)
    side *= float(np.exp(rng.uniform(-pair_cfg.scale_jitter, pair_cfg.scale_jitter))) if pair_cfg.scale_jitter else 1.0
    # max_shift is in search-patch pixels
    shift = rng.uniform(-pair_cfg.max_shift, pair_cfg.max_shift, size=2) * side / tracker_cfg.search_size \
        if pair_cfg.max_shift else np.zeros(2)
    x, mapping = crop_patch(sequence.frames[j], gt.cx + shift[0], gt.cy + shift[1], side, tracker_cfg.search_size)
    labels = build_label_set(grid, mapping.frame_to_patch(gt), tracker_cfg.anchors, rng)
    return TrainingPair(z, x, labels)


def sample_training_pairs(sequences, batch_size, tracker_cfg, grid, seed, pair_cfg=None):
    pair_cfg = pair_cfg or PairConfig()
    usable = [s for s in sequences if len(s) >= 2 or pair_cfg.max_gap == 0]
    if not usable:
        raise DataError("Need at least one sequence with two or more frames")
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(batch_size):
        for _attempt in range(MAX_RESAMPLE):
            seq = usable[rng.integers(len(usable))]
            i = int(rng.integers(len(seq)))
            lo, hi = max(0, i - pair_cfg.max_gap), min(len(seq) - 1, i + pair_cfg.max_gap)
            j = int(rng.integers(lo, hi + 1))
            pair = sample_pair(seq, i, j, tracker_cfg, grid, rng, pair_cfg)
            if pair.labels.num_positive > 0:
                pairs.append(pair)
                break
        else:
            raise DataError("No pair with a positive anchor after {} attempts".format(MAX_RESAMPLE))
    return pairs


def pairs_to_dataset(pairs):
    to_chw = lambda a: torch.from_numpy(np.ascontiguousarray(np.stack(a).transpose(0, 3, 1, 2)))
    return TensorDataset(
        to_chw([p.template for p in pairs]),
        to_chw([p.search for p in pairs]),
        torch.from_numpy(np.stack([p.labels.cls for p in pairs])),
        torch.from_numpy(np.stack([p.labels.reg for p in pairs])),
    )


def build_pair_dataset(sequences, count, tracker_cfg, grid, seed, pair_cfg=None):
    logger.info("Sampling %d training pairs from %d sequences", count, len(sequences))
    return pairs_to_dataset(sample_training_pairs(sequences, count, tracker_cfg, grid, seed, pair_cfg))


DATA_SOURCES = ("synthetic", "otb")


class DataConfig(SlotDefinedClass):
    """
    Where sequences come from. Synthetic splits use disjoint seed ranges; OTB
    splits list sequence directories explicitly.
    """
    __slots__ = ("source", "train_sequences", "eval_sequences", "train_dirs", "eval_dirs",
                 "synthetic", "pairs")
    __types__ = (str, int, int, [str], [str], SyntheticConfig, PairConfig)
    __defaults__ = {
        "source": "synthetic",
        "train_sequences": 16,
        "eval_sequences": 8,
        "train_dirs": [],
        "eval_dirs": [],
        "synthetic": None,
        "pairs": None,
    }
    __error__ = DataError

    def validate(self):
        if self.synthetic is None:
            self.synthetic = SyntheticConfig()
        if self.pairs is None:
            self.pairs = PairConfig()
        if self.source not in DATA_SOURCES:
            raise DataError("Unknown data source '{}', expected one of {}".format(self.source, DATA_SOURCES))
        if self.train_sequences < 1 or self.eval_sequences < 1:
            raise DataError("Need at least one training and one evaluation sequence")

    @classmethod
    def from_json(cls, d):
        d = dict(d or {})
        d["synthetic"] = SyntheticConfig.from_json(d.get("synthetic"))
        d["pairs"] = PairConfig.from_json(d.get("pairs"))
        return cls(**d)


# Evaluation sequences are drawn from their own seed range.
EVAL_SEED_OFFSET = 7919


def load_split(cfg, split, seed):
    """Return (dataset name, sequences) for the 'train' or 'eval' split."""
    if split not in ("train", "eval"):
        raise DataError("Unknown split '{}'".format(split))
    if cfg.source == "otb":
        dirs = cfg.train_dirs if split == "train" else cfg.eval_dirs
        if not dirs:
            raise DataError("No OTB directories configured for the {} split".format(split))
        return "otb", [load_otb_sequence(d) for d in dirs]
    count = cfg.train_sequences if split == "train" else cfg.eval_sequences
    offset = 0 if split == "train" else EVAL_SEED_OFFSET
    return "synthetic", gen_synthetic_set(cfg.synthetic, count, seed + offset)
