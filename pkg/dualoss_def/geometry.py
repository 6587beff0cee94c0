#-*- coding: utf-8 -*-
"""
Boxes, anchors, overlaps and label/target encoding.

Boxes are stored in corner form (x, y, w, h) like OTB annotations; centers are
computed on demand. Anchor arrays are (N, 4) float64 arrays in the same form,
flattened anchor-major: flat index = k * grid_h * grid_w + row * grid_w + col,
which matches the (K, H, W) channel layout of the tracker head.
"""

import math

import numpy as np

from dualoss_def.utils import SlotDefinedClass, Number, check_list


POSITIVE = 1
NEGATIVE = 0
IGNORE = -1

# |dw|, |dh| clamp applied before exp when decoding.
MAX_LOG_SCALE = 4.0


class GeometryError(Exception):
    pass


class Box(SlotDefinedClass):
    __slots__ = ("x", "y", "w", "h")
    __types__ = (Number, Number, Number, Number)
    __error__ = GeometryError

    def __init__(self, x, y, w, h):
        super(Box, self).__init__(x=float(x), y=float(y), w=float(w), h=float(h))

    def validate(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.w, self.h)):
            raise GeometryError("Non-finite box {}".format(self))
        if self.w <= 0 or self.h <= 0:
            raise GeometryError("Degenerate box {}".format(self))

    @classmethod
    def from_center(cls, cx, cy, w, h):
        return cls(cx - w / 2.0, cy - h / 2.0, w, h)

    @classmethod
    def from_array(cls, a):
        return cls(*(float(v) for v in a))

    @property
    def cx(self):
        return self.x + self.w / 2.0

    @property
    def cy(self):
        return self.y + self.h / 2.0

    def center(self):
        return self.cx, self.cy

    def array(self):
        return np.array([self.x, self.y, self.w, self.h], dtype=np.float64)

    def json(self):
        return [self.x, self.y, self.w, self.h]


def _intersection(ax, ay, aw, ah, bx, by, bw, bh):
    iw = np.clip(np.minimum(ax + aw, bx + bw) - np.maximum(ax, bx), 0.0, None)
    ih = np.clip(np.minimum(ay + ah, by + bh) - np.maximum(ay, by), 0.0, None)
    return iw * ih


def iou(a, b):
    inter = float(_intersection(a.x, a.y, a.w, a.h, b.x, b.y, b.w, b.h))
    union = a.w * a.h + b.w * b.h - inter
    return min(max(inter / union, 0.0), 1.0)


def iou_many(boxes, box):
    """IoU of every row of an (N, 4) corner-form array against one Box."""
    boxes = np.asarray(boxes, dtype=np.float64)
    x, y, w, h = boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3]
    inter = _intersection(x, y, w, h, box.x, box.y, box.w, box.h)
    union = w * h + box.w * box.h - inter
    return np.clip(inter / union, 0.0, 1.0)


def center_error(a, b):
    return math.hypot(a.cx - b.cx, a.cy - b.cy)


def normalized_center_error(a, b):
    """Center distance with (dx, dy) scaled elementwise by the size of `b`."""
    return math.hypot((a.cx - b.cx) / b.w, (a.cy - b.cy) / b.h)


def clip_box(box, frame_w, frame_h, min_size=1.0):
    """Intersect a box with the frame, keeping at least `min_size` per side."""
    x1 = min(max(box.x, 0.0), frame_w - min_size)
    y1 = min(max(box.y, 0.0), frame_h - min_size)
    x2 = min(max(box.x + box.w, x1 + min_size), float(frame_w))
    y2 = min(max(box.y + box.h, y1 + min_size), float(frame_h))
    return Box(x1, y1, x2 - x1, y2 - y1)


class AnchorConfig(SlotDefinedClass):
    __slots__ = ("stride", "scales", "ratios", "pos_thr", "neg_thr", "pos_num", "total_num")
    __types__ = (int, [Number], [Number], Number, Number, int, int)
    __defaults__ = {
        "stride": 8,
        "scales": [32],
        "ratios": [0.5, 1.0, 2.0],
        "pos_thr": 0.6,
        "neg_thr": 0.3,
        "pos_num": 16,
        "total_num": 48,
    }
    __error__ = GeometryError

    def validate(self):
        if self.stride <= 0:
            raise GeometryError("Anchor stride must be positive")
        if not self.scales or not self.ratios:
            raise GeometryError("Anchor scales and ratios must not be empty")
        if any(s <= 0 for s in self.scales) or any(r <= 0 for r in self.ratios):
            raise GeometryError("Anchor scales and ratios must be positive")
        if not 0 <= self.neg_thr < self.pos_thr <= 1:
            raise GeometryError("Expected 0 <= neg_thr < pos_thr <= 1")
        if not 0 < self.pos_num <= self.total_num:
            raise GeometryError("Expected 0 < pos_num <= total_num")

    @property
    def num_anchors(self):
        return len(self.scales) * len(self.ratios)


class AnchorGrid(object):
    """Per-cell anchors of a score map, in search-patch pixel coordinates."""

    def __init__(self, stride, scales, ratios, grid_h, grid_w, anchors):
        self.stride = stride
        self.scales = list(scales)
        self.ratios = list(ratios)
        self.grid_h = grid_h
        self.grid_w = grid_w
        self.anchors = anchors

    @property
    def num_anchors(self):
        return len(self.scales) * len(self.ratios)

    def __len__(self):
        return self.anchors.shape[0]

    def anchor(self, index):
        return Box.from_array(self.anchors[index])

    def unravel(self, index):
        """Flat index -> (k, row, col)."""
        return np.unravel_index(index, (self.num_anchors, self.grid_h, self.grid_w))


def make_anchor_grid(cfg, grid_h, grid_w, patch_size=None):
    """
    Build the anchor grid of a (grid_h, grid_w) score map.

    Cell (row, col) is centered at patch_center + (index - (n - 1) / 2) * stride,
    so the middle cell of the map looks at the middle of the search patch. With
    no patch size the grid starts at stride / 2.
    """
    check_list(cfg.scales, Number)
    check_list(cfg.ratios, Number)
    if not cfg.scales or not cfg.ratios:
        raise GeometryError("Anchor scales and ratios must not be empty")
    if grid_h <= 0 or grid_w <= 0:
        raise GeometryError("Grid size must be positive, got {}x{}".format(grid_h, grid_w))

    shapes = []
    for ratio in cfg.ratios:
        for scale in cfg.scales:
            shapes.append((scale / math.sqrt(ratio), scale * math.sqrt(ratio)))
    shapes = np.array(shapes, dtype=np.float64)

    if patch_size is None:
        cx0 = cfg.stride * grid_w / 2.0
        cy0 = cfg.stride * grid_h / 2.0
    else:
        cx0 = cy0 = patch_size / 2.0
    cols = cx0 + (np.arange(grid_w) - (grid_w - 1) / 2.0) * cfg.stride
    rows = cy0 + (np.arange(grid_h) - (grid_h - 1) / 2.0) * cfg.stride
    cy, cx = np.meshgrid(rows, cols, indexing="ij")

    k = shapes.shape[0]
    ws = np.broadcast_to(shapes[:, 0, None, None], (k, grid_h, grid_w))
    hs = np.broadcast_to(shapes[:, 1, None, None], (k, grid_h, grid_w))
    cxs = np.broadcast_to(cx, (k, grid_h, grid_w))
    cys = np.broadcast_to(cy, (k, grid_h, grid_w))
    anchors = np.stack([cxs - ws / 2.0, cys - hs / 2.0, ws, hs], axis=-1).reshape(-1, 4)
    return AnchorGrid(cfg.stride, cfg.scales, cfg.ratios, grid_h, grid_w, anchors)


def assign_cls_labels(grid, gt, pos_thr=0.6, neg_thr=0.3):
    if not 0 <= neg_thr < pos_thr <= 1:
        raise GeometryError("Expected 0 <= neg_thr < pos_thr <= 1")
    overlaps = iou_many(grid.anchors, gt)
    labels = np.full(overlaps.shape, IGNORE, dtype=np.int64)
    labels[overlaps < neg_thr] = NEGATIVE
    labels[overlaps > pos_thr] = POSITIVE
    if not (labels == POSITIVE).any():
        best = int(np.argmax(overlaps))
        if overlaps[best] > 0:
            labels[best] = POSITIVE
    return labels


def encode_deltas(anchors, gt):
    anchors = np.atleast_2d(np.asarray(anchors, dtype=np.float64))
    aw, ah = anchors[:, 2], anchors[:, 3]
    ax = anchors[:, 0] + aw / 2.0
    ay = anchors[:, 1] + ah / 2.0
    return np.stack([
        (gt.cx - ax) / aw,
        (gt.cy - ay) / ah,
        np.log(gt.w / aw),
        np.log(gt.h / ah),
    ], axis=-1)


def encode_reg_targets(grid, gt):
    return encode_deltas(grid.anchors, gt)


def decode_box(anchor, deltas):
    dx, dy, dw, dh = (float(d) for d in deltas)
    if not all(math.isfinite(d) for d in (dx, dy, dw, dh)):
        raise GeometryError("Non-finite deltas {}".format(deltas))
    dw = min(max(dw, -MAX_LOG_SCALE), MAX_LOG_SCALE)
    dh = min(max(dh, -MAX_LOG_SCALE), MAX_LOG_SCALE)
    return Box.from_center(anchor.cx + dx * anchor.w,
                           anchor.cy + dy * anchor.h,
                           anchor.w * math.exp(dw),
                           anchor.h * math.exp(dh))


class LabelSet(object):
    """Per-anchor classification labels and regression targets of one search patch."""

    def __init__(self, cls, reg):
        assert cls.shape[0] == reg.shape[0], "Label and target counts differ"
        self.cls = cls
        self.reg = reg

    @property
    def num_positive(self):
        return int((self.cls == POSITIVE).sum())


def sample_anchors(labels, pos_num, total_num, rng):
    """Keep at most pos_num positives and total_num labeled anchors; the rest become IGNORE."""
    labels = labels.copy()
    pos = np.flatnonzero(labels == POSITIVE)
    if len(pos) > pos_num:
        labels[rng.choice(pos, len(pos) - pos_num, replace=False)] = IGNORE
        pos_kept = pos_num
    else:
        pos_kept = len(pos)
    neg = np.flatnonzero(labels == NEGATIVE)
    neg_num = total_num - pos_kept
    if len(neg) > neg_num:
        labels[rng.choice(neg, len(neg) - neg_num, replace=False)] = IGNORE
    return labels


def build_label_set(grid, gt, cfg, rng=None):
    labels = assign_cls_labels(grid, gt, cfg.pos_thr, cfg.neg_thr)
    if rng is not None:
        labels = sample_anchors(labels, cfg.pos_num, cfg.total_num, rng)
    reg = encode_reg_targets(grid, gt).astype(np.float32)
    reg[labels != POSITIVE] = 0.0
    return LabelSet(labels, reg)
