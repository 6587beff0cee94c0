#-*- coding: utf-8 -*-
"""
Evaluation-time attacks.

gradient_attack ascends Dua-Loss with signed steps inside the l-inf ball (FGSM is
the one-step case). Non-adaptive attacks differentiate through the tracker only;
adaptive ones through defense-then-tracker. iou_blackbox_attack only sees a
patch -> box query function and searches for the perturbation whose predicted
box overlaps the previous box the least.
"""

import logging
import math
import os

import cv2
import numpy as np
import torch

from dualoss_def.geometry import build_label_set, iou
from dualoss_def.losses import DuaLossConfig, collate_labels, dua_loss
from dualoss_def.utils import SlotDefinedClass, Number


logger = logging.getLogger(__name__)

ATTACK_KINDS = ("fgsm", "pgd", "iou_blackbox")
TARGETS = ("template", "search", "both")

# Float slack on the budget check of x + delta - x.
LINF_TOLERANCE = 1e-6


class AttackError(Exception):
    pass


class AttackConfig(SlotDefinedClass):
    __slots__ = ("kind", "epsilon", "steps", "step_size", "adaptive", "queries", "proposals",
                 "target", "iou_threshold", "label_source", "square_init", "score_weight", "seed")
    __types__ = (str, Number, int, Number, bool, int, int, str, Number, str, Number, Number, int)
    __defaults__ = {
        "kind": "pgd",
        "epsilon": 8.0 / 255.0,
        "steps": 10,
        "step_size": None,
        "adaptive": False,
        "queries": 200,
        "proposals": 10,
        "target": "search",
        "iou_threshold": 0.4,
        "label_source": "groundtruth",
        "square_init": 0.3,
        "score_weight": 1.0,
        "seed": 0,
    }
    __error__ = AttackError

    def validate(self):
        if self.kind == "iou":
            self.kind = "iou_blackbox"
        if self.kind not in ATTACK_KINDS:
            raise AttackError("Unknown attack '{}', expected one of {}".format(self.kind, ATTACK_KINDS))
        if not 0 <= self.epsilon < 0.5:
            raise AttackError("epsilon must be in [0, 0.5)")
        if self.steps < 1 or self.queries < 1 or self.proposals < 1:
            raise AttackError("steps, queries and proposals must be at least 1")
        if self.step_size is None:
            self.step_size = self.epsilon / 4.0
        if self.step_size < 0 or (self.epsilon > 0 and self.step_size == 0):
            raise AttackError("step_size must be positive")
        if self.target not in TARGETS:
            raise AttackError("Unknown attack target '{}'".format(self.target))
        if self.kind == "iou_blackbox" and self.target != "search":
            raise AttackError("The IoU attack only perturbs the search region")
        if self.label_source not in ("groundtruth", "previous"):
            raise AttackError("label_source must be 'groundtruth' or 'previous'")
        if not 0 < self.square_init <= 1:
            raise AttackError("square_init must be in (0, 1]")
        if self.score_weight < 0:
            raise AttackError("score_weight must be non-negative")

    @property
    def branches(self):
        return ("template", "search") if self.target == "both" else (self.target,)


def _schedule(cfg):
    if cfg.kind == "fgsm":
        return 1, cfg.epsilon
    return cfg.steps, cfg.step_size


def gradient_attack(tracker, z, x, labels, cfg, defense=None, loss_cfg=None):
    """Iterated signed ascent on Dua-Loss; returns the perturbed (z, x)."""
    if cfg.kind == "iou_blackbox":
        raise AttackError("gradient_attack cannot run a black-box attack")
    if cfg.adaptive and defense is None:
        raise AttackError("An adaptive attack needs a defense to adapt to")
    eps = cfg.epsilon
    if eps == 0:
        return z, x
    steps, alpha = _schedule(cfg)
    clean = {"template": z, "search": x}
    base = {b: t.detach() for b, t in clean.items()}
    deltas = {b: torch.zeros_like(base[b]) for b in cfg.branches}

    for step in range(steps):
        for d in deltas.values():
            d.requires_grad_(True)
        inputs = {b: torch.clamp(base[b] + deltas[b], 0.0, 1.0) if b in deltas else clean[b] for b in base}
        z_in, x_in = inputs["template"], inputs["search"]
        if cfg.adaptive:
            z_in, x_in = defense(z_in, x_in)
        loss = dua_loss(tracker(z_in, x_in), labels, loss_cfg)
        names = list(deltas)
        grads = torch.autograd.grad(loss, [deltas[b] for b in names])
        for b, g in zip(names, grads):
            if not torch.isfinite(g).all():
                raise AttackError("Non-finite gradient on the {} branch at step {}".format(b, step))
            d = torch.clamp(deltas[b].detach() + alpha * torch.sign(g), -eps, eps)
            deltas[b] = torch.clamp(base[b] + d, 0.0, 1.0) - base[b]

    # untouched branches keep their input object so template caches still hit
    out = {b: torch.clamp(base[b] + deltas[b], 0.0, 1.0) if b in deltas else clean[b] for b in base}
    for b in deltas:
        linf = float((out[b] - base[b]).abs().max())
        assert linf <= eps + LINF_TOLERANCE, "{} perturbation {} exceeds budget {}".format(b, linf, eps)
    return out["template"], out["search"]


class IoUAttackState(object):
    """Per-sequence carry-over: last perturbation and the IoU it achieved."""

    def __init__(self):
        self.delta = None
        self.last_iou = 1.0


def _square_size(cfg, used, side):
    # Square-attack style schedule: the square area halves as queries are spent.
    p = cfg.square_init / 2 ** int(math.log2(1 + 10.0 * used / cfg.queries))
    return max(1, int(round(math.sqrt(p) * side)))


def iou_blackbox_attack(query, x, prev_box, cfg, rng, state=None):
    """
    Random search inside the eps-ball for the perturbation whose predicted box
    overlaps prev_box the least.

    query(patch) returns a box, or (box, confidence) with the tracker's
    foreground confidence on the target region. Proposals mutate a search point
    ranked on IoU + score_weight * confidence, so the walk keeps descending
    while the predicted box has not moved yet. The result is the lowest-IoU
    query seen, ties going to the smaller ||delta||_1, and the zero perturbation
    is always the first query; a carried-over perturbation is tried next when
    the previous frame already fell below the IoU threshold.
    Returns (perturbed x, delta, best IoU).
    """
    eps = cfg.epsilon
    x = x.detach()
    used = [0]

    def evaluate(delta):
        used[0] += 1
        with torch.no_grad():
            out = query(torch.clamp(x + delta, 0.0, 1.0))
        box, confidence = out if isinstance(out, tuple) else (out, 0.0)
        overlap = iou(box, prev_box)
        l1 = float(delta.abs().sum())
        return (overlap, l1), (overlap + cfg.score_weight * confidence, l1)

    best_delta = torch.zeros_like(x)
    best, walk = evaluate(best_delta)
    walk_delta = best_delta

    if state is not None and state.delta is not None and state.last_iou < cfg.iou_threshold \
            and used[0] < cfg.queries and state.delta.shape == x.shape:
        carried = torch.clamp(x + state.delta, 0.0, 1.0) - x
        rank, walk = evaluate(carried)
        walk_delta = carried
        if rank < best:
            best, best_delta = rank, carried

    _, c, h, w = x.shape
    while used[0] < cfg.queries and eps > 0:
        round_walk, round_delta = walk, walk_delta
        for _ in range(cfg.proposals):
            if used[0] >= cfg.queries:
                break
            if float(walk_delta.abs().max()) == 0:
                # start from a vertex of the ball: random vertical stripes
                signs = rng.choice([-1.0, 1.0], size=(1, c, 1, w))
                candidate = torch.as_tensor(eps * signs, dtype=x.dtype).expand_as(x).clone()
            else:
                s = _square_size(cfg, used[0], min(h, w))
                r, q = int(rng.integers(0, h - s + 1)), int(rng.integers(0, w - s + 1))
                candidate = walk_delta.clone()
                if rng.random() < 0.25:
                    candidate[:, :, r:r + s, q:q + s] = 0.0
                else:
                    signs = torch.as_tensor(rng.choice([-1.0, 1.0], size=(1, c, 1, 1)), dtype=x.dtype)
                    candidate[:, :, r:r + s, q:q + s] = eps * signs
            candidate = torch.clamp(x + torch.clamp(candidate, -eps, eps), 0.0, 1.0) - x
            rank, objective = evaluate(candidate)
            if rank < best:
                best, best_delta = rank, candidate
            if objective < round_walk:
                round_walk, round_delta = objective, candidate
        walk, walk_delta = round_walk, round_delta

    linf = float(best_delta.abs().max())
    assert linf <= eps + LINF_TOLERANCE, "IoU attack perturbation {} exceeds budget {}".format(linf, eps)
    if state is not None:
        state.delta = best_delta
        state.last_iou = best[0]
    logger.debug("IoU attack: %d queries, IoU %.3f", used[0], best[0])
    return torch.clamp(x + best_delta, 0.0, 1.0), best_delta, best[0]


def dump_patches(directory, stem, clean, perturbed):
    """Write clean | perturbed side by side as a lossless PNG."""
    os.makedirs(directory, exist_ok=True)
    to_u8 = lambda t: np.round(t.detach().cpu().double().numpy()[0].transpose(1, 2, 0) * 255).astype(np.uint8)
    image = np.concatenate([to_u8(clean), to_u8(perturbed)], axis=1)
    path = os.path.join(directory, "{}.png".format(stem))
    cv2.imwrite(path, cv2.cvtColor(image, cv2.COLOR_RGB2BGR))
    return path


class GradientAttackHook(object):
    """Tracking-session hook running gradient_attack on every frame."""

    def __init__(self, tracker, cfg, defense=None, loss_cfg=None, dump_dir=None):
        if cfg.adaptive and defense is None:
            raise AttackError("An adaptive attack needs a defense pattern")
        self.tracker = tracker
        self.cfg = cfg
        self.defense = defense if cfg.adaptive else None
        self.loss_cfg = loss_cfg or DuaLossConfig()
        self.dump_dir = dump_dir

    def labels_for(self, context):
        box = context.gt if self.cfg.label_source == "groundtruth" and context.gt is not None else context.prev_box
        labels = build_label_set(self.tracker.grid, context.mapping.frame_to_patch(box), self.tracker.cfg.anchors)
        if labels.num_positive == 0:
            return None
        dtype = next(self.tracker.parameters()).dtype
        return collate_labels([labels], dtype=dtype)

    def __call__(self, z, x, context):
        labels = self.labels_for(context)
        if labels is None:
            logger.debug("Frame %d: no positive anchor, attack skipped", context.index)
            return z, x
        z_adv, x_adv = gradient_attack(self.tracker, z, x, labels, self.cfg, self.defense, self.loss_cfg)
        if self.dump_dir:
            dump_patches(self.dump_dir, "search-{:04d}".format(context.index), x, x_adv)
        return z_adv, x_adv


class IoUAttackHook(object):
    """Tracking-session hook running the black-box IoU attack on the search region."""

    def __init__(self, cfg, seed=0, dump_dir=None):
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        self.state = IoUAttackState()
        self.dump_dir = dump_dir
        self.ious = []

    def __call__(self, z, x, context):
        session = context.session
        query = lambda patch: session.predict(z, patch, context.mapping, defend=self.cfg.adaptive, score=True)
        x_adv, _, best = iou_blackbox_attack(query, x, context.prev_box, self.cfg, self.rng, self.state)
        self.ious.append(best)
        if self.dump_dir:
            dump_patches(self.dump_dir, "search-{:04d}".format(context.index), x, x_adv)
        return z, x_adv


def build_attack_hook(cfg, tracker, defense=None, loss_cfg=None, seed=0, dump_dir=None):
    if cfg is None:
        return None
    if cfg.kind == "iou_blackbox":
        return IoUAttackHook(cfg, seed=seed, dump_dir=dump_dir)
    return GradientAttackHook(tracker, cfg, defense=defense, loss_cfg=loss_cfg, dump_dir=dump_dir)
