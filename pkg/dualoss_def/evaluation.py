#-*- coding: utf-8 -*-
"""
Tracking evaluation: one-pass and reset protocols, benchmark metrics, run
comparison, timing and visual dumps.

A RunSpec bundles one cell of the experiment grid (tracker, deployment pattern
with its nets, optional attack, sequences, seed). Sequences are independent and
may be evaluated on a thread pool; metric reduction is a plain fold over the
per-sequence results, so reports do not depend on the worker count.
"""

import concurrent.futures
import logging
import math
import os

import cv2
import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np
import pandas as pd
import torch

from dualoss_def.attacks import build_attack_hook
from dualoss_def.checkpoint import CheckpointError
from dualoss_def.defense import DefenseHook, DeploymentPattern, patch_size_for
from dualoss_def.geometry import center_error, iou, normalized_center_error
from dualoss_def.losses import DuaLossConfig, flatten_cls
from dualoss_def.tracker import TrackingSession


logger = logging.getLogger(__name__)

SUCCESS_THRESHOLDS = np.linspace(0.0, 1.0, 21)
NORM_PRECISION_THRESHOLDS = np.linspace(0.0, 0.5, 21)
PRECISION_CURVE_THRESHOLDS = np.arange(0, 51)
PRECISION_PX = 20.0

REINIT_GAP = 5
BURN_IN = 10

TIMING_KEYS = ("tracker", "defense_template", "defense_search", "attack")
OPE_METRICS = ("success", "precision", "norm_precision")
RESET_METRICS = ("accuracy", "robustness", "eao_s")


class EvaluationError(Exception):
    pass


class SequenceResult(object):
    """Per-frame traces of one tracked sequence."""

    def __init__(self, name, boxes, gt, timings=None, failures=(), reinits=(), accuracy_mask=None):
        if len(boxes) != len(gt):
            raise EvaluationError("Sequence '{}': {} predictions for {} ground-truth boxes".format(
                name, len(boxes), len(gt)))
        if len(boxes) == 0:
            raise EvaluationError("Sequence '{}' is empty".format(name))
        self.name = name
        self.boxes = list(boxes)
        self.gt = list(gt)
        self.ious = np.array([0.0 if p is None else iou(p, g) for p, g in zip(boxes, gt)])
        self.center_errors = np.array([np.inf if p is None else center_error(p, g) for p, g in zip(boxes, gt)])
        self.norm_center_errors = np.array(
            [np.inf if p is None else normalized_center_error(p, g) for p, g in zip(boxes, gt)])
        self.timings = list(timings or [])
        self.failures = list(failures)
        self.reinits = list(reinits)
        self.accuracy_mask = np.ones(len(boxes), dtype=bool) if accuracy_mask is None else np.asarray(accuracy_mask)

    def __len__(self):
        return len(self.boxes)

    def __repr__(self):
        return "<SequenceResult name={} frames={} mean_iou={:.3f}>".format(self.name, len(self), self.ious.mean())


def evaluate_predictions(name, pred, gt, timings=None):
    """Score predicted boxes against ground truth; a None prediction counts as a miss."""
    return SequenceResult(name, pred, gt, timings)


class RunSpec(object):
    """
    One run of the experiment grid.

    `defenses` maps a branch name to its trained DefenseNet; only the branches
    of `pattern` are used. An attack with adaptive=True needs a pattern other
    than none.
    """

    def __init__(self, name, tracker, sequences, dataset="synthetic", pattern="none", defenses=None,
                 attack=None, loss=None, seed=0, dump_dir=None):
        self.name = name
        self.tracker = tracker
        self.sequences = list(sequences)
        self.dataset = dataset
        self.pattern = DeploymentPattern.parse(pattern)
        self.defenses = dict(defenses or {})
        self.attack = attack
        self.loss = loss or DuaLossConfig()
        self.seed = seed
        self.dump_dir = dump_dir
        self.validate()

    def validate(self):
        if not self.sequences:
            raise EvaluationError("Run '{}' has no sequences".format(self.name))
        for branch in self.pattern.branches:
            net = self.defenses.get(branch)
            if net is None:
                raise CheckpointError("Run '{}' needs a {} defense checkpoint".format(self.name, branch))
            expected = patch_size_for(branch, self.tracker.cfg)
            if net.variant != branch or net.input_size != expected:
                raise CheckpointError("The {} defense ({} px, variant {}) does not fit a {} px {} patch".format(
                    branch, net.input_size, net.variant, expected, branch))
        if self.attack is not None and self.attack.adaptive and self.pattern is DeploymentPattern.NONE:
            raise EvaluationError("An adaptive attack needs a defense pattern")

    def defense_hook(self):
        if self.pattern is DeploymentPattern.NONE:
            return None
        return DefenseHook(self.pattern, self.defenses)

    def session(self, index):
        """A fresh session for sequence `index`; hooks carry per-sequence state."""
        defense = self.defense_hook()
        dump_dir = None
        if self.dump_dir and self.attack is not None:
            dump_dir = os.path.join(self.dump_dir, self.sequences[index].name)
        attack = build_attack_hook(self.attack, self.tracker, defense=defense, loss_cfg=self.loss,
                                   seed=self.seed * 1000 + index, dump_dir=dump_dir)
        return TrackingSession(self.tracker, defense=defense, attack=attack)

    def describe(self):
        return {
            "run": self.name,
            "dataset": self.dataset,
            "pattern": self.pattern.value,
            "attack": self.attack.kind if self.attack is not None else "none",
            "adaptive": bool(self.attack is not None and self.attack.adaptive),
        }


def _map_sequences(fn, spec, jobs):
    indices = range(len(spec.sequences))
    if jobs <= 1:
        return [fn(i) for i in indices]
    with concurrent.futures.ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, indices))


def ope_sequence(session, sequence):
    boxes = [session.init(sequence.frames[0], sequence.gt[0])]
    for t in range(1, len(sequence)):
        boxes.append(session.update(sequence.frames[t], sequence.gt[t]))
    # frame 0 is the initialization, not a tracked frame
    return evaluate_predictions(sequence.name, boxes, sequence.gt, timings=session.timings[1:])


def run_ope(spec, jobs=1, session_factory=None):
    """Track every sequence once from its first ground-truth box."""
    factory = session_factory or spec.session

    def one(i):
        result = ope_sequence(factory(i), spec.sequences[i])
        logger.debug("%s: %s", spec.name, result)
        return result

    results = _map_sequences(one, spec, jobs)
    logger.info("%s: OPE over %d sequences, success %.3f", spec.name, len(results), success_auc(results))
    return results


def reset_sequence(session, sequence, gap=REINIT_GAP, burn_in=BURN_IN):
    """
    Track with re-initialization: a frame with IoU 0 is a failure, the tracker
    is restarted from ground truth `gap` frames later. Frames inside the gap
    count as zero overlap. Accuracy ignores frame 0, re-init frames, failure
    gaps and the `burn_in` frames following each re-init.
    """
    n = len(sequence)
    boxes = [None] * n
    mask = np.zeros(n, dtype=bool)
    failures, reinits = [], []
    boxes[0] = session.init(sequence.frames[0], sequence.gt[0])
    skip_until = 0
    t = 1
    while t < n:
        box = session.update(sequence.frames[t], sequence.gt[t])
        boxes[t] = box
        if iou(box, sequence.gt[t]) == 0.0:
            failures.append(t)
            restart = t + gap
            if restart < n:
                boxes[restart] = session.init(sequence.frames[restart], sequence.gt[restart])
                reinits.append(restart)
                skip_until = restart + burn_in
            t = restart + 1
            continue
        mask[t] = t > skip_until
        t += 1
    return SequenceResult(sequence.name, boxes, sequence.gt, failures=failures, reinits=reinits,
                          accuracy_mask=mask)


def reset_metrics(results):
    """(accuracy, robustness, eao_s) over reset-protocol results."""
    if not results:
        raise EvaluationError("No sequences to score")
    counted = np.concatenate([r.ious[r.accuracy_mask] for r in results])
    accuracy = float(counted.mean()) if counted.size else float("nan")
    robustness = float(np.mean([len(r.failures) for r in results]))
    eao_s = float(np.mean([r.ious.sum() / len(r) for r in results]))
    return accuracy, robustness, eao_s


def run_reset(spec, jobs=1, session_factory=None, gap=REINIT_GAP, burn_in=BURN_IN):
    factory = session_factory or spec.session
    return _map_sequences(lambda i: reset_sequence(factory(i), spec.sequences[i], gap, burn_in), spec, jobs)


def run_reset_protocol(spec, jobs=1, session_factory=None, gap=REINIT_GAP, burn_in=BURN_IN):
    accuracy, robustness, eao_s = reset_metrics(run_reset(spec, jobs, session_factory, gap, burn_in))
    logger.info("%s: accuracy %.3f, robustness %.3f, eao_s %.3f", spec.name, accuracy, robustness, eao_s)
    return accuracy, robustness, eao_s


def _pool(results, attr):
    """Concatenate one per-frame trace over results; raw arrays pass through."""
    if isinstance(results, SequenceResult):
        results = [results]
    if len(results) and hasattr(results[0], attr):
        values = np.concatenate([getattr(r, attr) for r in results])
    else:
        values = np.asarray(results, dtype=float).ravel()
    if values.size == 0:
        raise EvaluationError("Metrics need at least one frame")
    return values


def success_curve(results):
    ious = _pool(results, "ious")
    return SUCCESS_THRESHOLDS, np.array([np.mean(ious > t) for t in SUCCESS_THRESHOLDS])


def success_auc(results):
    return float(success_curve(results)[1].mean())


def precision_curve(results, thresholds=PRECISION_CURVE_THRESHOLDS):
    errors = _pool(results, "center_errors")
    return thresholds, np.array([np.mean(errors <= t) for t in thresholds])


def precision_at(results, tau=PRECISION_PX):
    return float(np.mean(_pool(results, "center_errors") <= tau))


def norm_precision(results):
    errors = _pool(results, "norm_center_errors")
    return float(np.mean([np.mean(errors <= t) for t in NORM_PRECISION_THRESHOLDS]))


def ope_metrics(results):
    return {"success": success_auc(results), "precision": precision_at(results),
            "norm_precision": norm_precision(results)}


# Reports

def _frame_timings(results):
    rows = []
    for r in results:
        rows.extend(r.timings if isinstance(r, SequenceResult) else [r])
    return pd.DataFrame(rows, columns=list(TIMING_KEYS)).fillna(0.0)


def timing_report(results, baseline_ms=None):
    """
    Mean per-frame milliseconds per stage. Inference time is tracker plus both
    defense stages; the attack is reported apart. delta_ms is baseline minus
    inference time, so added overhead shows as a negative number. Without a
    baseline the run's own tracker time is used.
    """
    df = _frame_timings(results)
    means = {k: float(df[k].mean()) if len(df) else 0.0 for k in TIMING_KEYS}
    total = means["tracker"] + means["defense_template"] + means["defense_search"]
    baseline = means["tracker"] if baseline_ms is None else float(baseline_ms)
    report = {"{}_ms".format(k): v for k, v in means.items()}
    report.update({
        "total_ms": total,
        "fps": 1000.0 / total if total > 0 else float("inf"),
        "delta_ms": round(baseline - total, 6),
    })
    return report


def truncate(value, digits=2):
    """Truncate toward zero after rounding away float noise."""
    scale = 10 ** digits
    return math.trunc(round(value * scale, 6)) / scale


def format_delta_pct(base, value):
    if base == 0:
        return "n/a"
    return "{:+.2f}%".format(truncate((value - base) / base * 100.0))


def format_delta(base, value):
    return "{:+.3f}".format(round(value - base, 6))


class RunReport(object):
    """Metrics of one run plus what produced them."""

    def __init__(self, run, dataset, pattern, attack, adaptive, metrics, timing=None, protocol="ope"):
        self.run = run
        self.dataset = dataset
        self.pattern = pattern
        self.attack = attack
        self.adaptive = bool(adaptive)
        self.metrics = dict(metrics)
        self.timing = dict(timing) if timing else None
        self.protocol = protocol

    @classmethod
    def from_spec(cls, spec, metrics, timing=None, protocol="ope"):
        d = spec.describe()
        return cls(d["run"], d["dataset"], d["pattern"], d["attack"], d["adaptive"], metrics, timing, protocol)

    def rows(self):
        return [{"run": self.run, "dataset": self.dataset, "pattern": self.pattern, "attack": self.attack,
                 "adaptive": self.adaptive, "protocol": self.protocol, "metric": m, "value": float(v)}
                for m, v in sorted(self.metrics.items())]

    def frame(self):
        return pd.DataFrame(self.rows())

    @classmethod
    def from_frame(cls, df):
        reports = []
        for run, group in df.groupby("run", sort=False):
            first = group.iloc[0]
            metrics = dict(zip(group["metric"], group["value"].astype(float)))
            reports.append(cls(run, first["dataset"], first["pattern"], first["attack"],
                               bool(first["adaptive"]), metrics, protocol=first.get("protocol", "ope")))
        return reports


def compare_runs(reports, baseline=0):
    """
    One row per (run, metric) with absolute and relative deltas against the
    baseline report. The baseline's own rows carry empty deltas.
    """
    if not reports:
        raise EvaluationError("Nothing to compare")
    base = reports[baseline]
    datasets = set(r.dataset for r in reports)
    if len(datasets) > 1:
        raise EvaluationError("Cannot compare runs over different datasets: {}".format(sorted(datasets)))
    for r in reports:
        if set(r.metrics) != set(base.metrics):
            raise EvaluationError("Run '{}' reports {} but the baseline reports {}".format(
                r.run, sorted(r.metrics), sorted(base.metrics)))

    rows = []
    for k, r in enumerate(reports):
        for row in r.rows():
            if k == baseline:
                row.update({"delta": "", "delta_pct": ""})
            else:
                b = base.metrics[row["metric"]]
                row.update({"delta": format_delta(b, row["value"]), "delta_pct": format_delta_pct(b, row["value"])})
            rows.append(row)
    return pd.DataFrame(rows, columns=["run", "dataset", "pattern", "attack", "adaptive", "protocol",
                                       "metric", "value", "delta", "delta_pct"])


def timing_table(reports, baseline=0):
    rows = []
    base = reports[baseline].timing if reports and reports[baseline].timing else None
    for r in reports:
        if not r.timing:
            continue
        delta = round(base["total_ms"] - r.timing["total_ms"], 6) if base else r.timing["delta_ms"]
        rows.append({"run": r.run, "pattern": r.pattern, "fps": r.timing["fps"],
                     "inference_ms": r.timing["total_ms"], "delta_ms": delta,
                     "tracker_ms": r.timing["tracker_ms"], "defense_template_ms": r.timing["defense_template_ms"],
                     "defense_search_ms": r.timing["defense_search_ms"]})
    return pd.DataFrame(rows)


def write_report(df, directory, stem="report"):
    os.makedirs(directory, exist_ok=True)
    csv_path = os.path.join(directory, stem + ".csv")
    json_path = os.path.join(directory, stem + ".json")
    df.to_csv(csv_path, index=False, float_format="%.6f")
    df.to_json(json_path, orient="records", indent=2, double_precision=6)
    return csv_path, json_path


def render_table(df):
    if df.empty:
        return "(empty)"
    return df.to_string(index=False, float_format=lambda v: "{:.3f}".format(v))


def plot_curves(results_by_run, directory):
    """Success and precision plots, one line per run, legend carrying the score."""
    os.makedirs(directory, exist_ok=True)
    paths = []
    for kind in ("success", "precision"):
        fig, ax = plt.subplots()
        for run, results in results_by_run.items():
            if kind == "success":
                x, y = success_curve(results)
                label = "{} [{:.3f}]".format(run, y.mean())
            else:
                x, y = precision_curve(results)
                label = "{} [{:.3f}]".format(run, precision_at(results))
            ax.plot(x, y, label=label)
        if kind == "success":
            ax.set(xlabel="Overlap threshold", ylabel="Success rate", xlim=(0, 1), ylim=(0, 1),
                   title="Success plots of OPE")
        else:
            ax.set(xlabel="Location error threshold", ylabel="Precision",
                   xlim=(0, PRECISION_CURVE_THRESHOLDS[-1]), ylim=(0, 1), title="Precision plots of OPE")
        ax.grid(True)
        ax.legend(loc="lower left" if kind == "success" else "lower right")
        fig.tight_layout()
        path = os.path.join(directory, kind + "_plot.png")
        fig.savefig(path, dpi=150)
        plt.close(fig)
        paths.append(path)
    return paths


# Score map dumps

def score_map(maps, grid):
    """Foreground probability maxed over anchors, scaled so the peak is 1."""
    probs = torch.softmax(flatten_cls(maps.cls.detach())[0].double(), dim=-1)[:, 1].cpu().numpy()
    fg = probs.reshape(grid.num_anchors, grid.grid_h, grid.grid_w).max(axis=0)
    peak = fg.max()
    return fg / peak if peak > 0 else fg


class _CaptureHook(object):
    def __init__(self, inner, frames):
        self.inner = inner
        self.frames = set(frames)
        self.captured = {}

    def __call__(self, z, x, context):
        z_adv, x_adv = self.inner(z, x, context) if self.inner is not None else (z, x)
        if context.index in self.frames:
            self.captured[context.index] = (z.detach(), x.detach(), z_adv.detach(), x_adv.detach())
        return z_adv, x_adv


def _write_map(path, fg, size):
    image = np.round(np.clip(fg, 0.0, 1.0) * 255.0).astype(np.uint8)
    cv2.imwrite(path, cv2.resize(image, (size, size), interpolation=cv2.INTER_NEAREST))


def dump_score_maps(spec, frame_indices, directory, sequence_index=0, size=128):
    """
    Track one sequence of `spec` and write the clean, attacked and defended
    score maps of each requested frame as grayscale PNGs. Paths come back
    three per requested index, in the order given; a repeated index rewrites
    the same files.
    """
    sequence = spec.sequences[sequence_index]
    for t in frame_indices:
        if not 1 <= t < len(sequence):
            raise EvaluationError("Frame {} is not a tracked frame of '{}'".format(t, sequence.name))
    session = spec.session(sequence_index)
    capture = _CaptureHook(session.attack, frame_indices)
    session.attack = capture
    ope_sequence(session, sequence)

    os.makedirs(directory, exist_ok=True)
    model, grid = spec.tracker, spec.tracker.grid
    defense = spec.defense_hook()
    paths = []
    with torch.no_grad():
        for t in frame_indices:
            z, x, z_adv, x_adv = capture.captured[t]
            variants = [("clean", model(z, x)), ("attacked", model(z_adv, x_adv)),
                        ("defended", model(*defense(z_adv, x_adv)) if defense else model(z_adv, x_adv))]
            for label, maps in variants:
                path = os.path.join(directory, "{}-{:04d}-{}.png".format(sequence.name, t, label))
                _write_map(path, score_map(maps, grid), size)
                paths.append(path)
    return paths
