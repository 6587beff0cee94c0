#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
Desk-scale acceptance run.

Trains a tracker, a Dua-Loss search defense, the loss-ablation defenses and a
second tracker for the transfer check, evaluates the clean/attacked/defended
grid and checks the direction criteria against their thresholds. The core
pipeline is run twice with the same seed to check that its reports and
weights are reproduced exactly.
"""

from __future__ import print_function

import logging
import os

import numpy as np
import pandas as pd

from dualoss_def.advtrain import save_defense_checkpoint, train_defense
from dualoss_def.config import attack_config, load_config, run_command, save_config
from dualoss_def.data import build_pair_dataset, load_split
from dualoss_def.defense import build_defense_net, patch_size_for
from dualoss_def.evaluation import (RunReport, RunSpec, compare_runs, ope_metrics, render_table, run_ope,
                                    write_report)
from dualoss_def.tracker import save_tracker_checkpoint, tracker_grid, train_baseline_tracker
from dualoss_def.utils import base_parse_args, file_checksum, seed_everything, state_checksum


logger = logging.getLogger(__name__)

COLUMNS = ["criterion", "description", "value", "threshold", "passed"]

# (run name, pattern, attack, adaptive) of the core evaluation grid
CORE_RUNS = [
    ("clean", "none", "none", False),
    ("attacked", "none", "pgd", False),
    ("defended-clean", "search", "none", False),
    ("defended", "search", "pgd", False),
    ("defended-adaptive", "search", "pgd", True),
]
REPORT_FILES = ("report.csv", "report.json")


def get_args(argv=None):
    from argparse import ArgumentParser
    parser = ArgumentParser(description="Train and evaluate everything the acceptance criteria need.")

    parser.add_argument("config", help="Experiment YAML file.")
    parser.add_argument("--ablation-seeds", type=int, default=3,
                        help="Seeds averaged for the loss ablation.")
    parser.add_argument("--transfer-width", type=int,
                        help="Backbone width of the second tracker (default: twice the first).")
    parser.add_argument("--skip-determinism", action="store_true",
                        help="Do not rerun the core pipeline.")
    parser.add_argument("--seed", type=int, help="Override the experiment seed.")
    parser.add_argument("--output-dir", help="Override the output directory.")

    return base_parse_args(parser, __name__, argv)


class Splits(object):
    def __init__(self, cfg):
        self.dataset, self.eval = load_split(cfg.data, "eval", cfg.seed)
        _, self.train = load_split(cfg.data, "train", cfg.seed)


def train_tracker(cfg, splits, tracker_cfg, seed):
    train_cfg = cfg.tracker_training.replace(seed=seed)
    grid = tracker_grid(tracker_cfg)
    train_set = build_pair_dataset(splits.train, train_cfg.train_pairs, tracker_cfg, grid, seed, cfg.data.pairs)
    eval_set = build_pair_dataset(splits.eval, train_cfg.eval_pairs, tracker_cfg, grid, seed + 1, cfg.data.pairs)
    model, _ = train_baseline_tracker(tracker_cfg, train_cfg, train_set, eval_set, cfg.loss)
    return model


def train_search_defense(cfg, splits, tracker, mode, seed):
    train_cfg = cfg.training.replace(branch="search", seed=seed)
    loss_cfg = cfg.loss.replace(mode=mode)
    dataset = build_pair_dataset(splits.train, train_cfg.train_pairs, tracker.cfg, tracker.grid, seed, cfg.data.pairs)
    net = build_defense_net("search", patch_size_for("search", tracker.cfg), seed=seed, cfg=cfg.defense)
    net, _ = train_defense(tracker, net, dataset, train_cfg, loss_cfg)
    return net


def evaluate_run(cfg, splits, name, tracker, pattern="none", net=None, attack="none", adaptive=False):
    seed_everything(cfg.seed)
    spec = RunSpec(name, tracker, splits.eval, dataset=splits.dataset, pattern=pattern,
                   defenses={"search": net} if net is not None else None,
                   attack=attack_config(cfg, attack, adaptive=adaptive), loss=cfg.loss, seed=cfg.seed)
    results = run_ope(spec, jobs=cfg.evaluation.jobs)
    metrics = ope_metrics(results)
    # frame 0 is the given initialization
    metrics["mean_iou"] = float(np.mean(np.concatenate([r.ious[1:] for r in results])))
    return RunReport.from_spec(spec, metrics)


def core_pipeline(cfg, splits, directory):
    """Tracker, Dua-Loss search defense and the core grid; reports and weights land in `directory`."""
    logger.info("Core pipeline into %s", directory)
    tracker = train_tracker(cfg, splits, cfg.tracker, cfg.tracker_training.seed)
    net = train_search_defense(cfg, splits, tracker, "dua", cfg.training.seed)
    reports = [evaluate_run(cfg, splits, name, tracker, pattern, net if pattern != "none" else None, attack, adaptive)
               for name, pattern, attack, adaptive in CORE_RUNS]
    write_report(compare_runs(reports), directory, "report")
    save_tracker_checkpoint(tracker, os.path.join(directory, "tracker.pt"), cfg.tracker_training)
    save_defense_checkpoint(net, cfg.training, os.path.join(directory, "defense-search.pt"), cfg.loss)
    success = {r.run: r.metrics["success"] for r in reports}
    return tracker, net, success, reports[0].metrics["mean_iou"]


def _ratio(num, den):
    return num / den if den > 0 else float("nan")


def _row(criterion, description, value, threshold, passed):
    return {"criterion": criterion, "description": description, "value": float(value),
            "threshold": threshold, "passed": bool(passed)}


def core_criteria(s, mean_iou):
    clean, attacked = s["clean"], s["attacked"]
    drop = _ratio(clean - attacked, clean)
    recovered = _ratio(s["defended"] - attacked, clean - attacked)
    degradation = _ratio(abs(s["defended-clean"] - clean), clean)
    return [
        _row("tracker", "clean mean IoU of the trained tracker", mean_iou, ">= 0.6", mean_iou >= 0.6),
        _row("4", "PGD relative success drop vs clean", drop, ">= 0.30", drop >= 0.30),
        _row("5", "share of the clean-attacked gap recovered by the search defense", recovered, ">= 0.40",
             recovered >= 0.40),
        _row("6", "adaptive PGD defended success (<= non-adaptive, > undefended attacked)", s["defended-adaptive"],
             "<= {:.6f}, > {:.6f}".format(s["defended"], attacked),
             attacked < s["defended-adaptive"] <= s["defended"]),
        _row("7", "relative clean success change with the defense", degradation, "<= 0.15", degradation <= 0.15),
    ]


def ablation_criterion(cfg, splits, tracker, dua_net, seeds):
    means = {}
    for mode in ("dua", "cls", "reg"):
        scores = []
        for seed in seeds:
            net = dua_net if mode == "dua" and seed == cfg.training.seed else \
                train_search_defense(cfg, splits, tracker, mode, seed)
            report = evaluate_run(cfg, splits, "ablation-{}-{}".format(mode, seed), tracker, "search", net, "pgd")
            scores.append(report.metrics["success"])
        means[mode] = float(np.mean(scores))
        logger.info("Ablation %s: defended success %.4f over %d seeds", mode, means[mode], len(seeds))
    margin = min(means["dua"] - means["cls"], means["dua"] - means["reg"])
    return _row("8", "Dua-Loss defended success minus the best single-term variant", margin,
                ">= 0 (dua {dua:.6f}, cls {cls:.6f}, reg {reg:.6f})".format(**means), margin >= 0)


def transfer_criterion(cfg, splits, net, width):
    tracker_cfg = cfg.tracker.replace(width=width)
    tracker = train_tracker(cfg, splits, tracker_cfg, cfg.tracker_training.seed + 1)
    attacked = evaluate_run(cfg, splits, "transfer-attacked", tracker, attack="pgd").metrics["success"]
    defended = evaluate_run(cfg, splits, "transfer-defended", tracker, "search", net, "pgd").metrics["success"]
    return _row("10", "defended minus attacked success on a width-{} tracker".format(width),
                defended - attacked, "> 0", defended > attacked)


def determinism_criterion(cfg, splits, first_dir, first, second_dir):
    tracker, net, _, _ = core_pipeline(cfg, splits, second_dir)
    same = [file_checksum(os.path.join(first_dir, f)) == file_checksum(os.path.join(second_dir, f))
            for f in REPORT_FILES]
    same.append(state_checksum(tracker) == state_checksum(first[0]))
    same.append(state_checksum(net) == state_checksum(first[1]))
    return _row("11", "core reports and weights reproduced by a same-seed rerun", sum(same),
                "== {}".format(len(same)), all(same))


def accept(args):
    cfg = load_config(args.config, {"seed": args.seed, "output_dir": args.output_dir})
    out = cfg.path("acceptance")
    os.makedirs(out, exist_ok=True)
    save_config(cfg, os.path.join(out, "config.yaml"))
    splits = Splits(cfg)

    first_dir = os.path.join(out, "core")
    tracker, net, success, mean_iou = core_pipeline(cfg, splits, first_dir)
    rows = core_criteria(success, mean_iou)
    seeds = [cfg.training.seed + k for k in range(args.ablation_seeds)]
    rows.append(ablation_criterion(cfg, splits, tracker, net, seeds))
    rows.append(transfer_criterion(cfg, splits, net, args.transfer_width or 2 * cfg.tracker.width))
    if not args.skip_determinism:
        rows.append(determinism_criterion(cfg, splits, first_dir, (tracker, net), os.path.join(out, "rerun")))

    table = pd.DataFrame(rows, columns=COLUMNS)
    write_report(table, out, "acceptance")
    print(render_table(table))
    failed = table.loc[~table["passed"], "criterion"].tolist()
    if failed:
        logger.warning("Failed criteria: %s", ", ".join(failed))
        return 1
    return 0


def main(argv=None):
    return run_command(accept, get_args(argv))


if __name__ == "__main__":
    raise SystemExit(main())
