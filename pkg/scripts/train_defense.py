#!/usr/bin/env python
# -*- coding: utf-8 -*-

from __future__ import print_function

import logging
import os

from dualoss_def.advtrain import save_defense_checkpoint, train_defense
from dualoss_def.config import load_config, run_command, save_config
from dualoss_def.data import build_pair_dataset, load_split
from dualoss_def.defense import VARIANTS, build_defense_net, patch_size_for
from dualoss_def.losses import LOSS_MODES
from dualoss_def.tracker import load_tracker_checkpoint
from dualoss_def.utils import base_parse_args, file_checksum, seed_everything


logger = logging.getLogger(__name__)


def get_args(argv=None):
    from argparse import ArgumentParser
    parser = ArgumentParser(description="Adversarially train a defense network in front of a frozen tracker.")

    parser.add_argument("config", help="Experiment YAML file.")
    parser.add_argument("--branch", choices=VARIANTS, help="Tracker input the defense is trained for.")
    parser.add_argument("--loss", choices=LOSS_MODES,
                        help="Loss guiding the adversarial examples and the update (ablation).")
    parser.add_argument("--tracker", help="Tracker checkpoint to train against.")
    parser.add_argument("--checkpoint", help="Where to write the defense checkpoint.")
    parser.add_argument("--seed", type=int, help="Override the experiment seed.")
    parser.add_argument("--output-dir", help="Override the output directory.")

    return base_parse_args(parser, __name__, argv)


def train(args):
    cfg = load_config(args.config, {"seed": args.seed, "output_dir": args.output_dir,
                                    "training.branch": args.branch, "loss.mode": args.loss,
                                    "checkpoints.tracker": args.tracker})
    train_cfg = cfg.training
    branch = train_cfg.branch
    tracker = load_tracker_checkpoint(cfg.checkpoint("tracker"))
    seed_everything(train_cfg.seed)
    os.makedirs(cfg.output_dir, exist_ok=True)
    save_config(cfg, cfg.path("config.defense-{}.yaml".format(branch)))

    _, sequences = load_split(cfg.data, "train", cfg.seed)
    dataset = build_pair_dataset(sequences, train_cfg.train_pairs, tracker.cfg, tracker.grid,
                                 train_cfg.seed, cfg.data.pairs)
    net = build_defense_net(branch, patch_size_for(branch, tracker.cfg), seed=train_cfg.seed, cfg=cfg.defense)

    stem = "defense-{}".format(branch) if cfg.loss.mode == "dua" else "defense-{}-{}".format(branch, cfg.loss.mode)
    net, log = train_defense(tracker, net, dataset, train_cfg, cfg.loss, log_path=cfg.path(stem + "_train_log.csv"))
    path = args.checkpoint or (cfg.checkpoint(branch) if cfg.loss.mode == "dua" else cfg.path(stem + ".pt"))
    save_defense_checkpoint(net, train_cfg, path, cfg.loss)

    print("{}  {}".format(file_checksum(path), path))
    means = log.epoch_means()
    if len(means):
        print("loss (second pass): {:.4f} -> {:.4f} over {} steps, {} skipped".format(
            means.iloc[0], means.iloc[-1], log.optimizer_steps, log.skipped))
    return 0


def main(argv=None):
    return run_command(train, get_args(argv))


if __name__ == "__main__":
    raise SystemExit(main())
