#!/usr/bin/env python
# -*- coding: utf-8 -*-

from __future__ import print_function

import logging
import os

from dualoss_def.config import load_config, run_command, save_config
from dualoss_def.data import build_pair_dataset, load_split
from dualoss_def.tracker import save_tracker_checkpoint, tracker_grid, train_baseline_tracker
from dualoss_def.utils import base_parse_args, file_checksum, seed_everything


logger = logging.getLogger(__name__)


def get_args(argv=None):
    from argparse import ArgumentParser
    parser = ArgumentParser(description="Train the baseline siamese tracker on clean pairs.")

    parser.add_argument("config", help="Experiment YAML file.")
    parser.add_argument("--seed", type=int, help="Override the experiment seed.")
    parser.add_argument("--output-dir", help="Override the output directory.")

    return base_parse_args(parser, __name__, argv)


def train(args):
    cfg = load_config(args.config, {"seed": args.seed, "output_dir": args.output_dir})
    train_cfg = cfg.tracker_training
    seed_everything(train_cfg.seed)
    os.makedirs(cfg.output_dir, exist_ok=True)
    save_config(cfg, cfg.path("config.tracker.yaml"))

    grid = tracker_grid(cfg.tracker)
    _, train_seqs = load_split(cfg.data, "train", cfg.seed)
    _, eval_seqs = load_split(cfg.data, "eval", cfg.seed)
    train_set = build_pair_dataset(train_seqs, train_cfg.train_pairs, cfg.tracker, grid,
                                   train_cfg.seed, cfg.data.pairs)
    eval_set = build_pair_dataset(eval_seqs, train_cfg.eval_pairs, cfg.tracker, grid,
                                  train_cfg.seed + 1, cfg.data.pairs)

    model, history = train_baseline_tracker(cfg.tracker, train_cfg, train_set, eval_set, cfg.loss,
                                            log_path=cfg.path("tracker_train_log.csv"))
    history.to_csv(cfg.path("tracker_history.csv"), index=False, float_format="%.6f")
    path = save_tracker_checkpoint(model, cfg.checkpoint("tracker"), train_cfg)
    print("{}  {}".format(file_checksum(path), path))
    print("held-out loss: {:.4f} -> {:.4f}".format(history.attrs["initial_eval_loss"],
                                                   history["eval_loss"].iloc[-1]))
    return 0


def main(argv=None):
    return run_command(train, get_args(argv))


if __name__ == "__main__":
    raise SystemExit(main())
