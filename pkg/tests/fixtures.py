# -*- coding: utf-8 -*-
"""Small models and data shared by the test modules."""

from dualoss_def.data import SyntheticConfig, build_pair_dataset, gen_synthetic_set
from dualoss_def.defense import DefenseConfig, build_defense_net, patch_size_for
from dualoss_def.tracker import TrackerConfig, build_tracker, freeze


def tiny_tracker(seed=0):
    return freeze(build_tracker(TrackerConfig.from_preset("toy", width=4), seed=seed))


def tiny_synthetic(length=6):
    return SyntheticConfig(frame_size=[160, 160], length=length, target_size=[24, 32], distractors=0)


def tiny_sequences(count=2, length=6, seed=0):
    return gen_synthetic_set(tiny_synthetic(length), count, seed)


def tiny_dataset(tracker, count=4, seed=0):
    return build_pair_dataset(tiny_sequences(seed=seed), count, tracker.cfg, tracker.grid, seed)


def tiny_defense(variant, tracker, seed=0):
    return build_defense_net(variant, patch_size_for(variant, tracker.cfg), seed=seed,
                             cfg=DefenseConfig(base_width=4))
