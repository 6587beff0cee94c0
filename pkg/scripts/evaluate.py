#!/usr/bin/env python
# -*- coding: utf-8 -*-

from __future__ import print_function

import itertools
import logging
import os

import pandas as pd

from dualoss_def.advtrain import load_defense_checkpoint
from dualoss_def.config import (ATTACK_CHOICES, PROTOCOLS, ConfigError, attack_config, load_config,
                                run_command, save_config)
from dualoss_def.data import load_split
from dualoss_def.defense import DeploymentPattern
from dualoss_def.evaluation import (RunReport, RunSpec, compare_runs, dump_score_maps, ope_metrics,
                                    plot_curves, render_table, reset_metrics, run_ope, run_reset,
                                    timing_report, timing_table, write_report)
from dualoss_def.tracker import load_tracker_checkpoint
from dualoss_def.utils import base_parse_args, seed_everything


logger = logging.getLogger(__name__)

PATTERN_CHOICES = [p.value for p in DeploymentPattern]


def get_args(argv=None):
    from argparse import ArgumentParser
    parser = ArgumentParser(description="Evaluate clean, attacked and defended tracking runs.")

    parser.add_argument("config", help="Experiment YAML file.")
    parser.add_argument("--pattern", nargs="+", choices=PATTERN_CHOICES,
                        help="Defense deployment pattern(s); several values run a grid.")
    parser.add_argument("--attack", nargs="+", choices=ATTACK_CHOICES,
                        help="Attack(s) applied at evaluation time; several values run a grid.")
    parser.add_argument("--adaptive", action="store_true",
                        help="Craft gradient attacks through the defense and tracker together.")
    parser.add_argument("--tracker", help="Evaluate against this tracker checkpoint instead (transfer).")
    parser.add_argument("--defense-template", help="Template defense checkpoint.")
    parser.add_argument("--defense-search", help="Search defense checkpoint.")
    parser.add_argument("--protocol", choices=PROTOCOLS, help="OPE, reset-based, or both.")
    parser.add_argument("--jobs", type=int, help="Sequences evaluated concurrently.")
    parser.add_argument("--seed", type=int, help="Override the experiment seed.")
    parser.add_argument("--dump-maps", nargs="+", type=int, metavar="FRAME",
                        help="Write clean/attacked/defended score maps of these frames.")
    parser.add_argument("--plots", action="store_true", help="Write success and precision plots.")
    parser.add_argument("--name", default="eval", help="Run directory under the output directory.")
    parser.add_argument("--output-dir", help="Override the output directory.")

    return base_parse_args(parser, __name__, argv)


def run_name(pattern, attack, adaptive):
    name = "{}-{}".format(pattern, attack)
    return name + "-adaptive" if adaptive and attack != "none" else name


def load_defenses(cfg, patterns):
    branches = sorted(set(b for p in patterns for b in DeploymentPattern.parse(p).branches))
    return {b: load_defense_checkpoint(cfg.checkpoint(b), variant=b) for b in branches}


def evaluate(args):
    cfg = load_config(args.config, {
        "seed": args.seed, "output_dir": args.output_dir,
        "evaluation.patterns": args.pattern, "evaluation.attacks": args.attack,
        "evaluation.protocol": args.protocol, "evaluation.jobs": args.jobs,
        "evaluation.dump_maps": args.dump_maps, "evaluation.plots": args.plots or None,
        "checkpoints.tracker": args.tracker, "checkpoints.template_defense": args.defense_template,
        "checkpoints.search_defense": args.defense_search,
    })
    ev = cfg.evaluation
    if args.adaptive and any(a != "none" for a in ev.attacks) and "none" in ev.patterns:
        raise ConfigError("--adaptive needs a defense pattern to adapt to; drop 'none' from --pattern")

    run_dir = cfg.path(args.name)
    os.makedirs(run_dir, exist_ok=True)
    save_config(cfg, os.path.join(run_dir, "config.yaml"))

    tracker = load_tracker_checkpoint(cfg.checkpoint("tracker"))
    defenses = load_defenses(cfg, ev.patterns)
    dataset, sequences = load_split(cfg.data, "eval", cfg.seed)
    attacks = {a: attack_config(cfg, a, adaptive=args.adaptive) for a in ev.attacks}

    reports, curves = [], {}
    for pattern, attack in itertools.product(ev.patterns, ev.attacks):
        seed_everything(cfg.seed)
        name = run_name(pattern, attack, args.adaptive)
        spec = RunSpec(name, tracker, sequences, dataset=dataset, pattern=pattern, defenses=defenses,
                       attack=attacks[attack], loss=cfg.loss, seed=cfg.seed)
        metrics, timing = {}, None
        if ev.protocol in ("ope", "both"):
            results = run_ope(spec, jobs=ev.jobs)
            metrics.update(ope_metrics(results))
            timing = timing_report(results)
            curves[name] = results
        if ev.protocol in ("reset", "both"):
            accuracy, robustness, eao_s = reset_metrics(run_reset(spec, jobs=ev.jobs))
            metrics.update({"accuracy": accuracy, "robustness": robustness, "eao_s": eao_s})
        reports.append(RunReport.from_spec(spec, metrics, timing, protocol=ev.protocol))
        if ev.dump_maps:
            dump_score_maps(spec, ev.dump_maps, os.path.join(run_dir, "maps", name))

    table = compare_runs(reports)
    write_report(table, run_dir, "report")
    timings = timing_table(reports)
    if not timings.empty:
        write_report(timings, run_dir, "timing")
    if ev.plots and curves:
        plot_curves(curves, os.path.join(run_dir, "plots"))

    wide = table.pivot_table(index="run", columns="metric", values="value", sort=False)
    print(render_table(pd.DataFrame(wide).reset_index()))
    return 0


def main(argv=None):
    return run_command(evaluate, get_args(argv))


if __name__ == "__main__":
    raise SystemExit(main())
