#!/usr/bin/env python
# -*- coding: utf-8 -*-

from __future__ import print_function

import logging
import os

import pandas as pd

from dualoss_def.config import ConfigError, run_command
from dualoss_def.evaluation import (EvaluationError, RunReport, compare_runs, render_table, timing_table,
                                    write_report)
from dualoss_def.utils import base_parse_args


logger = logging.getLogger(__name__)


def get_args(argv=None):
    from argparse import ArgumentParser
    parser = ArgumentParser(description="Merge evaluation runs into one comparison table.")

    parser.add_argument("runs", nargs="+", help="Run directories written by the evaluate command.")
    parser.add_argument("--baseline", type=int, default=0,
                        help="Index of the run every delta is taken against.")
    parser.add_argument("--output", help="Directory for the merged report.")

    return base_parse_args(parser, __name__, argv)


def _read(run_dir, prefix):
    path = os.path.join(run_dir, "report.csv")
    if not os.path.isfile(path):
        raise ConfigError("'{}' has no report.csv".format(run_dir))
    df = pd.read_csv(path, keep_default_na=False)
    reports = RunReport.from_frame(df)

    timing_path = os.path.join(run_dir, "timing.csv")
    if os.path.isfile(timing_path):
        by_run = {row["run"]: row for row in pd.read_csv(timing_path).to_dict("records")}
        for r in reports:
            row = by_run.get(r.run)
            if row is not None:
                r.timing = {"total_ms": row["inference_ms"], "fps": row["fps"], "delta_ms": row["delta_ms"],
                            "tracker_ms": row["tracker_ms"], "defense_template_ms": row["defense_template_ms"],
                            "defense_search_ms": row["defense_search_ms"]}
    if prefix:
        for r in reports:
            r.run = "{}/{}".format(os.path.basename(os.path.normpath(run_dir)), r.run)
    return reports


def report(args):
    reports = []
    for run_dir in args.runs:
        reports.extend(_read(run_dir, prefix=len(args.runs) > 1))
    if not 0 <= args.baseline < len(reports):
        raise ConfigError("--baseline {} is out of range for {} runs".format(args.baseline, len(reports)))
    try:
        table = compare_runs(reports, baseline=args.baseline)
    except EvaluationError as e:
        raise ConfigError(str(e))
    timings = timing_table(reports, baseline=args.baseline)

    if args.output:
        write_report(table, args.output, "comparison")
        if not timings.empty:
            write_report(timings, args.output, "timing")
    print(render_table(table))
    if not timings.empty:
        print()
        print(render_table(timings))
    return 0


def main(argv=None):
    return run_command(report, get_args(argv))


if __name__ == "__main__":
    raise SystemExit(main())
