#-*- coding: utf-8 -*-
"""
Experiment configuration files.

An experiment is one YAML mapping with a section per module. Every section is
parsed into that module's config record, so unknown keys and invalid values
are reported before any work starts. Command-line overrides use dotted keys
("training.branch", "loss.mode") and are applied on top of the file.
"""

import logging
import os

import yaml

from dualoss_def.advtrain import DefenseTrainingError, TrainConfig
from dualoss_def.attacks import AttackConfig, AttackError
from dualoss_def.checkpoint import CheckpointError
from dualoss_def.data import DataConfig, DataError
from dualoss_def.defense import DefenseConfig, DefenseError, DeploymentPattern
from dualoss_def.geometry import AnchorConfig, GeometryError
from dualoss_def.losses import DuaLossConfig, LossError
from dualoss_def.tracker import PRESETS, TrackerConfig, TrackerError, TrackerTrainConfig
from dualoss_def.utils import SlotDefinedClass, Number


logger = logging.getLogger(__name__)

OUTPUT_ENV = "DUALOSSDEF_OUT"
DEFAULT_OUTPUT = "runs"

PROTOCOLS = ("ope", "reset", "both")
ATTACK_CHOICES = ("none", "fgsm", "pgd", "iou")

SECTION_ERRORS = (TrackerError, GeometryError, DefenseError, DefenseTrainingError, LossError, AttackError, DataError,
                  ValueError)

SEEDED_SECTIONS = ("tracker_training", "training", "attack")


class ConfigError(Exception):
    pass


class EvaluationConfig(SlotDefinedClass):
    __slots__ = ("protocol", "patterns", "attacks", "jobs", "plots", "dump_maps", "precision_px")
    __types__ = (str, [str], [str], int, bool, [int], Number)
    __defaults__ = {
        "protocol": "ope",
        "patterns": ["none"],
        "attacks": ["none"],
        "jobs": 1,
        "plots": False,
        "dump_maps": [],
        "precision_px": 20.0,
    }
    __error__ = ConfigError

    def validate(self):
        if self.protocol not in PROTOCOLS:
            raise ConfigError("protocol must be one of {}".format(PROTOCOLS))
        for p in self.patterns:
            try:
                DeploymentPattern.parse(p)
            except DefenseError as e:
                raise ConfigError(str(e))
        for a in self.attacks:
            if a not in ATTACK_CHOICES:
                raise ConfigError("Unknown attack '{}', expected one of {}".format(a, ATTACK_CHOICES))
        if self.jobs < 1:
            raise ConfigError("jobs must be at least 1")


class CheckpointPaths(SlotDefinedClass):
    """Checkpoint locations; relative or missing entries resolve under the output directory."""
    __slots__ = ("tracker", "template_defense", "search_defense")
    __types__ = (str, str, str)
    __defaults__ = {
        "tracker": "tracker.pt",
        "template_defense": "defense-template.pt",
        "search_defense": "defense-search.pt",
    }
    __error__ = ConfigError

    def defense(self, branch):
        return self.template_defense if branch == "template" else self.search_defense


class ExperimentConfig(SlotDefinedClass):
    __slots__ = ("seed", "output_dir", "preset", "tracker", "defense", "loss", "tracker_training",
                 "training", "attack", "data", "evaluation", "checkpoints")
    __types__ = (int, str, str, TrackerConfig, DefenseConfig, DuaLossConfig, TrackerTrainConfig,
                 TrainConfig, AttackConfig, DataConfig, EvaluationConfig, CheckpointPaths)
    __error__ = ConfigError

    def validate(self):
        if self.preset not in PRESETS:
            raise ConfigError("Unknown preset '{}', expected one of {}".format(self.preset, sorted(PRESETS)))

    def path(self, *parts):
        return os.path.join(self.output_dir, *parts)

    def checkpoint(self, name):
        value = getattr(self.checkpoints, name) if name in CheckpointPaths.__slots__ else self.checkpoints.defense(name)
        return value if os.path.isabs(value) else self.path(value)

    def json(self):
        d = super(ExperimentConfig, self).json()
        d["anchors"] = d["tracker"].pop("anchors")
        d["tracker"].pop("preset", None)
        return d


def _mapping(raw, name):
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError("Section '{}' must be a mapping, got {}".format(name, type(raw).__name__))
    return dict(raw)


def _section(cls, raw, name):
    raw = _mapping(raw, name)
    try:
        return cls.from_json(raw)
    except SECTION_ERRORS as e:
        raise ConfigError("Section '{}': {}".format(name, e))


def apply_overrides(raw, overrides):
    """Set dotted keys in a raw config mapping; None values are skipped."""
    raw = dict(raw)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key == "seed":
            raw["seed"] = value
            for name in SEEDED_SECTIONS:
                if isinstance(raw.get(name), dict):
                    raw[name] = {k: v for k, v in raw[name].items() if k != "seed"}
            continue
        parts = key.split(".")
        node = raw
        for part in parts[:-1]:
            child = node.get(part)
            node[part] = dict(child) if isinstance(child, dict) else {}
            node = node[part]
        node[parts[-1]] = value
    return raw


def build_config(raw, overrides=None):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("An experiment config must be a mapping")
    raw = apply_overrides(raw, overrides)
    unknown = sorted(set(raw) - set(ExperimentConfig.__slots__) - {"anchors"})
    if unknown:
        raise ConfigError("Unknown top-level key(s): {}".format(", ".join(unknown)))

    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("seed must be an integer")
    preset = raw.get("preset", "toy")
    if preset not in PRESETS:
        raise ConfigError("Unknown preset '{}', expected one of {}".format(preset, sorted(PRESETS)))

    tracker_raw = _mapping(raw.get("tracker"), "tracker")
    anchors_raw = _mapping(raw.get("anchors"), "anchors")
    anchors_raw.setdefault("scales", list(PRESETS[preset]["anchor_scales"]))
    anchors = _section(AnchorConfig, anchors_raw, "anchors")
    for key in ("preset", "anchors"):
        if key in tracker_raw:
            raise ConfigError("Section 'tracker': '{}' is set at the top level".format(key))
    try:
        tracker = TrackerConfig.from_preset(preset, anchors=anchors, **tracker_raw)
    except (TrackerError, TypeError) as e:
        raise ConfigError("Section 'tracker': {}".format(e))

    defense_raw = _mapping(raw.get("defense"), "defense")
    defense_raw.setdefault("preset", preset)

    seeded = {}
    for name in SEEDED_SECTIONS:
        section = _mapping(raw.get(name), name)
        section.setdefault("seed", seed)
        seeded[name] = section

    output_dir = os.environ.get(OUTPUT_ENV) or raw.get("output_dir") or DEFAULT_OUTPUT
    if overrides and overrides.get("output_dir"):
        output_dir = overrides["output_dir"]

    return ExperimentConfig(
        seed=seed,
        output_dir=str(output_dir),
        preset=preset,
        tracker=tracker,
        defense=_section(DefenseConfig, defense_raw, "defense"),
        loss=_section(DuaLossConfig, raw.get("loss"), "loss"),
        tracker_training=_section(TrackerTrainConfig, seeded["tracker_training"], "tracker_training"),
        training=_section(TrainConfig, seeded["training"], "training"),
        attack=_section(AttackConfig, seeded["attack"], "attack"),
        data=_section(DataConfig, raw.get("data"), "data"),
        evaluation=_section(EvaluationConfig, raw.get("evaluation"), "evaluation"),
        checkpoints=_section(CheckpointPaths, raw.get("checkpoints"), "checkpoints"),
    )


def load_config(path, overrides=None):
    if not os.path.isfile(path):
        raise ConfigError("Config file '{}' does not exist".format(path))
    try:
        with open(path, "r") as f:
            raw = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigError("Cannot parse '{}': {}".format(path, e))
    cfg = build_config(raw, overrides)
    logger.info("Loaded %s (preset %s, seed %d, output %s)", path, cfg.preset, cfg.seed, cfg.output_dir)
    return cfg


def save_config(cfg, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        yaml.safe_dump(cfg.json(), f, default_flow_style=False, sort_keys=True)
    return path


def attack_config(cfg, kind, adaptive=False):
    """The experiment's attack section specialised to one grid cell; None for 'none'."""
    if kind == "none":
        return None
    try:
        return cfg.attack.replace(kind="iou_blackbox" if kind == "iou" else kind, adaptive=adaptive)
    except AttackError as e:
        raise ConfigError("Attack '{}': {}".format(kind, e))


# Errors a command reports with exit code 2; anything else it knows is a runtime failure (3).
USAGE_ERRORS = (ConfigError, CheckpointError, DataError, DefenseTrainingError, FileNotFoundError)


def run_command(fn, args):
    """Call fn(args) and map known failures onto the exit-code contract."""
    # local import: evaluation pulls in plotting
    from dualoss_def.advtrain import NonFiniteGradient
    from dualoss_def.evaluation import EvaluationError
    from dualoss_def.tracker import TrainingAborted
    runtime_errors = (TrainingAborted, NonFiniteGradient, AttackError, EvaluationError, LossError,
                      DefenseError, TrackerError, GeometryError)
    try:
        return fn(args) or 0
    except USAGE_ERRORS as e:
        logger.error("%s", e)
        return 2
    except runtime_errors as e:
        logger.error("%s: %s", type(e).__name__, e)
        return 3
