#-*- coding: utf-8 -*-
"""Single-file checkpoint container shared by tracker and defense models."""

import logging
import os
import tempfile

import torch


logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


def save_checkpoint(path, kind, state_dict, config, variant=None, extra=None):
    """Write atomically: a crash leaves either the old file or the new one."""
    payload = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "variant": variant,
        "config": config,
        "extra": extra or {},
        "state_dict": {k: v.detach().cpu().clone() for k, v in state_dict.items()},
    }
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".ckpt-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as f:
            torch.save(payload, f)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise
    logger.info("Saved %s checkpoint to %s", kind, path)
    return path


def load_checkpoint(path, kind, variant=None):
    if not os.path.isfile(path):
        raise CheckpointError("Checkpoint '{}' does not exist".format(path))
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:  # torch surfaces truncation as several error types
        raise CheckpointError("Corrupt checkpoint '{}': {}".format(path, e))
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError("Corrupt checkpoint '{}': missing header".format(path))
    if payload["format_version"] != FORMAT_VERSION:
        raise CheckpointError("Checkpoint '{}' has format version {}, expected {}".format(
            path, payload["format_version"], FORMAT_VERSION))
    if payload.get("kind") != kind:
        raise CheckpointError("Checkpoint '{}' holds a '{}' model, expected '{}'".format(
            path, payload.get("kind"), kind))
    if variant is not None and payload.get("variant") != variant:
        raise CheckpointError("Checkpoint '{}' is a '{}' variant, expected '{}'".format(
            path, payload.get("variant"), variant))
    return payload
