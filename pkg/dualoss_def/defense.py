#-*- coding: utf-8 -*-
"""
The defense pre-processor: a residual U-Net placed in front of a tracker branch.

Def(x) = clip(x + R(x), 0, 1), where R is a U-Net whose last layer is zero
initialized, so a freshly built net is the identity. Inputs whose side is not
a multiple of 2^depth are reflect-padded on the bottom/right and the output is
cropped back.
"""

import enum
import logging
import time

import torch
import torch.nn as nn
import torch.nn.functional as F

from dualoss_def.utils import SlotDefinedClass


logger = logging.getLogger(__name__)

VARIANTS = ("template", "search")

# Padded input resolution per (preset, variant): UNet-128 / UNet-256 for the full preset.
PRESET_SIZES = {
    "toy": {"template": 64, "search": 128},
    "full": {"template": 128, "search": 256},
}
PRESET_DEPTHS = {"toy": 3, "full": 4}


class DefenseError(Exception):
    pass


class DeploymentPattern(enum.Enum):
    NONE = "none"
    TEMPLATE_ONLY = "template"
    SEARCH_ONLY = "search"
    BOTH = "both"

    @property
    def branches(self):
        return {
            DeploymentPattern.NONE: (),
            DeploymentPattern.TEMPLATE_ONLY: ("template",),
            DeploymentPattern.SEARCH_ONLY: ("search",),
            DeploymentPattern.BOTH: ("template", "search"),
        }[self]

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise DefenseError("Unknown deployment pattern '{}', expected one of {}".format(
                value, [p.value for p in cls]))


class DefenseConfig(SlotDefinedClass):
    __slots__ = ("preset", "depth", "base_width", "pad_mode")
    __types__ = (str, int, int, str)
    __defaults__ = {
        "preset": "toy",
        "depth": None,
        "base_width": 16,
        "pad_mode": "reflect",
    }
    __error__ = DefenseError

    def validate(self):
        if self.preset not in PRESET_SIZES:
            raise DefenseError("Unknown defense preset '{}'".format(self.preset))
        if self.depth is None:
            self.depth = PRESET_DEPTHS[self.preset]
        if self.depth < 1 or self.base_width < 1:
            raise DefenseError("depth and base_width must be positive")
        if self.pad_mode not in ("reflect", "none"):
            raise DefenseError("pad_mode must be 'reflect' or 'none'")


class DoubleConv(nn.Module):
    def __init__(self, in_channels, out_channels):
        super(DoubleConv, self).__init__()
        self.model = nn.Sequential(
            nn.Conv2d(in_channels, out_channels, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_channels, out_channels, 3, padding=1),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.model(x)


class EncoderBlock(nn.Module):
    def __init__(self, in_channels, out_channels):
        super(EncoderBlock, self).__init__()
        self.conv = DoubleConv(in_channels, out_channels)
        self.pool = nn.MaxPool2d(2)

    def forward(self, x):
        skip = self.conv(x)
        return self.pool(skip), skip


class DecoderBlock(nn.Module):
    def __init__(self, in_channels, out_channels):
        super(DecoderBlock, self).__init__()
        self.up = nn.ConvTranspose2d(in_channels, out_channels, 2, stride=2)
        self.conv = DoubleConv(out_channels * 2, out_channels)

    def forward(self, x, skip):
        return self.conv(torch.cat([self.up(x), skip], dim=1))


class DefenseNet(nn.Module):
    def __init__(self, variant, input_size, cfg=None):
        super(DefenseNet, self).__init__()
        cfg = cfg or DefenseConfig()
        if variant not in VARIANTS:
            raise DefenseError("Unknown defense variant '{}'".format(variant))
        factor = 2 ** cfg.depth
        padded = input_size if cfg.pad_mode == "none" else -(-input_size // factor) * factor
        if padded % factor != 0:
            raise DefenseError("Input size {} is not divisible by 2^{} and padding is disabled".format(
                input_size, cfg.depth))
        if padded - input_size >= input_size or padded < factor:
            raise DefenseError("Input size {} is too small for depth {}".format(input_size, cfg.depth))
        self.variant = variant
        self.input_size = input_size
        self.padded_size = padded
        self.cfg = cfg

        widths = [cfg.base_width * 2 ** i for i in range(cfg.depth + 1)]
        self.encoders = nn.ModuleList(
            EncoderBlock(3 if i == 0 else widths[i - 1], widths[i]) for i in range(cfg.depth))
        self.bottleneck = DoubleConv(widths[cfg.depth - 1], widths[cfg.depth])
        self.decoders = nn.ModuleList(
            DecoderBlock(widths[i + 1], widths[i]) for i in reversed(range(cfg.depth)))
        self.residual = nn.Conv2d(widths[0], 3, 1)
        nn.init.zeros_(self.residual.weight)
        nn.init.zeros_(self.residual.bias)

    def residual_map(self, x):
        pad = self.padded_size - self.input_size
        h = F.pad(x, (0, pad, 0, pad), mode="reflect") if pad else x
        skips = []
        for encoder in self.encoders:
            h, skip = encoder(h)
            skips.append(skip)
        h = self.bottleneck(h)
        for decoder, skip in zip(self.decoders, reversed(skips)):
            h = decoder(h, skip)
        r = self.residual(h)
        return r[..., :self.input_size, :self.input_size]

    def forward(self, x):
        if x.dim() != 4 or tuple(x.shape[1:]) != (3, self.input_size, self.input_size):
            raise DefenseError("{} defense expects (B, 3, {}, {}) input, got {}".format(
                self.variant, self.input_size, self.input_size, tuple(x.shape)))
        if float(x.min()) < 0.0 or float(x.max()) > 1.0:
            raise DefenseError("Defense input outside [0, 1]")
        return torch.clamp(x + self.residual_map(x), 0.0, 1.0)


def patch_size_for(variant, tracker_cfg):
    return tracker_cfg.template_size if variant == "template" else tracker_cfg.search_size


def build_defense_net(variant, input_size, seed=0, cfg=None):
    torch.manual_seed(seed)
    net = DefenseNet(variant, input_size, cfg)
    logger.debug("Built %s defense: input %d padded to %d, depth %d",
                 variant, input_size, net.padded_size, net.cfg.depth)
    return net


def defend(net, patch):
    return net(patch)


def apply_pattern(pattern, nets, z, x):
    pattern = DeploymentPattern.parse(pattern)
    for branch in pattern.branches:
        if nets.get(branch) is None:
            raise DefenseError("Pattern '{}' needs a {} defense network".format(pattern.value, branch))
    if "template" in pattern.branches:
        z = defend(nets["template"], z)
    if "search" in pattern.branches:
        x = defend(nets["search"], x)
    return z, x


def _ms(start):
    return (time.perf_counter() - start) * 1000.0


class DefenseHook(object):
    """
    A deployment pattern bound to its nets, usable as a tracking-session hook.

    The defended template is cached per input object so an unchanged template
    is defended once per sequence; `last_timing` holds the per-branch time of
    the latest call in milliseconds.
    """

    def __init__(self, pattern, nets):
        self.pattern = DeploymentPattern.parse(pattern)
        self.nets = dict(nets)
        for branch in self.pattern.branches:
            if self.nets.get(branch) is None:
                raise DefenseError("Pattern '{}' needs a {} defense network".format(self.pattern.value, branch))
        self.last_timing = {"template": 0.0, "search": 0.0}
        self._template_in = None
        self._template_out = None

    def __call__(self, z, x):
        self.last_timing = {"template": 0.0, "search": 0.0}
        if "template" in self.pattern.branches:
            if z is not self._template_in:
                start = time.perf_counter()
                self._template_out = defend(self.nets["template"], z)
                self._template_in = z
                self.last_timing["template"] = _ms(start)
            z = self._template_out
        if "search" in self.pattern.branches:
            start = time.perf_counter()
            x = defend(self.nets["search"], x)
            self.last_timing["search"] = _ms(start)
        return z, x
