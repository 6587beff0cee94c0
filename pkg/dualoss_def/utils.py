#-*- coding: utf-8 -*-

import hashlib
import logging
import numbers
import os
import random
import sys

import numpy as np
import torch


PACKAGE_LOGGER = "dualoss_def"


def base_parse_args(parser, name=None, argv=None):
    """Add various arguments for more verbosity."""

    # Logging/debugging
    parser.add_argument("-v", "--verbose", action="count", default=0,
                        help="Logging verbosity. More verbose means more "
                        "logging info.")

    args = parser.parse_args(argv)

    # Configure logger
    logging.basicConfig(format="[%(asctime)s] %(levelname)s: %(message)s",
                        stream=sys.stderr)
    for logger_name in filter(None, (PACKAGE_LOGGER, name)):
        logger = logging.getLogger(logger_name)
        if args.verbose == 1:
            logger.setLevel(logging.INFO)
        elif args.verbose >= 2:
            logger.setLevel(logging.DEBUG)

    return args


def check_type(v, t):
    assert isinstance(v, t), "Expected '{}' to be of type '{}'. Found type '{}'".format(v, t, type(v))


def check_list(lst, t):
    check_type(lst, (list, tuple))
    for v in lst:
        check_type(v, t)


def seed_everything(seed, deterministic=True):
    """Seed python, numpy and torch; optionally force deterministic kernels."""
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)
    if deterministic:
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
        torch.use_deterministic_algorithms(True)
        torch.backends.cudnn.benchmark = False


def state_checksum(module_or_state):
    """SHA-256 over every tensor of a module's state dict, in key order."""
    state = module_or_state
    if isinstance(module_or_state, torch.nn.Module):
        state = module_or_state.state_dict()
    digest = hashlib.sha256()
    for key in sorted(state):
        digest.update(key.encode("utf-8"))
        digest.update(state[key].detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def file_checksum(path):
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


class SlotDefinedClass(object):
    # Type names.
    # Only checks upper most type (i.e. can determine type of variable
    # to be a list, but cannot make assertions regarding the types of the
    # list contents unless the type is given as a one element list).
    __slots__ = ()

    # Expected type for each slot
    __types__ = ()

    # Value used for a slot missing from the constructor kwargs.
    # Slots without a default are required.
    __defaults__ = {}

    # Raised on unknown/missing/mistyped fields and failed validation.
    __error__ = ValueError

    def __init__(self, **kwargs):
        unknown = sorted(set(kwargs) - set(self.__slots__))
        if unknown:
            raise self.__error__("Unknown field(s) for {}: {}".format(
                type(self).__name__, ", ".join(unknown)))
        values = {}
        for attr in self.__slots__:
            if attr in kwargs:
                values[attr] = kwargs[attr]
            elif attr in self.__defaults__:
                default = self.__defaults__[attr]
                values[attr] = list(default) if isinstance(default, list) else default
            else:
                raise self.__error__("Missing field '{}' for {}".format(attr, type(self).__name__))
        self.update(**values)

    def update(self, **kwargs):
        types = self.__types__
        for i, attr in enumerate(self.__slots__):
            if attr not in kwargs:
                continue
            v = kwargs[attr]
            if i < len(types) and types[i] is not None and v is not None:
                t = types[i]
                try:
                    if isinstance(t, list):
                        check_list(v, t[0])
                    else:
                        # Check that this property is of the specified type
                        check_type(v, t)
                except AssertionError as e:
                    raise self.__error__("{}.{}: {}".format(type(self).__name__, attr, e))
            setattr(self, attr, v)
        self.validate()

    def validate(self):
        """Hook for invariants spanning several slots."""

    def replace(self, **kwargs):
        d = self.dict()
        d.update(kwargs)
        return type(self)(**d)

    def dict(self):
        """Return a shallow dictionary representation of this instance for easy kwargs unpacking."""
        return {k: getattr(self, k) for k in self.__slots__}

    def json(self):
        """Produce a json serializeable version of instances of this class."""
        d = {}
        for k in self.__slots__:
            v = getattr(self, k)
            if isinstance(v, SlotDefinedClass):
                d[k] = v.json()
            elif isinstance(v, (list, tuple)):
                d[k] = [x.json() if isinstance(x, SlotDefinedClass) else x for x in v]
            else:
                d[k] = v
        return d

    @classmethod
    def from_json(cls, d):
        return cls(**(d or {}))

    def __eq__(self, other):
        """Just check the type and each of the attributes."""
        if not isinstance(self, type(other)):
            return False
        return all(getattr(self, attr) == getattr(other, attr) for attr in self.__slots__)

    def __ne__(self, other):
        return not (self == other)

    def __repr__(self):
        return "{}({})".format(type(self).__name__, ", ".join(
            "{}={!r}".format(k, getattr(self, k)) for k in self.__slots__))


Number = numbers.Real
