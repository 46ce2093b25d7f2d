"""Exception hierarchy shared by every module."""

from __future__ import annotations


class HetSolverError(Exception):
    """Base class; the CLI reports the subclass name and exits nonzero."""


class NoInterfaceEdges(HetSolverError):
    pass


class ShapeMismatch(HetSolverError):
    pass


class NonFinite(HetSolverError):
    pass


class NotScalar(HetSolverError):
    pass


class ChannelMismatch(HetSolverError):
    pass


class ZeroNorm(HetSolverError):
    pass


class UnstableConfig(HetSolverError):
    pass


class TooShort(HetSolverError):
    pass


class TooFew(HetSolverError):
    pass


class IoError(HetSolverError, OSError):
    pass


class ConfigError(HetSolverError):
    pass


class CheckpointError(HetSolverError):
    pass
