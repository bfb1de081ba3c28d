"""Exception hierarchy shared by every module."""


class BamError(Exception):
    pass


# tensor_core
class NonUnitVector(BamError, ValueError):
    pass


class UnsupportedDegree(BamError, ValueError):
    pass


class InvalidPath(BamError, ValueError):
    pass


class ShapeError(BamError, ValueError):
    pass


# geometry
class BadCell(BamError, ValueError):
    pass


class DomainError(BamError, ValueError):
    pass


class DegenerateEdge(BamError, ValueError):
    pass


# diff_engine
class NotScalar(BamError, ValueError):
    pass


class UnknownLeaf(BamError, ValueError):
    pass


class NoCell(BamError, ValueError):
    pass


# model / losses
class UnknownSpecies(BamError, KeyError):
    pass


class MissingLabel(BamError, ValueError):
    pass


# posteriors
class NotReady(BamError, RuntimeError):
    pass


class DivergedGradient(BamError, FloatingPointError):
    pass


class NoData(BamError, ValueError):
    pass


# uq / active learning
class DegenerateCalibration(BamError, ValueError):
    pass


class DegenerateNormalization(BamError, ValueError):
    pass


class BudgetTooLarge(BamError, ValueError):
    pass


# io
class ParseError(BamError, ValueError):
    pass


class SplitError(BamError, ValueError):
    pass


class IncompatibleCheckpoint(BamError, ValueError):
    pass


class CorruptCheckpoint(BamError, ValueError):
    pass


class ConfigError(BamError, ValueError):
    pass


# training
class DivergedTraining(BamError, FloatingPointError):
    def __init__(self, epoch, message=None):
        self.epoch = epoch
        super().__init__(message or f"non-finite loss at epoch {epoch}")
