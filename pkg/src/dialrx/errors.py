"""Exception types shared across the package."""


class DialrxError(Exception):
    """Base class for all package errors."""


# numerics
class ShapeMismatch(DialrxError):
    pass


class NonFinite(DialrxError):
    pass


class DisconnectedGraph(DialrxError):
    pass


# synthgen / config
class InvalidConfig(DialrxError):
    pass


# cohort
class EmptyCohort(DialrxError):
    pass


class InvalidFractions(DialrxError):
    pass


# vocab
class EmptyTrainSplit(DialrxError):
    pass


class UnknownIngredient(DialrxError):
    pass


# model
class InvalidHyper(DialrxError):
    pass


class CheckpointMismatch(DialrxError):
    pass


# train_eval
class SingleClass(DialrxError):
    pass


class NoPositives(DialrxError):
    pass


class NoFeasibleThreshold(DialrxError):
    pass


class Diverged(DialrxError):
    pass


class SingularSystem(DialrxError):
    pass


# cfx
class FoldTooSmall(DialrxError):
    pass


# causal
class NoEligibleRows(DialrxError):
    pass


class SingleArm(DialrxError):
    pass


class NonConvergence(DialrxError):
    pass


class DegenerateResample(DialrxError):
    pass


class InvalidP(DialrxError):
    pass


# cli
class MissingInput(DialrxError):
    pass


class SchemaError(DialrxError):
    pass
