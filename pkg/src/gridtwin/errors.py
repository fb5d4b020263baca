"""Exception hierarchy.

Every error raised on purpose by the package derives from ``GridTwinError`` so
the CLI can map families of failures onto exit codes.
"""


class GridTwinError(Exception):
    """Base class for all package errors."""


class ConfigError(GridTwinError):
    """Bad user input: unknown fixture, malformed flag, unreadable file."""


class DataError(GridTwinError):
    """Input data is structurally invalid (shapes, ids, missing fields)."""


class NumericalError(GridTwinError):
    """A numerical procedure could not produce a trustworthy answer."""


# network construction
class CycleDetected(DataError):
    pass


class Disconnected(DataError):
    pass


class DuplicateDownstreamBus(DataError):
    pass


class NonPositiveImpedance(DataError):
    pass


class SchemaError(DataError):
    pass


# power flow
class NonConvergence(NumericalError):
    def __init__(self, message, sample=None):
        super().__init__(message if sample is None else f"{message} (sample {sample})")
        self.sample = sample


class MissingChildFlow(DataError):
    pass


class ZeroVoltage(NumericalError):
    pass


# topology stage
class DimensionMismatch(DataError):
    pass


class InsufficientSamples(DataError):
    pass


class IllConditioned(NumericalError):
    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class DegenerateRow(NumericalError):
    pass


class NoClusterFound(NumericalError):
    pass


class TooFewPoints(DataError):
    pass


class SingularNormalMatrix(NumericalError):
    pass


# impedance stage
class AllCandidatesDegenerate(NumericalError):
    pass


class NotATree(DataError):
    pass


class UnrootedTopology(DataError):
    pass


class BranchSolveError(NumericalError):
    """Wraps a per-branch failure with its position in the sweep."""

    def __init__(self, layer, branch, cause):
        super().__init__(f"layer {layer}, branch {branch}: {cause}")
        self.layer = layer
        self.branch = branch
        self.cause = cause


# metrics
class UniverseMismatch(DataError):
    pass


class ConstantRow(DataError):
    pass
