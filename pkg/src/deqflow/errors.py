"""Exception hierarchy.

Configuration problems derive from :class:`ConfigError`, numerical failures
(loss of contraction, singular kernels, ...) from :class:`NumericFailure`.
The command line maps the two families to distinct exit codes.
"""


class ConfigError(ValueError):
    pass


class NumericFailure(RuntimeError):
    pass


class InvalidConfig(ConfigError):
    pass


class DimensionMismatch(ConfigError):
    pass


class PreconditionViolated(ConfigError):
    pass


class SchemeMismatch(ConfigError):
    pass


class NonUnitRows(ConfigError):
    pass


class SizeGuard(ConfigError):
    pass


class NonContractive(NumericFailure):
    """gamma * ||A|| reached 1: the equilibrium is no longer guaranteed."""


class MaxIterExceeded(NumericFailure):
    pass


class SingularBlock(NumericFailure):
    pass


class SingularKernel(NumericFailure):
    """Kernel matrix has eigenvalues below the inversion floor."""

    def __init__(self, message, eigenvalues=()):
        super().__init__(message)
        self.eigenvalues = tuple(eigenvalues)


class StepRejected(NumericFailure):
    pass


class DataFormatError(ValueError):
    pass


class BadMagic(DataFormatError):
    pass


class TruncatedFile(DataFormatError):
    pass


class ClassNotPresent(DataFormatError):
    pass
