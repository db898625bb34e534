"""Exception hierarchy for morphokit.

Every domain failure derives from :class:`MorphoError`, which the CLI maps to
exit code 1.
"""


class MorphoError(Exception):
    pass


class DimensionError(MorphoError):
    pass


class GridMismatch(MorphoError):
    pass


class ConvergenceFailure(MorphoError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class NonPositiveTarget(MorphoError):
    pass


class EmptyInput(MorphoError):
    pass


class SingularJacobianSum(MorphoError):
    pass


class SpecOutOfRange(MorphoError):
    pass


class DegenerateInput(MorphoError):
    pass


class FormatError(MorphoError):
    pass
