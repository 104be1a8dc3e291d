"""Exception hierarchy shared by all solver modules."""


class MFFBSDEError(Exception):
    """Base class for every error raised by this package."""


class EmptySamples(MFFBSDEError, ValueError):
    pass


class NegativeWeight(MFFBSDEError, ValueError):
    pass


class LengthMismatch(MFFBSDEError, ValueError):
    pass


class DimensionMismatch(MFFBSDEError, ValueError):
    pass


class PopulationCountMismatch(MFFBSDEError, ValueError):
    pass


class GridMismatch(MFFBSDEError, ValueError):
    pass


class SingularDiffusion(MFFBSDEError, ArithmeticError):
    pass


class NonFiniteState(MFFBSDEError, ArithmeticError):
    def __init__(self, message, particle=None, step=None):
        super().__init__(message)
        self.particle = particle
        self.step = step


class NonFiniteWeight(MFFBSDEError, ArithmeticError):
    pass


class RankDeficientRegression(MFFBSDEError, ArithmeticError):
    pass


class IndexOutOfRange(MFFBSDEError, IndexError):
    pass


class ControlOutOfSet(MFFBSDEError, ValueError):
    pass


class NonConvergence(MFFBSDEError, RuntimeError):
    pass


class MissingGradient(MFFBSDEError, ValueError):
    pass


class SchemaError(MFFBSDEError, ValueError):
    pass


class UnknownBundle(MFFBSDEError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "unknown bundle"


class UnknownScenario(MFFBSDEError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "unknown scenario"


class ClipViolation(MFFBSDEError, ValueError):
    pass
