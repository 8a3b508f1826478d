"""Exception types shared across the solver."""


class GameError(Exception):
    """Base class for all solver errors."""


class NonFiniteState(GameError):
    """A simulated state picked up a NaN or infinity."""


class PolicyFailure(GameError):
    """A policy callback raised or returned a non-finite control."""


class NoValidLambda(GameError):
    """The noise/cost consistency condition admits no positive constant."""


class SingularGain(GameError):
    """The gain normal matrix is numerically singular at the query point."""


class DegenerateBatch(GameError):
    """Every rollout weight underflowed; the estimate carries no information."""


class UnstableSolve(GameError):
    """The grid solver produced nonpositive or non-finite values."""


class StencilOutOfDomain(GameError):
    """A finite-difference stencil would reach outside the solved region."""


class EnergyBoundViolated(GameError):
    """An adversary policy exceeded its declared energy budget."""


class ConfigError(GameError):
    """Unknown or invalid configuration key or value."""
