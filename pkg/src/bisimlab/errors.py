"""Exception types raised across bisimlab."""


class BisimLabError(Exception):
    """Base class for all library errors."""


class NonStochasticRow(BisimLabError, ValueError):
    pass


class RewardOutOfBounds(BisimLabError, ValueError):
    pass


class ShapeMismatch(BisimLabError, ValueError):
    pass


class DimensionMismatch(BisimLabError, ValueError):
    pass


class NoConvergence(BisimLabError, RuntimeError):
    pass


class InfeasibleMarginals(BisimLabError, ValueError):
    pass


class UnsupportedOrder(BisimLabError, ValueError):
    """Wasserstein order p > 1 requested where the metric is not known to exist."""


class RewardRangeViolation(BisimLabError, ValueError):
    pass


class EmptyCluster(BisimLabError, ValueError):
    pass


class ZeroMeasureCluster(BisimLabError, ValueError):
    pass


class NonFiniteInput(BisimLabError, ValueError):
    pass


class NonFiniteOutput(BisimLabError, FloatingPointError):
    pass


class NonFiniteLoss(BisimLabError, FloatingPointError):
    pass


class SteppedAfterDone(BisimLabError, RuntimeError):
    pass


class ConfigError(BisimLabError, ValueError):
    pass
