"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration (grid, PMF, experiment, or CLI arguments)."""


class SimulationFault(RuntimeError):
    """The kinematic integrator produced non-finite state."""


class MonotonicityViolation(RuntimeError):
    """A recorded outcome contradicts the monotone lattice structure.

    Indicates a simulator bug: the deduction rules assume baseline severity is
    monotone in glance duration and deceleration.
    """


class ExhaustedSampleSpace(RuntimeError):
    """No samplable cells remain."""
