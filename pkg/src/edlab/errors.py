"""Exception hierarchy shared by all edlab modules."""


class EdlabError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(EdlabError):
    """Invalid grid, constants, scenario config, or mismatched inputs."""


class InvalidDensityError(EdlabError):
    """A field that must be a probability density is not one."""


class NoSolutionError(EdlabError):
    """A multiplier solve cannot bracket a root on the given grid."""


class SingularReversalError(EdlabError):
    """Bayes reversal hit a reachable node with vanishing posterior mass."""


class StepSizeError(EdlabError):
    """Explicit transport step violates its stability bound."""


class InstabilityError(EdlabError):
    """Runaway growth detected during time stepping."""


class NodalStateError(EdlabError):
    """Density has an interior zero; polar variables are undefined there."""


class AliasingError(EdlabError):
    """Phase jumps of pi or more between nodes; grid too coarse to unwrap."""
