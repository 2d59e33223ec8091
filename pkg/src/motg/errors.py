class MotgError(Exception):
    """Base class for errors raised by this package."""


class InvalidInputError(MotgError, ValueError):
    pass


class DegenerateInputError(MotgError, ValueError):
    pass


class ContextOverflowError(MotgError):
    pass


class NumericalFailureError(MotgError, FloatingPointError):
    pass


class CapabilityError(MotgError):
    """Requested size exceeds what an exact routine can enumerate."""


class InvalidTrajectoryError(MotgError, ValueError):
    pass


class CheckpointError(MotgError):
    pass


class ConfigMismatchError(CheckpointError):
    pass
