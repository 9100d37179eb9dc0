"""Exception types raised across the package."""


class CapacityError(ValueError):
    """A state space or arrival support exceeds the configured bound."""

    def __init__(self, message, required=None, limit=None):
        super().__init__(message)
        self.required = required
        self.limit = limit


class UnichainError(ValueError):
    """The chain induced by a policy has more than one recurrent class."""

    def __init__(self, message, classes=()):
        super().__init__(message)
        self.classes = classes


class ErgodicityError(ValueError):
    """A Markov arrival model is reducible or periodic."""


class StructureError(ValueError):
    """A policy lacks the switch structure an operation requires."""

    def __init__(self, message, violations=()):
        super().__init__(message)
        self.violations = list(violations)
