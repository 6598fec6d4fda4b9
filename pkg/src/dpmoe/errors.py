class ShapeError(ValueError):
    """Operand extents do not line up."""


class ParameterError(ValueError):
    """A scalar argument is outside its admissible range."""


class InvariantError(RuntimeError):
    """Internal bookkeeping (routing tables, envelopes, replicas) is inconsistent."""


class ConfigError(ValueError):
    pass


class PrivacyInfeasibleError(ValueError):
    """No noise multiplier in the search interval meets the privacy target."""

    def __init__(self, message, achievable=None):
        super().__init__(message)
        self.achievable = achievable
