"""Exception hierarchy shared by every synthesis stage."""


class SynthesisError(Exception):
    """Base class for all errors raised by mlsynth."""


class InvalidConfigError(SynthesisError, ValueError):
    pass


class BoundsError(SynthesisError, IndexError):
    pass


class ConstraintViolation(SynthesisError):
    """A set of moves would break the fluidic spacing rules."""

    def __init__(self, message, pairs=()):
        super().__init__(message)
        self.pairs = list(pairs)


class LegalityError(SynthesisError, ValueError):
    """A shift sequence contains more than three consecutive straight steps."""

    def __init__(self, message, index):
        super().__init__(message)
        self.index = index


class DegenerateInputError(SynthesisError, ValueError):
    pass


class SchemaError(SynthesisError, ValueError):
    def __init__(self, message, node_id=None):
        super().__init__(message)
        self.node_id = node_id


class InfeasibleConfigError(SynthesisError):
    pass


class DeadlockError(SynthesisError):
    def __init__(self, message, droplets=(), step=None):
        super().__init__(message)
        self.droplets = list(droplets)
        self.step = step


class IntegrityError(SynthesisError):
    pass


class SolverTimeout(SynthesisError):
    def __init__(self, message, stats=None):
        super().__init__(message)
        self.stats = stats or {}


class EncodingError(SynthesisError):
    pass


class RecoveryError(SynthesisError):
    """No spare droplet is left to restart a failed mix."""

    def __init__(self, message, mix_id=None):
        super().__init__(message)
        self.mix_id = mix_id
