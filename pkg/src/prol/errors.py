"""Exception hierarchy shared by every prol module."""


class ProlError(Exception):
    """Base class for all errors raised by prol."""


class ContractError(ProlError, ValueError):
    """A precondition of an operation was violated by the caller."""


class InvalidSplitError(ContractError):
    pass


class SeenOnceViolation(ProlError):
    """A stream sample (or a whole task) was requested a second time."""


class ManifestError(ProlError):
    pass


class CheckpointError(ProlError):
    pass


class TrainingDiverged(ProlError, FloatingPointError):
    pass


class ConfigError(ProlError, ValueError):
    """Aggregated configuration validation failure."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  - " + "\n  - ".join(self.problems))


class EmitError(ProlError):
    pass
