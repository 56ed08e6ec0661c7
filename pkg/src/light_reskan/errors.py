"""Exception hierarchy shared by every module."""


class LightResKanError(Exception):
    pass


class ConfigurationError(LightResKanError, ValueError):
    """Invalid shapes, hyperparameters or architecture settings."""


class UsageError(LightResKanError, ValueError):
    """Caller misused an API or CLI surface (bad key, bad root tensor, ...)."""


class DataError(LightResKanError, ValueError):
    """Dataset content or layout is unusable."""


class DomainError(LightResKanError, ValueError):
    pass


class IntegrityError(LightResKanError):
    """A persisted artifact failed validation (bad magic, checksum, truncation)."""


class TrainingError(LightResKanError, RuntimeError):
    pass


class BenchmarkError(LightResKanError, RuntimeError):
    """Execution paths disagreed, so timings would be meaningless."""
