"""Exception types shared across the toolkit.

Exit-code mapping used by the CLI: ConfigError -> 1, DataError -> 2,
anything else -> 3.
"""


class ConfigError(Exception):
    """User or configuration error (bad flag, unknown key, invalid value)."""


class DataError(Exception):
    """Dataset content or layout error (missing files, shape mismatches)."""


class TrainingDiverged(RuntimeError):
    """Raised when a training run produces a non-finite loss.

    Carries a diagnostic dump of the offending batch so the CLI can persist
    it next to the run record.
    """

    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump
