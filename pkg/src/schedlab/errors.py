"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Bad parameters, malformed input files, or inconsistent configuration."""


class TrainingError(RuntimeError):
    """A training run produced a non-finite quantity or otherwise failed."""


class FetchError(OSError):
    """Dataset download or cache lookup failed."""
