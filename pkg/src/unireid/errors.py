"""Exception types shared across the package."""


class UniReidError(Exception):
    pass


class ConfigError(UniReidError):
    """Inconsistent or invalid configuration, including shape/config mismatches."""


class DataError(UniReidError):
    """Malformed manifests, labels, captions, or vocabulary problems."""


class NumericError(UniReidError):
    """Non-finite activations or degenerate numeric inputs (e.g. zero-norm vectors)."""


class EvaluationError(UniReidError):
    """Retrieval evaluation could not produce a defined result."""
