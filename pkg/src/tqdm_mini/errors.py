class TqdmMiniError(Exception):
    pass


class ConfigError(TqdmMiniError, ValueError):
    """Inconsistent dimensions or invalid configuration values."""


class VocabularyError(TqdmMiniError, KeyError):
    """A word or token id is missing from the tokenizer table."""


class InputError(TqdmMiniError, ValueError):
    """An input tensor or argument violates an operation's precondition."""


class FormatError(TqdmMiniError, ValueError):
    """Malformed PPM/PGM file or truncated payload."""


class ValidationError(TqdmMiniError, ValueError):
    """File contents parsed but failed a semantic check (e.g. label >= K)."""


class TrainingDiverged(TqdmMiniError, FloatingPointError):
    pass
