"""Exception types shared across the package.

Every error raised on purpose derives from :class:`SignCtxError`, so the CLI
can map them to a structured message and exit status 1.
"""


class SignCtxError(Exception):
    """Base class for all validation and configuration failures."""

    category = "error"


class DimensionError(SignCtxError, ValueError):
    category = "dimension"


class EmptyDimensionError(DimensionError):
    category = "empty-dimension"


class NonFiniteError(SignCtxError, FloatingPointError):
    category = "non-finite"


class UndefinedMeanError(SignCtxError, ValueError):
    category = "undefined-mean"


class UninitializedGradientError(SignCtxError, RuntimeError):
    category = "uninitialized-gradient"


class DegenerateMaskError(SignCtxError, ValueError):
    category = "degenerate-mask"


class ConfigError(SignCtxError, ValueError):
    category = "config"


class SequenceTooShortError(SignCtxError, ValueError):
    category = "sequence-too-short"

    def __init__(self, length: int, window: int):
        super().__init__(f"sequence of {length} frames is shorter than window size {window}")
        self.length = length
        self.window = window


class VocabularyError(SignCtxError, IndexError):
    category = "vocabulary"

    def __init__(self, token_id: int, vocab_size: int):
        super().__init__(f"token id {token_id} outside vocabulary of size {vocab_size}")
        self.token_id = token_id
        self.vocab_size = vocab_size


class SampleSchemaError(SignCtxError, ValueError):
    category = "sample-schema"


class LengthError(SignCtxError, ValueError):
    category = "length"


class PreconditionError(SignCtxError, ValueError):
    category = "precondition"


class CorpusParseError(SignCtxError, ValueError):
    category = "parse"

    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = str(path)
        self.line = line


class CheckpointError(SignCtxError, ValueError):
    category = "checkpoint"


class TrainingDivergedError(SignCtxError, FloatingPointError):
    category = "diverged"
