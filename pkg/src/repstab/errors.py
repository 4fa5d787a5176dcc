"""Exception hierarchy shared by every repstab module."""

from __future__ import annotations


class RepStabError(Exception):
    """Base class for all repstab errors."""


# encoder bridge
class EmptyText(RepStabError, ValueError):
    pass


class AlignmentFailure(RepStabError, ValueError):
    pass


class EncoderFailure(RepStabError, RuntimeError):
    pass


class NonFiniteGradient(RepStabError, FloatingPointError):
    pass


class IndexOutOfRange(RepStabError, IndexError):
    pass


# importance / sensitivity
class ShapeMismatch(RepStabError, ValueError):
    pass


class DegenerateDenominator(RepStabError, ZeroDivisionError):
    pass


class WordMaskingError(EncoderFailure):
    """Encoder failure while masking a particular word."""

    def __init__(self, word_index: int, cause: Exception):
        super().__init__(f"masking word {word_index} failed: {cause}")
        self.word_index = word_index
        self.cause = cause


# detector
class StatsNotFitted(RepStabError, RuntimeError):
    pass


class EmptyBatch(RepStabError, ValueError):
    pass


class SingleClassDataset(RepStabError, ValueError):
    pass


class NonFiniteLoss(RepStabError, FloatingPointError):
    pass


class CheckpointVersionError(RepStabError, ValueError):
    pass


# evaluation
class NoRelevantItems(RepStabError, ValueError):
    pass


class DegenerateRanks(RepStabError, ValueError):
    pass


# pipeline
class SchemaError(RepStabError, ValueError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no
        self.message = message


class DuplicateId(RepStabError, ValueError):
    pass


class IngestAborted(RepStabError, RuntimeError):
    pass


class TraceRunFailed(RepStabError, RuntimeError):
    pass


class MissingArtifact(RepStabError, FileNotFoundError):
    pass


class ConfigError(RepStabError, ValueError):
    pass
