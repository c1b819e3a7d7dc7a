"""Shared exception types for argument, shape, and file-format violations."""


class UsageError(ValueError):
    """An operation was called with arguments outside its contract."""


class ShapeError(ValueError):
    """Array shapes or dimensions do not match what an operation expects."""


class ParseError(ValueError):
    """A persisted artifact is malformed; the message names the offending field."""


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage tag for error reporting."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
