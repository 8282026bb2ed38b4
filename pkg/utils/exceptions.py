"""
Exception hierarchy shared by all histocr modules.

Library code raises these; only the CLI turns them into exit codes.
"""

from typing import Optional, Tuple


class HistOCRError(ValueError):
    """Base class for operational errors (bad input, failed precondition)."""


class PageXmlError(HistOCRError):
    def __init__(self, message: str, line: Optional[int] = None, column: Optional[int] = None):
        self.line = line
        self.column = column
        if line is not None:
            message = f"{message} (line {line}, column {column})"
        super().__init__(message)


class RegionBoundsError(HistOCRError):
    def __init__(self, point: Tuple[int, int], width: int, height: int):
        self.point = point
        super().__init__(
            f"polygon point ({point[0]},{point[1]}) outside page bounds {width}x{height}"
        )


class EmptyInputError(HistOCRError):
    pass


class UnsupportedCharacterError(HistOCRError):
    def __init__(self, char: str, style_id: str):
        self.char = char
        super().__init__(f"character {char!r} (U+{ord(char):04X}) not supported by style {style_id}")


class LabelTooLongError(HistOCRError):
    def __init__(self, frames: int, required: int):
        self.frames = frames
        self.required = required
        super().__init__(f"label too long: needs {required} frames, got {frames}")


class InstanceTooLargeError(HistOCRError):
    pass


class ShapeMismatchError(HistOCRError):
    pass


class VoterMismatchError(HistOCRError):
    def __init__(self, index: int, reason: str):
        self.index = index
        super().__init__(f"voter {index}: {reason}")


class CodecMismatchError(HistOCRError):
    pass


class CheckpointFormatError(HistOCRError):
    pass


class ConfigError(HistOCRError):
    pass


class NormalizationError(HistOCRError):
    pass
