# errors.py
from typing import Optional


class AdaptError(Exception):
    """Base error; `exit_code` is what the CLI returns when it escapes."""
    exit_code = 2


class ConfigError(AdaptError, ValueError):
    exit_code = 1


class EmptyFontSet(AdaptError):
    exit_code = 1


class MissingGlyph(AdaptError):
    def __init__(self, char: str, font_id: str):
        super().__init__(f"Font '{font_id}' has no glyph for {char!r}")
        self.char = char
        self.font_id = font_id


class DecodeError(AdaptError):
    pass


class ExhaustedStream(AdaptError):
    pass


class WidthTooSmall(AdaptError):
    pass


class EmptySequence(AdaptError):
    pass


class DimensionMismatch(AdaptError):
    pass


class LengthMismatch(AdaptError):
    pass


class NaNLoss(AdaptError):
    def __init__(self, message: str, dump_path: Optional[str] = None):
        super().__init__(message if dump_path is None else f"{message} (dump: {dump_path})")
        self.dump_path = dump_path


class EmptyReference(AdaptError):
    exit_code = 1


class ZeroGap(AdaptError):
    exit_code = 1


class IncompatibleCharset(AdaptError):
    pass


class CheckpointError(AdaptError):
    pass
