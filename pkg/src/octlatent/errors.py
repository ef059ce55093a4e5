class CodecError(Exception):
    """Base class for codec failures."""


class ValidationError(CodecError, ValueError):
    """Bad input or configuration (CLI exit code 2)."""


class CorruptStreamError(CodecError):
    """Malformed, truncated or mismatched bitstream (CLI exit code 3)."""


class ChecksumMismatch(CorruptStreamError):
    """Frame was produced with a different model."""
