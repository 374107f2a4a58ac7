"""
Exception types for the scale-then-compress toolkit.
Each error carries the CLI exit code it maps to.
"""


class ScaleCompressError(Exception):
    """Base class for all toolkit errors"""

    exit_code = 1


class InvalidArgumentError(ScaleCompressError, ValueError):
    """An operation was called with arguments outside its contract"""


class SampleTooLongError(InvalidArgumentError):
    """A sequence sample does not fit into a single packing context"""

    def __init__(self, sample_id: str, length: int, capacity: int):
        self.sample_id = sample_id
        self.length = length
        self.capacity = capacity
        super().__init__(
            f"Sample {sample_id!r} has {length} tokens, exceeding context capacity {capacity}"
        )


class CorruptBatchError(ScaleCompressError):
    """A packed batch's segment table is inconsistent with its payload"""


class ConfigError(ScaleCompressError):
    """A configuration file is unreadable or fails validation"""

    exit_code = 2


class FormatError(ScaleCompressError):
    """An input file does not follow its binary or text format"""

    exit_code = 3


class TruncatedPayloadError(FormatError):
    """A binary file ended before its declared payload"""

    def __init__(self, expected: int, actual: int):
        self.expected = expected
        self.actual = actual
        super().__init__(f"truncated payload: expected {expected} bytes, found {actual}")


class CorruptTensorError(FormatError):
    """A quantized tensor holds codes outside its format's range"""
