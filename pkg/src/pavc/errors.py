"""Exception hierarchy shared by every pavc module.

Each class carries a ``category`` string; the CLI maps categories to exit
codes so failures are machine-readable.
"""


class PavcError(Exception):
    category = "error"


class InputError(PavcError, ValueError):
    category = "input"


class ShapeError(InputError):
    pass


class ChannelError(InputError):
    pass


class LengthError(InputError):
    pass


class EmptyDatasetError(InputError):
    pass


class CoverageError(InputError):
    pass


class ParseError(InputError):
    category = "parse"


class DomainError(InputError):
    category = "domain"


class ToolNotFoundError(PavcError, EnvironmentError):
    """An external executable (encoder, detector adapter) is missing."""

    category = "environment"


class SubprocessError(PavcError):
    category = "subprocess"

    def __init__(self, message, returncode=None, stderr=""):
        super().__init__(message)
        self.returncode = returncode
        self.stderr = stderr


class DecodeError(SubprocessError):
    pass


class CalibrationAborted(PavcError):
    category = "calibration"

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class ProtocolError(PavcError):
    category = "protocol"


class VersionError(ProtocolError):
    pass


class IncompleteMessage(ProtocolError):
    """Not enough bytes buffered yet; the caller should read more."""

    def __init__(self, needed):
        super().__init__(f"incomplete message: need {needed} more bytes")
        self.needed = needed


class TransportError(PavcError):
    category = "transport"

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record


class SessionError(PavcError):
    """A sender/receiver stage failed; ``report`` lists what completed."""

    category = "session"

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report or {}
