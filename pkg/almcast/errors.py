"""
Exception hierarchy for almcast.
"""

from typing import Optional


class McastError(Exception):
    """Base error. ``code`` is a short machine-readable tag."""

    code = "MCAST_ERROR"

    def __init__(self, message: str, code: Optional[str] = None):
        self.message = message
        if code:
            self.code = code
        super().__init__(f"[{self.code}] {message}")


class ScenarioError(McastError):
    """Scenario file could not be parsed or validated."""

    code = "SCENARIO"

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{message}")


class UnknownNodeError(McastError):
    code = "UNKNOWN_NODE"


class ConnectionClosedError(McastError):
    code = "CONN_CLOSED"


class FrameError(McastError):
    """Malformed, oversize or truncated frame."""

    code = "FRAME"


class NeedMoreData(Exception):
    """Raised by ``decode`` when the buffer holds no complete frame yet."""


class DistributionRejected(McastError):
    """The report had no usable candidate; the EH must measure again."""

    code = "REJECTED"


class UnusableReportError(McastError):
    code = "UNUSABLE_REPORT"


class InstanceTooLargeError(McastError):
    code = "TOO_LARGE"


class MissingLatencyError(McastError):
    code = "MISSING_LATENCY"
