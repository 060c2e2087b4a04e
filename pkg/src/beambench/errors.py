"""Uniform error codes shared by every client and server in the facility.

All failures that cross a process boundary are expressed as exactly one
code from the closed set below, so clients can respond uniformly no matter
which service raised the error.
"""

from __future__ import annotations

import enum


class ErrorCode(str, enum.Enum):
    CONNECT_FAILED = "CONNECT_FAILED"
    COMM_FAILURE = "COMM_FAILURE"
    TIMEOUT = "TIMEOUT"
    NO_SUCH_OBJECT = "NO_SUCH_OBJECT"
    NO_SUCH_METHOD = "NO_SUCH_METHOD"
    BAD_ARGS = "BAD_ARGS"
    RESERVED = "RESERVED"
    OUT_OF_RANGE = "OUT_OF_RANGE"
    APP_ERROR = "APP_ERROR"


class ControlError(Exception):
    """An error carrying one :class:`ErrorCode`.

    Raised locally by handlers and re-raised client-side when a reply
    relays an error, so callers see the same exception either way.
    """

    def __init__(self, code: ErrorCode | str, message: str = ""):
        self.code = ErrorCode(code)
        self.message = message
        super().__init__(f"{self.code.value}: {message}" if message else self.code.value)

    def to_wire(self) -> dict:
        return {"code": self.code.value, "message": self.message}

    @classmethod
    def from_wire(cls, payload: dict) -> "ControlError":
        return cls(payload.get("code", ErrorCode.APP_ERROR), payload.get("message", ""))


def bad_args(message: str) -> ControlError:
    return ControlError(ErrorCode.BAD_ARGS, message)
