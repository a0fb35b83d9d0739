"""Exception hierarchy shared across the package."""

from __future__ import annotations


class WareloopError(Exception):
    """Base class for every error raised by this package."""


# --- scene / environment ---


class UnknownSite(WareloopError):
    pass


class UnknownObject(WareloopError):
    pass


class Unreachable(WareloopError):
    pass


class NotFacingSite(WareloopError):
    pass


class ObjectNotVisible(WareloopError):
    pass


class UnknownLabel(WareloopError):
    pass


# --- plan codec ---


class CodecError(WareloopError):
    pass


class UnknownSkill(CodecError):
    pass


class MalformedCall(CodecError):
    pass


class NoJsonFound(CodecError):
    pass


class SchemaMismatch(CodecError):
    def __init__(self, path: str, detail: str = ""):
        self.path = path
        super().__init__(f"schema mismatch at {path}" + (f": {detail}" if detail else ""))


class MissingNextAction(CodecError):
    pass


class FeedbackParseError(CodecError):
    pass


# --- skill dispatch ---


class PreconditionBypassed(WareloopError):
    """A skill was dispatched even though its precondition check failed.

    This signals a bug in the caller, not a recoverable planner mistake.
    """


# --- executor ---


class PlannerProtocolError(WareloopError):
    """The planner kept replying unparseably after the allowed reprompts."""


# --- model backends ---


class BackendError(WareloopError):
    pass


class Transport(BackendError):
    pass


class BadStatus(BackendError):
    def __init__(self, status: int, body: str = ""):
        self.status = status
        super().__init__(f"backend returned HTTP {status}: {body[:200]}")


class ScriptExhausted(BackendError):
    pass


class ScriptMismatch(BackendError):
    def __init__(self, expected: str, got: str):
        self.expected = expected
        self.got = got
        super().__init__(f"script expected stimulus containing {expected!r}, got {got[:120]!r}")


class ParseFail(BackendError):
    pass


class ImpossibleTask(BackendError):
    pass


# --- metrics / config ---


class EmptyInput(WareloopError):
    pass


class ConfigError(WareloopError):
    pass
