"""Typed errors raised by the engine.

Every error carries a stable ``code`` (its class name) so the HTTP layer can
map engine failures 1:1 onto the API error envelope without string matching.
"""

from __future__ import annotations


class TreelineError(Exception):
    """Base class for all engine errors."""

    def __init__(self, message: str, **details):
        super().__init__(message)
        self.message = message
        self.details = details

    @property
    def code(self) -> str:
        return type(self).__name__

    def to_envelope(self) -> dict:
        return {"code": self.code, "message": self.message, "details": self.details}


# -- projects / store ------------------------------------------------------

class UnknownProject(TreelineError):
    pass


class ProjectExists(TreelineError):
    pass


class RootAlreadyExists(TreelineError):
    pass


class StorageFailure(TreelineError):
    pass


class StaleWriter(TreelineError):
    pass


class LeaseHeld(TreelineError):
    pass


class EmptyPayload(TreelineError):
    pass


class ProvenanceConflict(TreelineError):
    pass


class UnknownAsset(TreelineError):
    pass


# -- tree operations --------------------------------------------------------

class UnknownNode(TreelineError):
    pass


class UnknownParent(TreelineError):
    pass


class ParentNotExtendable(TreelineError):
    pass


class NotIntentDraft(TreelineError):
    pass


class EmptyIntent(TreelineError):
    pass


class AlreadyLocked(TreelineError):
    pass


class IntentLockedError(TreelineError):
    """Intent edits on a locked scene anchor are rejected."""


class NotPlanningNode(TreelineError):
    pass


class EditOutOfBounds(TreelineError):
    pass


class IndexOutOfRange(TreelineError):
    pass


class NodeNotSucceeded(TreelineError):
    pass


class CannotCollapseRoot(TreelineError):
    pass


class CannotPruneRoot(TreelineError):
    pass


class PruneConflict(TreelineError):
    """Subtree removal blocked by live references to assets produced inside it."""

    def __init__(self, message: str, blocking: list[dict]):
        super().__init__(message, blocking=blocking)
        self.blocking = blocking


class VersionConflict(TreelineError):
    pass


class InvalidKind(TreelineError):
    pass


# -- planning ---------------------------------------------------------------

class IntentEmpty(TreelineError):
    pass


class ProviderUnavailable(TreelineError):
    pass


class UnparseableResponse(TreelineError):
    def __init__(self, role: str, raw_text: str):
        super().__init__(f"unparseable {role} agent response", role=role, raw_text=raw_text)
        self.role = role
        self.raw_text = raw_text


class NoCompatibleWorkflow(TreelineError):
    pass


class UnknownTemplate(TreelineError):
    pass


# -- workflows / execution --------------------------------------------------

class ParseError(TreelineError):
    pass


class DuplicateWorkflowId(TreelineError):
    pass


class SchemaError(TreelineError):
    pass


class UnknownWorkflow(TreelineError):
    pass


class MissingRequiredInput(TreelineError):
    pass


class ParamOutOfRange(TreelineError):
    pass


class UnknownParam(TreelineError):
    pass


class NodeNotPlanned(TreelineError):
    pass


class ValidationFailed(TreelineError):
    pass


class ExecutorUnavailable(TreelineError):
    pass


class UnknownJob(TreelineError):
    pass


class JobNotCancellable(TreelineError):
    pass


# -- layout -----------------------------------------------------------------

class InvalidConfig(TreelineError):
    pass


class CorruptTree(TreelineError):
    pass


# -- stitching --------------------------------------------------------------

class UnknownCandidate(TreelineError):
    pass


class ModalityMismatch(TreelineError):
    pass


class BadTrim(TreelineError):
    pass


class UnknownSegment(TreelineError):
    pass


class UnknownEntry(TreelineError):
    pass


class EmptyTimeline(TreelineError):
    pass


class EncoderFailed(TreelineError):
    pass


# -- metrics ----------------------------------------------------------------

class ClosedSession(TreelineError):
    pass


class UnknownSession(TreelineError):
    pass


class TimestampRegression(TreelineError):
    pass


class MissingAnchor(TreelineError):
    def __init__(self, which: str):
        super().__init__(f"session log is missing required anchor event {which}", which=which)
        self.which = which


# -- cli / scripts ----------------------------------------------------------

class ScriptParseError(TreelineError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}", line=line_no)
        self.line_no = line_no


class CommandFailed(TreelineError):
    def __init__(self, line_no: int, command: str, cause: Exception):
        super().__init__(f"line {line_no}: {command}: {cause}", line=line_no, command=command)
        self.line_no = line_no
        self.command = command
        self.cause = cause
