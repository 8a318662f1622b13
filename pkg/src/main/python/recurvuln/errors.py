"""
Exception hierarchy shared by every stage of the pipeline.
"""


class RecurVulnError(Exception):
    """Base class for all errors raised by recurvuln."""


class ConfigError(RecurVulnError):
    pass


class ProviderError(RecurVulnError):
    pass


class TransportError(ProviderError):
    """The chat endpoint could not be reached after all retries."""


class ScriptExhaustedError(ProviderError):
    """A scripted session ran out of steps (test-configuration error)."""


class RecordNotFoundError(RecurVulnError):
    pass


class RecordParseError(RecurVulnError):
    pass


class IngestError(RecurVulnError):
    pass


class CveNotFoundError(IngestError):
    pass


class CommitUnreachableError(IngestError):
    pass


class TemplateViolationError(RecurVulnError):
    pass


class DistillationError(RecurVulnError):
    pass


class PortingError(RecurVulnError):
    pass


class MalformedPatchError(RecurVulnError):
    pass


class PatchApplyError(RecurVulnError):
    pass


class SpanDriftError(PatchApplyError):
    """The sandbox file no longer matches the span a function was extracted from."""


class InvalidPatternError(RecurVulnError):
    pass


class DatasetError(RecurVulnError):
    pass
