"""Exception hierarchy shared across the engine."""

from __future__ import annotations


class FlowForgeError(Exception):
    """Base class for all engine errors."""


class DslSyntaxError(FlowForgeError):
    """Workflow document is not well-formed structured text."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        loc = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(f"{message}{loc}")
        self.line = line
        self.column = column


class SchemaError(FlowForgeError):
    """Document is parseable but violates the workflow schema."""


class InvalidWorkflow(FlowForgeError):
    """Operation requires a valid workflow but validation found violations."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("invalid workflow: " + "; ".join(str(v) for v in self.violations))


class PortError(FlowForgeError):
    """Operator invoked with a missing, extra, or mistyped input port."""


class MissingBinding(FlowForgeError):
    """Prompt template placeholder with no binding."""

    def __init__(self, placeholder: str):
        super().__init__(f"no binding for placeholder {placeholder!r}")
        self.placeholder = placeholder


class LlmError(FlowForgeError):
    """Model client failure. `kind` is one of transport, auth, rate-limit,
    malformed-response, script."""

    def __init__(self, kind: str, message: str):
        super().__init__(f"[{kind}] {message}")
        self.kind = kind


class SandboxError(FlowForgeError):
    """Sandbox runner unusable (not a failing verdict, which is data)."""


class ShapeError(FlowForgeError):
    """Ragged or misaligned numeric arrays."""


class ConfigError(FlowForgeError):
    """Configuration value outside a module's preconditions."""

    def __init__(self, field: str, message: str):
        super().__init__(f"config field {field!r}: {message}")
        self.field = field


class OutOfRange(FlowForgeError):
    """Reward component outside its declared range."""


class NoWorkflowBlock(FlowForgeError):
    """Meta-agent output contains no fenced workflow block."""


class MultipleWorkflowBlocks(FlowForgeError):
    """Meta-agent output contains more than one fenced workflow block."""


class EmptyTrace(FlowForgeError):
    """Selection requires at least one recorded round."""


class MetaClientUnavailable(FlowForgeError):
    """Meta model client kept failing after retries."""


class IoError(FlowForgeError):
    """File read/write failure wrapped with context."""
