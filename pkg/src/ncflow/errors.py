"""Exception types shared across the toolchain.

Every error that can cross the CLI or HTTP boundary carries a stable
``code`` string so diagnostics stay machine-readable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional


class NcError(Exception):
    """Base class for all toolchain errors."""

    code = "error"

    def to_json(self) -> dict:
        return {"code": self.code, "message": str(self)}


@dataclass
class Diagnostic:
    """One compile-time finding, pointing into the source text."""

    code: str
    message: str
    line: int
    column: int
    concept: Optional[str] = None
    flow_index: Optional[str] = None

    def to_json(self) -> dict:
        out: dict[str, Any] = {
            "code": self.code,
            "message": self.message,
            "line": self.line,
            "column": self.column,
        }
        if self.concept is not None:
            out["concept"] = self.concept
        if self.flow_index is not None:
            out["flow_index"] = self.flow_index
        return out

    def render(self, filename: str = "<plan>") -> str:
        loc = f"{filename}:{self.line}:{self.column}"
        if self.concept is not None:
            return f"{loc} {self.code}: {self.message} (concept: {self.concept})"
        return f"{loc} {self.code}: {self.message}"


class PlanSyntaxError(NcError):
    """Malformed plan text. Always points at a line and column."""

    code = "syntax_error"

    def __init__(self, message: str, line: int, column: int):
        super().__init__(message)
        self.line = line
        self.column = column

    def to_json(self) -> dict:
        return {
            "code": self.code,
            "message": str(self),
            "line": self.line,
            "column": self.column,
        }


class CompileError(NcError):
    """Aggregate of compile-time diagnostics (scope errors, unknown operators)."""

    code = "compile_error"

    def __init__(self, diagnostics: list[Diagnostic]):
        self.diagnostics = list(diagnostics)
        summary = "; ".join(d.message for d in self.diagnostics[:3])
        if len(self.diagnostics) > 3:
            summary += f" (+{len(self.diagnostics) - 3} more)"
        super().__init__(summary)

    def to_json(self) -> dict:
        return {
            "code": self.code,
            "message": str(self),
            "diagnostics": [d.to_json() for d in self.diagnostics],
        }

    @property
    def scope_errors(self) -> list[Diagnostic]:
        return [d for d in self.diagnostics if d.code == "scope_error"]


class UnknownFlowIndexError(NcError):
    code = "unknown_flow_index"


class MissingProvisionError(NcError):
    code = "missing_provision"

    def __init__(self, name: str):
        super().__init__(f"provision {name!r} is referenced but not supplied")
        self.name = name


class ShapeMismatchError(NcError):
    code = "shape_mismatch"


class DuplicateAxisError(NcError):
    code = "duplicate_axis"


class UnknownAxisError(NcError):
    code = "unknown_axis"


class IndexOutOfRangeError(NcError):
    code = "index_out_of_range"


class UnresolvableSignError(NcError):
    """A sign's resource could not be fetched at transmutation time."""

    code = "unresolvable_sign"

    def __init__(self, uri: str, detail: str = ""):
        msg = f"cannot resolve sign uri {uri!r}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
        self.uri = uri


class OperatorError(NcError):
    """A syntactic built-in rejected its inputs."""

    code = "operator_error"

    def __init__(self, op: str, message: str):
        super().__init__(f"{op}: {message}")
        self.op = op


class AgentError(NcError):
    """Transport or parse failure while talking to an agent."""

    code = "agent_error"


class UncoveredSemanticNodeError(NcError):
    code = "uncovered_semantic_node"

    def __init__(self, flow_index: str):
        super().__init__(f"no agent pattern rule matches semantic node {flow_index}")
        self.flow_index = flow_index


class MissingGroundInputError(NcError):
    code = "missing_ground_input"

    def __init__(self, concept: str, flow_index: str):
        super().__init__(
            f"ground concept {concept!r} (node {flow_index}) has no literal and no run input"
        )
        self.concept = concept
        self.flow_index = flow_index


class MissingLoopAxisError(NcError):
    code = "missing_loop_axis"

    def __init__(self, axis: str, flow_index: str):
        super().__init__(f"collection for loop at {flow_index} lacks axis {axis!r}")
        self.axis = axis
        self.flow_index = flow_index


class NotFoundError(NcError):
    code = "not_found"


class StorageError(NcError):
    code = "storage_error"


class SchedulerInvariantError(NcError):
    """Internal invariant violation; aborts the run rather than mis-executing."""

    code = "scheduler_invariant"
