"""ncflow: a scoped workflow language with checkpointed, forkable runs.

Plans are written as indented concept blocks (``.ncds``), compiled to a
scope-verified dependency graph with stable flow indices, narrated as
deterministic prose for review, and executed by a dependency-driven
orchestrator that checkpoints every node so finished work can be inspected,
overridden, forked, and resumed without re-running anything upstream.
"""

from .compiler import (
    CompiledNode,
    CompiledPlan,
    PlanBundle,
    activate,
    compile_plan,
    dependency_closure,
    generate_narrative,
)
from .errors import (
    AgentError,
    CompileError,
    Diagnostic,
    NcError,
    OperatorError,
    PlanSyntaxError,
)
from .parser import parse, pretty_print
from .refs import Reference, Resolver, Sign, scalar, stack

__version__ = "0.1.0"

__all__ = [
    "AgentError",
    "CompileError",
    "CompiledNode",
    "CompiledPlan",
    "Diagnostic",
    "NcError",
    "OperatorError",
    "PlanBundle",
    "PlanSyntaxError",
    "Reference",
    "Resolver",
    "Sign",
    "activate",
    "compile_plan",
    "dependency_closure",
    "generate_narrative",
    "parse",
    "pretty_print",
    "scalar",
    "stack",
    "__version__",
]
