"""Agents: who answers a semantic node, and how.

Semantic nodes are dispatched to agents through glob pattern rules over flow
indices. Two agent kinds ship here: scripted (fixture-table lookup, for
reproducible runs and tests) and http (chat-completions style endpoint).
Every agent returns a Reference; free-text responses are wrapped as scalars.
"""

from __future__ import annotations

import fnmatch
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

from .errors import AgentError
from .refs import REF_SCHEMA, Reference, canonical_json_bytes, scalar

logger = logging.getLogger(__name__)

DEFAULT_PROMPT_TEMPLATE = (
    "{instruction}\n"
    "\n"
    "Inputs:\n"
    "{inputs}\n"
    "\n"
    'Respond with a JSON object whose "reference" field holds the answer '
    "as a reference document."
)


@dataclass(frozen=True)
class AgentSpec:
    """Configuration for one agent."""

    name: str
    kind: str  # "scripted" | "http"
    fixture: Optional[str] = None
    endpoint: Optional[str] = None
    model: Optional[str] = None
    headers: Optional[dict] = None
    timeout: float = 30.0


@dataclass(frozen=True)
class PatternRule:
    """Glob over flow indices; highest priority wins, then declaration order."""

    pattern: str
    agent: str
    priority: int = 0


def match_agent(flow_index: str, rules: list[PatternRule]) -> Optional[str]:
    """Name of the agent owning ``flow_index``, or None if nothing matches."""
    best_key = None
    best_agent = None
    for order, rule in enumerate(rules):
        if fnmatch.fnmatchcase(flow_index, rule.pattern):
            key = (-rule.priority, order)
            if best_key is None or key < best_key:
                best_key = key
                best_agent = rule.agent
    return best_agent


@dataclass
class AgentRequest:
    run_id: str
    node: str  # instance id
    flow_index: str  # template flow index
    instruction: str
    inputs: dict[str, Reference]  # post-transmutation
    prompt: str
    instruction_digest: str
    input_digest: str


@dataclass
class AgentResponse:
    reference: Reference
    raw: str  # verbatim body, logged to the agent trace


def instruction_digest(instruction: str) -> str:
    return hashlib.sha256(instruction.encode("utf-8")).hexdigest()


def input_digest(inputs: dict[str, Reference]) -> str:
    """Digest of the (name, value-digest) pairs in declared order."""
    doc = [[name, ref.digest()] for name, ref in inputs.items()]
    return hashlib.sha256(canonical_json_bytes(doc)).hexdigest()


def render_prompt(
    instruction: str,
    inputs: dict[str, Reference],
    template: str = DEFAULT_PROMPT_TEMPLATE,
) -> str:
    lines = [
        f"- {name}: {ref.canonical_bytes().decode('utf-8')}"
        for name, ref in inputs.items()
    ] or ["- (none)"]
    return template.format(instruction=instruction, inputs="\n".join(lines))


def _answer_to_reference(value) -> Reference:
    if isinstance(value, dict) and value.get("schema") == REF_SCHEMA:
        return Reference.from_json(value)
    return scalar(value)


class ScriptedAgent:
    """Fixture-table agent.

    The fixture file is a JSON object. Plain keys are
    ``"<instruction digest>:<input digest>"`` mapped to canonical Reference
    JSON. Two reserved keys make tables writable by hand:

    * ``"by_instruction"``: map from instruction text to an answer (Reference
      JSON or a bare cell value, wrapped as a scalar);
    * ``"synthesize"``: when true, unmatched requests get a deterministic
      scalar derived from the digests instead of failing.
    """

    def __init__(
        self,
        name: str,
        table: Optional[dict] = None,
        by_instruction: Optional[dict] = None,
        synthesize: bool = False,
    ):
        self.name = name
        self.table = dict(table or {})
        self.by_instruction = dict(by_instruction or {})
        self.synthesize = synthesize
        self.calls = 0

    @classmethod
    def from_fixture(cls, name: str, path: Union[str, Path]) -> "ScriptedAgent":
        try:
            doc = json.loads(Path(path).read_text("utf-8"))
        except OSError as exc:
            raise AgentError(f"agent {name!r} fixture {path}: {exc}") from exc
        except ValueError as exc:
            raise AgentError(f"agent {name!r} fixture {path} is not JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise AgentError(f"fixture {path} is not a JSON object")
        by_instruction = doc.pop("by_instruction", {})
        synthesize = bool(doc.pop("synthesize", False))
        return cls(
            name, table=doc, by_instruction=by_instruction, synthesize=synthesize
        )

    def invoke(self, request: AgentRequest) -> AgentResponse:
        self.calls += 1
        key = f"{request.instruction_digest}:{request.input_digest}"
        answer = self.table.get(key)
        if answer is None:
            answer = self.by_instruction.get(request.instruction)
        if answer is None and self.synthesize:
            answer = (
                f"synthetic:{request.instruction_digest[:12]}"
                f":{request.input_digest[:12]}"
            )
        if answer is None:
            raise AgentError(
                f"scripted agent {self.name!r} has no entry for {key} "
                f"(instruction {request.instruction!r})"
            )
        ref = _answer_to_reference(answer)
        return AgentResponse(
            reference=ref,
            raw=canonical_json_bytes({"reference": ref.to_json()}).decode("utf-8"),
        )


class HttpAgent:
    """Chat-completions-style HTTP agent."""

    def __init__(self, spec: AgentSpec):
        if not spec.endpoint:
            raise AgentError(f"http agent {spec.name!r} needs an endpoint")
        self.name = spec.name
        self.spec = spec

    def invoke(self, request: AgentRequest) -> AgentResponse:
        import httpx

        body = {
            "model": self.spec.model or "default",
            "messages": [{"role": "user", "content": request.prompt}],
        }
        try:
            response = httpx.post(
                self.spec.endpoint,
                json=body,
                headers=self.spec.headers or {},
                timeout=self.spec.timeout,
            )
            response.raise_for_status()
        except httpx.HTTPError as exc:
            raise AgentError(f"agent {self.name!r} transport failure: {exc}")
        raw = response.text
        try:
            doc = response.json()
        except ValueError:
            raise AgentError(f"agent {self.name!r} returned non-JSON")
        try:
            ref = self._extract_reference(doc)
        except (KeyError, TypeError, ValueError) as exc:
            raise AgentError(f"agent {self.name!r} response unusable: {exc}")
        return AgentResponse(reference=ref, raw=raw)

    @staticmethod
    def _extract_reference(doc) -> Reference:
        if isinstance(doc, dict) and "reference" in doc:
            return _answer_to_reference(doc["reference"])
        if isinstance(doc, dict) and doc.get("schema") == REF_SCHEMA:
            return Reference.from_json(doc)
        content = doc["choices"][0]["message"]["content"]
        try:
            parsed = json.loads(content)
        except (ValueError, TypeError):
            return scalar(content)
        if isinstance(parsed, dict) and "reference" in parsed:
            return _answer_to_reference(parsed["reference"])
        if isinstance(parsed, dict) and parsed.get("schema") == REF_SCHEMA:
            return Reference.from_json(parsed)
        return scalar(content)


@dataclass
class AgentSetup:
    """Resolved agents plus the rules that route nodes to them."""

    agents: dict[str, object] = field(default_factory=dict)
    rules: list[PatternRule] = field(default_factory=list)

    def agent_for(self, flow_index: str):
        name = match_agent(flow_index, self.rules)
        return self.agents.get(name) if name else None


def build_agent(spec: AgentSpec, base_dir: Path):
    if spec.kind == "scripted":
        if not spec.fixture:
            return ScriptedAgent(spec.name, synthesize=True)
        path = Path(spec.fixture)
        if not path.is_absolute():
            path = base_dir / path
        return ScriptedAgent.from_fixture(spec.name, path)
    if spec.kind == "http":
        return HttpAgent(spec)
    raise AgentError(f"unknown agent kind {spec.kind!r}")


def load_agent_setup(doc: dict, base_dir: Union[str, Path]) -> AgentSetup:
    """Build agents and rules from a config document.

    Shape: ``{"agents": [{name, kind, ...}], "rules": [{pattern, agent,
    priority?}]}``. Fixture paths resolve relative to ``base_dir``.
    """
    base_dir = Path(base_dir)
    setup = AgentSetup()
    for item in doc.get("agents", []):
        spec = AgentSpec(
            name=item["name"],
            kind=item["kind"],
            fixture=item.get("fixture"),
            endpoint=item.get("endpoint"),
            model=item.get("model"),
            headers=item.get("headers"),
            timeout=float(item.get("timeout", 30.0)),
        )
        setup.agents[spec.name] = build_agent(spec, base_dir)
    for item in doc.get("rules", []):
        rule = PatternRule(
            pattern=item["pattern"],
            agent=item["agent"],
            priority=int(item.get("priority", 0)),
        )
        if rule.agent not in setup.agents:
            raise AgentError(f"rule {rule.pattern!r} names unknown agent {rule.agent!r}")
        setup.rules.append(rule)
    return setup


def load_agent_file(path: Union[str, Path]) -> AgentSetup:
    path = Path(path)
    doc = json.loads(path.read_text("utf-8"))
    return load_agent_setup(doc, path.parent)
