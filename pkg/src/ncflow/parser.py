"""Parser for ``.ncds`` plan text.

The surface language is deliberately thin: concept declarations ``{name}``
nest by 4-space indentation, and three marker lines attach facts to the
enclosing concept: ``<-`` gives a value (literal, sign, or import),
``<=`` gives a derivation (built-in operator or quoted agent instruction),
``<*`` names a collection to iterate. Concept names are free-form Unicode;
only braces and newlines are excluded.

Parsing is purely structural. Whether references resolve is the compiler's
business, not the parser's.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from typing import Optional, Union

from .errors import PlanSyntaxError

INDENT_UNIT = 4
LOOP_ELEMENT = "*"

_IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
_NUMBER_RE = re.compile(r"-?\d+(\.\d+)?([eE][+-]?\d+)?")


# -- payloads ---------------------------------------------------------------


@dataclass(frozen=True)
class TextLit:
    value: str


@dataclass(frozen=True)
class NumberLit:
    value: Union[int, float]


@dataclass(frozen=True)
class SignLit:
    uri: str


@dataclass(frozen=True)
class ImportRef:
    """``<- {name}``: re-declare an enclosing concept (or ``*``) locally."""

    name: str


ValuePayload = Union[TextLit, NumberLit, SignLit, ImportRef]


@dataclass(frozen=True)
class ArgRef:
    """One ``{name}`` argument of a functional line; ``*`` is the loop element."""

    name: str
    line: int
    column: int


@dataclass(frozen=True)
class OpSpec:
    """Functional operator: a bare built-in identifier or a quoted instruction."""

    instruction: Optional[str] = None
    ident: Optional[str] = None

    @property
    def is_instruction(self) -> bool:
        return self.instruction is not None

    def render(self) -> str:
        if self.instruction is not None:
            return json.dumps(self.instruction, ensure_ascii=False)
        return self.ident or ""


# -- marker lines -------------------------------------------------------------


@dataclass
class ValueLine:
    payload: ValuePayload
    line: int = 0
    column: int = 0
    kind = "value"


@dataclass
class FunctionalLine:
    op: OpSpec
    args: list[ArgRef] = field(default_factory=list)
    line: int = 0
    column: int = 0
    kind = "functional"


@dataclass
class ContextLine:
    collection: str
    line: int = 0
    column: int = 0
    kind = "context"


MarkerLine = Union[ValueLine, FunctionalLine, ContextLine]


@dataclass
class ConceptNode:
    name: str
    lines: list[MarkerLine] = field(default_factory=list)
    children: list["ConceptNode"] = field(default_factory=list)
    line: int = 0
    column: int = 0

    @property
    def value_line(self) -> Optional[ValueLine]:
        for ln in self.lines:
            if isinstance(ln, ValueLine):
                return ln
        return None

    @property
    def functional_line(self) -> Optional[FunctionalLine]:
        for ln in self.lines:
            if isinstance(ln, FunctionalLine):
                return ln
        return None

    @property
    def context_line(self) -> Optional[ContextLine]:
        for ln in self.lines:
            if isinstance(ln, ContextLine):
                return ln
        return None

    def to_struct(self) -> tuple:
        """Location-free shape, for structural comparison."""
        lines = []
        for ln in self.lines:
            if isinstance(ln, ValueLine):
                lines.append(("value", ln.payload))
            elif isinstance(ln, FunctionalLine):
                lines.append(
                    ("functional", ln.op, tuple(a.name for a in ln.args))
                )
            else:
                lines.append(("context", ln.collection))
        return (
            self.name,
            tuple(lines),
            tuple(c.to_struct() for c in self.children),
        )


@dataclass
class SourcePlan:
    root: ConceptNode
    source_digest: str

    def to_struct(self) -> tuple:
        return self.root.to_struct()


# -- lexing -------------------------------------------------------------------


def _err(msg: str, line: int, col: int) -> PlanSyntaxError:
    return PlanSyntaxError(msg, line, col)


class _LineScanner:
    """Character scanner over one payload, tracking the source column."""

    def __init__(self, text: str, line_no: int, col0: int):
        self.text = text
        self.pos = 0
        self.line_no = line_no
        self.col0 = col0  # source column of text[0]

    def col(self, offset: int = 0) -> int:
        return self.col0 + self.pos + offset

    def eof(self) -> bool:
        return self.pos >= len(self.text)

    def peek(self) -> str:
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def skip_ws(self) -> None:
        while not self.eof() and self.text[self.pos] in " \t":
            if self.text[self.pos] == "\t":
                raise _err("tab character in line", self.line_no, self.col())
            self.pos += 1

    def expect(self, ch: str, what: str) -> None:
        if self.peek() != ch:
            raise _err(f"expected {what}", self.line_no, self.col())
        self.pos += 1

    def scan_braced(self) -> tuple[str, int]:
        """Read ``{name}``; returns (name, column of the opening brace)."""
        start_col = self.col()
        self.expect("{", "'{'")
        start = self.pos
        while not self.eof():
            ch = self.text[self.pos]
            if ch == "}":
                raw = self.text[start:self.pos]
                self.pos += 1
                name = raw.strip()
                if not name:
                    raise _err("empty concept name", self.line_no, start_col)
                return name, start_col
            if ch == "{":
                raise _err("unbalanced braces: nested '{'", self.line_no, self.col())
            self.pos += 1
        raise _err("unbalanced braces: missing '}'", self.line_no, start_col)

    def scan_quoted(self) -> str:
        start_col = self.col()
        self.expect('"', "'\"'")
        out = []
        while not self.eof():
            ch = self.text[self.pos]
            if ch == "\\":
                if self.pos + 1 >= len(self.text):
                    break
                out.append(self.text[self.pos:self.pos + 2])
                self.pos += 2
                continue
            if ch == '"':
                token = '"' + "".join(out) + '"'
                self.pos += 1
                try:
                    return json.loads(token)
                except json.JSONDecodeError:
                    raise _err("invalid string escape", self.line_no, start_col)
            out.append(ch)
            self.pos += 1
        raise _err("unterminated string literal", self.line_no, start_col)

    def scan_number(self) -> Union[int, float]:
        m = _NUMBER_RE.match(self.text, self.pos)
        if not m:
            raise _err("expected a number", self.line_no, self.col())
        token = m.group(0)
        self.pos = m.end()
        return json.loads(token)

    def scan_ident(self) -> str:
        m = _IDENT_RE.match(self.text, self.pos)
        if not m:
            raise _err("expected an operator name", self.line_no, self.col())
        self.pos = m.end()
        return m.group(0)

    def end(self, context: str) -> None:
        self.skip_ws()
        if not self.eof():
            raise _err(f"unexpected text after {context}", self.line_no, self.col())


def _parse_value_payload(sc: _LineScanner) -> ValuePayload:
    sc.skip_ws()
    ch = sc.peek()
    if ch == "{":
        name, _ = sc.scan_braced()
        sc.end("value reference")
        return ImportRef(name)
    if ch == '"':
        text = sc.scan_quoted()
        sc.end("string literal")
        return TextLit(text)
    if ch and (ch.isdigit() or ch == "-"):
        num = sc.scan_number()
        sc.end("number literal")
        return NumberLit(num)
    if sc.text[sc.pos:sc.pos + 4] == "sign":
        sc.pos += 4
        sc.skip_ws()
        sc.expect("(", "'(' after sign")
        sc.skip_ws()
        if sc.peek() != '"':
            raise _err("sign(...) takes a quoted uri", sc.line_no, sc.col())
        uri = sc.scan_quoted()
        sc.skip_ws()
        sc.expect(")", "')' closing sign(...)")
        sc.end("sign literal")
        return SignLit(uri)
    raise _err("invalid value payload", sc.line_no, sc.col())


def _parse_functional_payload(sc: _LineScanner) -> tuple[OpSpec, list[ArgRef]]:
    sc.skip_ws()
    if sc.peek() == '"':
        op = OpSpec(instruction=sc.scan_quoted())
    else:
        op = OpSpec(ident=sc.scan_ident())
    sc.skip_ws()
    sc.expect("(", "'(' starting the argument list")
    args: list[ArgRef] = []
    sc.skip_ws()
    if sc.peek() == ")":
        sc.pos += 1
        sc.end("argument list")
        return op, args
    while True:
        sc.skip_ws()
        if sc.peek() != "{":
            raise _err(
                "functional arguments must be {concept} references",
                sc.line_no,
                sc.col(),
            )
        name, col = sc.scan_braced()
        args.append(ArgRef(name=name, line=sc.line_no, column=col))
        sc.skip_ws()
        if sc.peek() == ",":
            sc.pos += 1
            continue
        if sc.peek() == ")":
            sc.pos += 1
            sc.end("argument list")
            return op, args
        raise _err("expected ',' or ')' in argument list", sc.line_no, sc.col())


def _parse_context_payload(sc: _LineScanner) -> str:
    sc.skip_ws()
    if sc.peek() != "{":
        raise _err("context marker takes a {concept} reference", sc.line_no, sc.col())
    name, _ = sc.scan_braced()
    sc.end("context reference")
    return name


# -- parse --------------------------------------------------------------------


def parse(text: str) -> SourcePlan:
    """Parse plan text into a :class:`SourcePlan`.

    Raises :class:`PlanSyntaxError` with a 1-based (line, column) for any
    malformed input: tabs in indentation, indentation off the 4-space grid,
    unknown markers, unbalanced braces, duplicate derivations, duplicate
    context lines, or empty concept names.
    """
    normalized = text.replace("\r\n", "\n")
    digest = hashlib.sha256(normalized.encode("utf-8")).hexdigest()
    root: Optional[ConceptNode] = None
    stack: list[ConceptNode] = []

    for line_no, raw in enumerate(normalized.split("\n"), start=1):
        line = raw.rstrip()
        if not line.strip():
            continue
        if line.lstrip().startswith("#"):
            continue

        indent = 0
        for i, ch in enumerate(line):
            if ch == " ":
                indent += 1
            elif ch == "\t":
                raise _err("tab character in indentation", line_no, i + 1)
            else:
                break
        if indent % INDENT_UNIT != 0:
            raise _err(
                f"indentation of {indent} spaces is not a multiple of {INDENT_UNIT}",
                line_no,
                indent + 1,
            )
        depth = indent // INDENT_UNIT
        content = line[indent:]
        col0 = indent + 1

        if content.startswith("{"):
            sc = _LineScanner(content, line_no, col0)
            name, name_col = sc.scan_braced()
            sc.end("concept declaration")
            if name == LOOP_ELEMENT:
                raise _err(
                    "'*' is reserved for the loop-current element", line_no, name_col
                )
            node = ConceptNode(name=name, line=line_no, column=name_col)
            if depth == 0:
                if root is not None:
                    raise _err(
                        "a plan declares exactly one root concept", line_no, col0
                    )
                root = node
                stack = [node]
                continue
            if depth > len(stack):
                raise _err(
                    f"indentation jumps to depth {depth} with no enclosing concept",
                    line_no,
                    col0,
                )
            del stack[depth:]
            stack[depth - 1].children.append(node)
            stack.append(node)
            continue

        marker = content[:2]
        if marker in ("<-", "<=", "<*"):
            if depth == 0 or not stack:
                raise _err("marker line outside any concept block", line_no, col0)
            if depth > len(stack):
                raise _err(
                    f"indentation jumps to depth {depth} with no enclosing concept",
                    line_no,
                    col0,
                )
            del stack[depth:]
            owner = stack[depth - 1]
            sc = _LineScanner(content[2:], line_no, col0 + 2)
            if marker == "<-":
                if owner.value_line is not None or owner.functional_line is not None:
                    raise _err(
                        f"concept {owner.name!r} already has a derivation",
                        line_no,
                        col0,
                    )
                payload = _parse_value_payload(sc)
                owner.lines.append(
                    ValueLine(payload=payload, line=line_no, column=col0)
                )
            elif marker == "<=":
                if owner.value_line is not None or owner.functional_line is not None:
                    raise _err(
                        f"concept {owner.name!r} already has a derivation",
                        line_no,
                        col0,
                    )
                op, args = _parse_functional_payload(sc)
                owner.lines.append(
                    FunctionalLine(op=op, args=args, line=line_no, column=col0)
                )
            else:
                if owner.context_line is not None:
                    raise _err(
                        f"concept {owner.name!r} already has a context line",
                        line_no,
                        col0,
                    )
                collection = _parse_context_payload(sc)
                owner.lines.append(
                    ContextLine(collection=collection, line=line_no, column=col0)
                )
            continue

        raise _err(f"unknown marker {content.split()[0]!r}", line_no, col0)

    if root is None:
        raise _err("no root concept declared", 1, 1)
    return SourcePlan(root=root, source_digest=digest)


# -- printing -------------------------------------------------------------------


def _render_payload(payload: ValuePayload) -> str:
    if isinstance(payload, TextLit):
        return json.dumps(payload.value, ensure_ascii=False)
    if isinstance(payload, NumberLit):
        return json.dumps(payload.value)
    if isinstance(payload, SignLit):
        return f"sign({json.dumps(payload.uri, ensure_ascii=False)})"
    return "{" + payload.name + "}"


def _print_node(node: ConceptNode, depth: int, out: list[str]) -> None:
    pad = " " * (INDENT_UNIT * depth)
    out.append(f"{pad}{{{node.name}}}")
    inner = " " * (INDENT_UNIT * (depth + 1))
    for ln in node.lines:
        if isinstance(ln, ValueLine):
            out.append(f"{inner}<- {_render_payload(ln.payload)}")
        elif isinstance(ln, FunctionalLine):
            args = ", ".join("{" + a.name + "}" for a in ln.args)
            out.append(f"{inner}<= {ln.op.render()}({args})")
        else:
            out.append(f"{inner}<* {{{ln.collection}}}")
    for child in node.children:
        _print_node(child, depth + 1, out)


def pretty_print(plan: SourcePlan) -> str:
    """Canonical rendering: 4-space indents, LF endings, no trailing blanks.

    ``parse(pretty_print(p))`` is structurally equal to ``p``, and printing
    is a fixed point from the second round onward.
    """
    out: list[str] = []
    _print_node(plan.root, 0, out)
    return "\n".join(out) + "\n"
