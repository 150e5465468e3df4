"""Compile parsed plans into scope-checked, flow-indexed graphs.

The compiler is where the language's one hard promise is enforced: a node's
derivation may consume only concepts declared in its own block (its children),
plus the loop-current element ``*`` when a ``<*`` context is in scope. Every
violation is reported as a diagnostic with the offending source location, so
a reviewer can point at the exact line that would have leaked data across
blocks.

Output artifacts:

* ``CompiledPlan``: nodes keyed by flow index, dependency edges, topo order.
* ``.ncd`` JSON: the plan graph plus a source map (schema ``nc/1``).
* ``.ncn`` prose: a deterministic paragraph-per-node narrative.
* ``PlanBundle``: activation output: inference repo, concept repo, provisions.
"""

from __future__ import annotations

import heapq
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Union

from . import parser as P
from .errors import (
    CompileError,
    Diagnostic,
    MissingProvisionError,
    UnknownFlowIndexError,
)
from .refs import canonical_json_bytes

logger = logging.getLogger(__name__)

SCHEMA = "nc/1"

BUILTIN_OPS = frozenset(
    {"route", "group", "collect", "extract", "load", "save", "wait"}
)

SEMANTIC = "semantic"
SYNTACTIC = "syntactic"


def fi_key(flow_index: str) -> tuple[int, ...]:
    """Sort key for a plain flow index ("1.3.2" -> (1, 3, 2))."""
    return tuple(int(seg) for seg in flow_index.split("."))


# -- compiled model -----------------------------------------------------------


@dataclass
class CompiledNode:
    """One concept in the compiled graph.

    ``derivation`` is a plain dict so it serializes as-is:

    * ``{"kind": "ground", "ground": {"type": "text"|"num"|"sign"|"input", ...}}``
    * ``{"kind": "import", "source": "<fi>" | "*", "loop": "<fi of loop>"}``
    * ``{"kind": "functional", "op": {...}, "inputs": [{"name", "source", "loop"?}]}``
    """

    flow_index: str
    concept_name: str
    derivation: dict
    kind: str
    parent: Optional[str]
    children: tuple[str, ...]
    loop: Optional[dict] = None
    loop_axis: Optional[str] = None
    loop_nest: tuple[str, ...] = ()
    line: int = 0
    column: int = 0

    def to_json(self) -> dict:
        doc = {
            "concept": self.concept_name,
            "derivation": self.derivation,
            "kind": self.kind,
            "parent": self.parent,
            "children": list(self.children),
        }
        if self.loop is not None:
            doc["loop"] = self.loop
            doc["loop_axis"] = self.loop_axis
        if self.loop_nest:
            doc["loop_nest"] = list(self.loop_nest)
        return doc


@dataclass
class CompiledPlan:
    nodes: dict[str, CompiledNode]
    edges: list[tuple[str, str]]
    topo_order: list[str]
    stats: dict[str, int]
    source_digest: str
    root: str = "1"
    _consumers: dict[str, list[str]] = field(default_factory=dict, repr=False)
    _deps: dict[str, list[str]] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        if not self._consumers:
            consumers: dict[str, list[str]] = {fi: [] for fi in self.nodes}
            deps: dict[str, list[str]] = {fi: [] for fi in self.nodes}
            for src, dst in self.edges:
                consumers[src].append(dst)
                deps[dst].append(src)
            self._consumers = {
                fi: sorted(set(v), key=fi_key) for fi, v in consumers.items()
            }
            self._deps = {fi: sorted(set(v), key=fi_key) for fi, v in deps.items()}

    def consumers_of(self, flow_index: str) -> list[str]:
        if flow_index not in self.nodes:
            raise UnknownFlowIndexError(flow_index)
        return self._consumers[flow_index]

    def deps_of(self, flow_index: str) -> list[str]:
        if flow_index not in self.nodes:
            raise UnknownFlowIndexError(flow_index)
        return self._deps[flow_index]

    def inference_repo(self) -> dict:
        return {
            "schema": SCHEMA,
            "root": self.root,
            "nodes": {fi: self.nodes[fi].to_json() for fi in sorted(self.nodes, key=fi_key)},
            "edges": [list(e) for e in sorted(self.edges, key=lambda e: (fi_key(e[0]), fi_key(e[1])))],
            "topo_order": list(self.topo_order),
            "stats": dict(self.stats),
        }

    def concept_repo(self) -> dict:
        concepts = {}
        signs = {}
        for fi in sorted(self.nodes, key=fi_key):
            node = self.nodes[fi]
            entry: dict = {"name": node.concept_name}
            if node.derivation["kind"] == "ground":
                entry["ground"] = node.derivation["ground"]
                if node.derivation["ground"]["type"] == "sign":
                    from .refs import Sign

                    sign = Sign.for_uri(node.derivation["ground"]["uri"])
                    signs[sign.sign_id] = {
                        "uri": sign.uri,
                        "media_type": sign.media_type,
                    }
            if node.loop_axis is not None:
                entry["loop_axis"] = node.loop_axis
            concepts[fi] = entry
        return {"schema": SCHEMA, "concepts": concepts, "signs": signs}


# -- scope resolution ---------------------------------------------------------


class _Scoped:
    """AST node annotated with flow index, parentage, and resolved wiring."""

    __slots__ = (
        "ast",
        "fi",
        "parent",
        "children",
        "by_name",
        "derivation",
        "kind",
        "loop",
        "loop_axis",
        "loop_nest",
    )

    def __init__(self, ast: P.ConceptNode, fi: str, parent: Optional["_Scoped"]):
        self.ast = ast
        self.fi = fi
        self.parent = parent
        self.children: list[_Scoped] = []
        self.by_name: dict[str, _Scoped] = {}
        self.derivation: dict = {}
        self.kind = SYNTACTIC
        self.loop: Optional[dict] = None
        self.loop_axis: Optional[str] = None
        self.loop_nest: tuple[str, ...] = ()

    def ancestors(self) -> Iterable["_Scoped"]:
        node = self.parent
        while node is not None:
            yield node
            node = node.parent

    def is_ancestor_of(self, other: "_Scoped") -> bool:
        return any(a is self for a in other.ancestors())


def _build_tree(
    ast: P.ConceptNode,
    fi: str,
    parent: Optional[_Scoped],
    index: dict[str, _Scoped],
    diags: list[Diagnostic],
) -> _Scoped:
    node = _Scoped(ast, fi, parent)
    index[fi] = node
    for k, child_ast in enumerate(ast.children, start=1):
        child = _build_tree(child_ast, f"{fi}.{k}", node, index, diags)
        node.children.append(child)
        if child_ast.name in node.by_name:
            diags.append(
                Diagnostic(
                    code="duplicate_name",
                    message=f"concept {child_ast.name!r} declared twice in one block",
                    line=child_ast.line,
                    column=child_ast.column,
                    concept=child_ast.name,
                    flow_index=child.fi,
                )
            )
        else:
            node.by_name[child_ast.name] = child
    return node


def _nearest_loop(node: _Scoped, include_self: bool) -> Optional[_Scoped]:
    """The loop whose current element ``*`` denotes at this node.

    A loop's element does not exist inside that loop's own collection
    subtree (the collection is computed before iteration starts), so the
    walk skips such loops and keeps climbing.
    """
    if include_self and node.ast.context_line is not None:
        return node
    prev = node
    for anc in node.ancestors():
        if anc.ast.context_line is not None:
            coll = anc.by_name.get(anc.ast.context_line.collection)
            if coll is not prev:
                return anc
        prev = anc
    return None


_AMBIGUOUS = object()


def _resolve_import(node: _Scoped, src: str):
    """Find the declaration an import pulls in.

    Search order: nearest enclosing scope first; within a scope, the whole
    subtree minus the branch the walk came from, shallowest depth first.
    Ancestors themselves are never sources (an ancestor completes only
    after its block does, so importing one is always circular). Two
    matches at the same depth of the same scope are ambiguous.

    Returns the source node, None, or the ``_AMBIGUOUS`` marker.
    """
    came_from = node
    scope = node.parent
    while scope is not None:
        frontier = [c for c in scope.children if c is not came_from]
        while frontier:
            matches = [c for c in frontier if c.ast.name == src]
            if len(matches) > 1:
                return _AMBIGUOUS
            if matches:
                return matches[0]
            frontier = [g for c in frontier for g in c.children]
        came_from = scope
        scope = scope.parent
    return None


def _scope_error(msg: str, line: int, col: int, concept: str, fi: str) -> Diagnostic:
    return Diagnostic(
        code="scope_error",
        message=msg,
        line=line,
        column=col,
        concept=concept,
        flow_index=fi,
    )


def _resolve_node(node: _Scoped, diags: list[Diagnostic]) -> None:
    ast = node.ast
    vline = ast.value_line
    fline = ast.functional_line
    cline = ast.context_line

    if cline is not None:
        coll = node.by_name.get(cline.collection)
        if cline.collection == P.LOOP_ELEMENT or coll is None:
            diags.append(
                _scope_error(
                    f"loop collection {cline.collection!r} is not declared in "
                    f"the block of {ast.name!r}",
                    cline.line,
                    cline.column,
                    cline.collection,
                    node.fi,
                )
            )
        else:
            node.loop_axis = cline.collection
            node.loop = {
                "collection": coll.fi,
                "axis": cline.collection,
                "body": [],
                "invariant": [],
            }
        if fline is None:
            diags.append(
                Diagnostic(
                    code="underived_concept",
                    message=(
                        f"loop concept {ast.name!r} needs a functional "
                        "derivation to produce each iteration's value"
                    ),
                    line=cline.line,
                    column=cline.column,
                    concept=ast.name,
                    flow_index=node.fi,
                )
            )

    if vline is not None:
        payload = vline.payload
        if isinstance(payload, P.ImportRef):
            if payload.name == P.LOOP_ELEMENT:
                loop = _nearest_loop(node, include_self=False)
                if loop is None:
                    diags.append(
                        _scope_error(
                            "loop element '*' imported outside any loop",
                            vline.line,
                            vline.column,
                            P.LOOP_ELEMENT,
                            node.fi,
                        )
                    )
                else:
                    node.derivation = {
                        "kind": "import",
                        "source": "*",
                        "loop": loop.fi,
                    }
            else:
                src = _resolve_import(node, payload.name)
                if src is None:
                    diags.append(
                        _scope_error(
                            f"cannot import {payload.name!r}: no enclosing "
                            "block declares it",
                            vline.line,
                            vline.column,
                            payload.name,
                            node.fi,
                        )
                    )
                elif src is _AMBIGUOUS:
                    diags.append(
                        _scope_error(
                            f"ambiguous import: {payload.name!r} is declared "
                            "more than once at the same depth of the nearest "
                            "enclosing scope",
                            vline.line,
                            vline.column,
                            payload.name,
                            node.fi,
                        )
                    )
                else:
                    node.derivation = {"kind": "import", "source": src.fi}
        elif isinstance(payload, P.TextLit):
            node.derivation = {
                "kind": "ground",
                "ground": {"type": "text", "value": payload.value},
            }
        elif isinstance(payload, P.NumberLit):
            node.derivation = {
                "kind": "ground",
                "ground": {"type": "num", "value": payload.value},
            }
        else:
            node.derivation = {
                "kind": "ground",
                "ground": {"type": "sign", "uri": payload.uri},
            }
    elif fline is not None:
        inputs = []
        for arg in fline.args:
            if arg.name == P.LOOP_ELEMENT:
                loop = _nearest_loop(node, include_self=True)
                if loop is None:
                    diags.append(
                        _scope_error(
                            "loop element '*' referenced outside any loop",
                            arg.line,
                            arg.column,
                            P.LOOP_ELEMENT,
                            node.fi,
                        )
                    )
                    continue
                inputs.append({"name": "*", "source": "*", "loop": loop.fi})
                continue
            child = node.by_name.get(arg.name)
            if child is None:
                diags.append(
                    _scope_error(
                        f"{ast.name!r} references {arg.name!r}, which is not "
                        "declared in its block; add a child or an explicit "
                        "<- {" + arg.name + "} import",
                        arg.line,
                        arg.column,
                        arg.name,
                        node.fi,
                    )
                )
                continue
            inputs.append({"name": arg.name, "source": child.fi})
        op: dict
        if fline.op.is_instruction:
            op = {"type": "instruction", "text": fline.op.instruction}
            node.kind = SEMANTIC
        else:
            ident = fline.op.ident or ""
            op = {"type": "builtin", "name": ident}
            if ident not in BUILTIN_OPS:
                diags.append(
                    Diagnostic(
                        code="unknown_operator",
                        message=f"unknown operator {ident!r}; built-ins are "
                        + ", ".join(sorted(BUILTIN_OPS)),
                        line=fline.line,
                        column=fline.column,
                        concept=ast.name,
                        flow_index=node.fi,
                    )
                )
        node.derivation = {"kind": "functional", "op": op, "inputs": inputs}
    else:
        if node.children:
            diags.append(
                Diagnostic(
                    code="underived_concept",
                    message=f"concept {ast.name!r} has children but no "
                    "derivation ('<-' or '<=')",
                    line=ast.line,
                    column=ast.column,
                    concept=ast.name,
                    flow_index=node.fi,
                )
            )
            node.derivation = {"kind": "ground", "ground": {"type": "input"}}
        else:
            node.derivation = {"kind": "ground", "ground": {"type": "input"}}

    for child in node.children:
        _resolve_node(child, diags)


def _collect_edges(index: dict[str, _Scoped]) -> list[tuple[str, str]]:
    edges: set[tuple[str, str]] = set()
    for fi, node in index.items():
        der = node.derivation
        if der.get("kind") == "import":
            if der["source"] == "*":
                loop = index[der["loop"]]
                if loop.loop is not None:
                    edges.add((loop.loop["collection"], fi))
            else:
                edges.add((der["source"], fi))
        elif der.get("kind") == "functional":
            for inp in der["inputs"]:
                if inp["source"] == "*":
                    loop = index[inp["loop"]]
                    if loop.loop is not None:
                        edges.add((loop.loop["collection"], fi))
                else:
                    edges.add((inp["source"], fi))
        if node.loop is not None:
            edges.add((node.loop["collection"], fi))
    return sorted(edges, key=lambda e: (fi_key(e[0]), fi_key(e[1])))


def _element_refs(node: _Scoped) -> list[str]:
    """Loop flow indexes this node's own lines bind '*' against."""
    refs = []
    der = node.derivation
    if der.get("kind") == "import" and der.get("source") == "*":
        refs.append(der["loop"])
    elif der.get("kind") == "functional":
        for inp in der["inputs"]:
            if inp["source"] == "*":
                refs.append(inp["loop"])
    return refs


def _analyze_loops(
    index: dict[str, _Scoped],
    edges: list[tuple[str, str]],
    diags: list[Diagnostic],
) -> None:
    """Split each loop block into per-iteration body and run-once invariants.

    A direct child subtree belongs to the body when anything inside it
    consumes the loop-current element, directly or through dependencies.
    The element may not reach outside: importing a body-resident concept
    from beyond the loop has no well-defined iteration to bind to.
    """
    consumers: dict[str, set[str]] = {fi: set() for fi in index}
    for src, dst in edges:
        consumers[src].add(dst)

    loops = [n for n in index.values() if n.loop is not None]
    dependent: dict[str, set[str]] = {}

    for loop in loops:
        subtree = {
            fi for fi, n in index.items() if loop.is_ancestor_of(n)
        }
        seeds = {
            fi
            for fi in subtree
            if loop.fi in _element_refs(index[fi])
        }
        dep = set(seeds)
        frontier = list(seeds)
        while frontier:
            cur = frontier.pop()
            nxt = []
            parent = index[cur].parent
            if parent is not None and parent.fi in subtree:
                nxt.append(parent.fi)
            nxt.extend(c for c in consumers[cur] if c in subtree)
            for fi in nxt:
                if fi not in dep:
                    dep.add(fi)
                    frontier.append(fi)
        dependent[loop.fi] = dep

        coll_fi = loop.loop["collection"]
        coll_subtree = {coll_fi} | {
            fi for fi, n in index.items() if index[coll_fi].is_ancestor_of(n)
        }
        if dep & coll_subtree:
            cl = loop.ast.context_line
            diags.append(
                _scope_error(
                    f"loop collection {loop.loop['axis']!r} cannot depend on "
                    "the loop element",
                    cl.line if cl else loop.ast.line,
                    cl.column if cl else loop.ast.column,
                    loop.loop["axis"],
                    loop.fi,
                )
            )
        for child in loop.children:
            if child.fi == coll_fi:
                continue
            if child.fi in dep:
                loop.loop["body"].append(child.fi)
            else:
                loop.loop["invariant"].append(child.fi)

    # Element-dependent nodes may not be imported from outside their loop.
    for fi, node in index.items():
        der = node.derivation
        if der.get("kind") != "import" or der.get("source") in (None, "*"):
            continue
        src_fi = der["source"]
        for loop in loops:
            if src_fi in dependent[loop.fi] and fi not in dependent[loop.fi]:
                vline = node.ast.value_line
                diags.append(
                    _scope_error(
                        f"cannot import {index[src_fi].ast.name!r}: it lives "
                        f"inside the loop body of "
                        f"{loop.ast.name!r} and has no value outside an "
                        "iteration",
                        vline.line if vline else node.ast.line,
                        vline.column if vline else node.ast.column,
                        index[src_fi].ast.name,
                        fi,
                    )
                )

    # Record, outermost first, the loops each node iterates under.
    for fi, node in index.items():
        nest = []
        chain = [*reversed(list(node.ancestors())), node]
        for anc in chain:
            if anc.loop is not None and fi in dependent.get(anc.fi, set()) and anc.fi != fi:
                nest.append(anc.fi)
        node.loop_nest = tuple(nest)


def _toposort(
    index: dict[str, _Scoped],
    edges: list[tuple[str, str]],
    diags: list[Diagnostic],
) -> list[str]:
    indeg = {fi: 0 for fi in index}
    out: dict[str, list[str]] = {fi: [] for fi in index}
    for src, dst in edges:
        indeg[dst] += 1
        out[src].append(dst)
    heap = [fi_key(fi) for fi, d in indeg.items() if d == 0]
    heapq.heapify(heap)
    order: list[str] = []
    while heap:
        fi = ".".join(str(s) for s in heapq.heappop(heap))
        order.append(fi)
        for nxt in out[fi]:
            indeg[nxt] -= 1
            if indeg[nxt] == 0:
                heapq.heappush(heap, fi_key(nxt))
    if len(order) != len(index):
        stuck = sorted((fi for fi, d in indeg.items() if d > 0), key=fi_key)
        first = index[stuck[0]]
        diags.append(
            Diagnostic(
                code="cycle",
                message="circular dependency through "
                + ", ".join(stuck[:8]),
                line=first.ast.line,
                column=first.ast.column,
                concept=first.ast.name,
                flow_index=first.fi,
            )
        )
    return order


# -- public API ----------------------------------------------------------------


def compile_plan(source: Union[str, P.SourcePlan]) -> CompiledPlan:
    """Compile plan text (or a parsed plan) to a :class:`CompiledPlan`.

    Raises :class:`CompileError` carrying every diagnostic found, sorted by
    source position; scope violations use code ``scope_error``.
    """
    plan = P.parse(source) if isinstance(source, str) else source
    diags: list[Diagnostic] = []
    index: dict[str, _Scoped] = {}
    root = _build_tree(plan.root, "1", None, index, diags)
    _resolve_node(root, diags)
    edges = _collect_edges(index)
    _analyze_loops(index, edges, diags)
    order = _toposort(index, edges, diags)
    if diags:
        diags.sort(key=lambda d: (d.line, d.column))
        raise CompileError(diags)

    nodes = {}
    semantic = 0
    for fi, sn in index.items():
        if sn.kind == SEMANTIC:
            semantic += 1
        nodes[fi] = CompiledNode(
            flow_index=fi,
            concept_name=sn.ast.name,
            derivation=sn.derivation,
            kind=sn.kind,
            parent=sn.parent.fi if sn.parent else None,
            children=tuple(c.fi for c in sn.children),
            loop=sn.loop,
            loop_axis=sn.loop_axis,
            loop_nest=sn.loop_nest,
            line=sn.ast.line,
            column=sn.ast.column,
        )
    stats = {
        "semantic_count": semantic,
        "syntactic_count": len(nodes) - semantic,
    }
    compiled = CompiledPlan(
        nodes=nodes,
        edges=edges,
        topo_order=order,
        stats=stats,
        source_digest=plan.source_digest,
    )
    logger.debug(
        "compiled %d nodes (%d semantic)", len(nodes), semantic
    )
    return compiled


def dependency_closure(plan: CompiledPlan, flow_index: str) -> set[str]:
    """All nodes transitively downstream of ``flow_index`` (excluded itself)."""
    if flow_index not in plan.nodes:
        raise UnknownFlowIndexError(flow_index)
    seen: set[str] = set()
    frontier = [flow_index]
    while frontier:
        cur = frontier.pop()
        for nxt in plan.consumers_of(cur):
            if nxt not in seen:
                seen.add(nxt)
                frontier.append(nxt)
    seen.discard(flow_index)
    return seen


# -- narrative -----------------------------------------------------------------


def _quote(name: str) -> str:
    return f'"{name}"'


def _input_phrase(inputs: list[dict]) -> str:
    names = []
    for inp in inputs:
        if inp["source"] == "*":
            names.append("the loop element")
        else:
            names.append(_quote(inp["name"]))
    if not names:
        return "no inputs"
    if len(names) == 1:
        return names[0]
    return ", ".join(names[:-1]) + " and " + names[-1]


def generate_narrative(plan: CompiledPlan) -> str:
    """Render the plan as prose, one paragraph per node, reading order.

    The rendering is a pure function of the compiled plan: equal plans give
    byte-identical narratives, and each flow index leads exactly one
    paragraph ("Step <fi> — ...").
    """
    paragraphs = []
    for fi in sorted(plan.nodes, key=fi_key):
        node = plan.nodes[fi]
        name = _quote(node.concept_name)
        der = node.derivation
        if der["kind"] == "ground":
            g = der["ground"]
            if g["type"] == "text":
                body = f"{name} is given directly as {json.dumps(g['value'], ensure_ascii=False)}."
            elif g["type"] == "num":
                body = f"{name} is given directly as {json.dumps(g['value'])}."
            elif g["type"] == "sign":
                body = (
                    f"{name} points at {json.dumps(g['uri'], ensure_ascii=False)}, "
                    "loaded only when an agent needs its content."
                )
            else:
                body = f"{name} is supplied as a run input."
        elif der["kind"] == "import":
            if der["source"] == "*":
                body = f"{name} brings the loop-current element into this block."
            else:
                src = plan.nodes[der["source"]].concept_name
                body = f"{name} brings {_quote(src)} in from an enclosing block."
        else:
            op = der["op"]
            inputs = _input_phrase(der["inputs"])
            if op["type"] == "builtin":
                body = f"{name} is computed by the built-in {op['name']} from {inputs}."
            else:
                body = (
                    f"{name} is produced by an agent instructed to "
                    f"{json.dumps(op['text'], ensure_ascii=False)}, working from {inputs}."
                )
        if node.loop is not None:
            coll = plan.nodes[node.loop["collection"]].concept_name
            body += (
                f" This step repeats once per element of {_quote(coll)}, "
                f"stacking results along the {_quote(node.loop['axis'])} axis."
            )
        paragraphs.append(f"Step {fi} — {body}")
    return "\n\n".join(paragraphs) + "\n"


# -- activation ------------------------------------------------------------------


@dataclass
class PlanBundle:
    """Activation output: everything a run needs, ready to serialize."""

    inference_repo: dict
    concept_repo: dict
    provisions: dict

    def to_json(self) -> dict:
        return {
            "schema": SCHEMA,
            "inference_repo": self.inference_repo,
            "concept_repo": self.concept_repo,
            "provisions": self.provisions,
        }

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PlanBundle):
            return NotImplemented
        return canonical_json_bytes(self.to_json()) == canonical_json_bytes(
            other.to_json()
        )

    def save(self, directory: Union[str, Path]) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for fname, doc in (
            ("inference_repo.json", self.inference_repo),
            ("concept_repo.json", self.concept_repo),
            ("provisions.json", self.provisions),
        ):
            (directory / fname).write_bytes(canonical_json_bytes(doc) + b"\n")

    @classmethod
    def load(cls, directory: Union[str, Path]) -> "PlanBundle":
        directory = Path(directory)
        ir = json.loads((directory / "inference_repo.json").read_text("utf-8"))
        cr = json.loads((directory / "concept_repo.json").read_text("utf-8"))
        pv_path = directory / "provisions.json"
        pv = json.loads(pv_path.read_text("utf-8")) if pv_path.exists() else {}
        return cls(inference_repo=ir, concept_repo=cr, provisions=pv)

    @classmethod
    def from_json(cls, doc: dict) -> "PlanBundle":
        return cls(
            inference_repo=doc["inference_repo"],
            concept_repo=doc["concept_repo"],
            provisions=doc.get("provisions", {}),
        )


PROVISION_SCHEME = "prov://"


def provision_references(plan: CompiledPlan) -> set[str]:
    """Provision names demanded by ground signs with ``prov://`` URIs."""
    wanted = set()
    for node in plan.nodes.values():
        der = node.derivation
        if der["kind"] == "ground" and der["ground"]["type"] == "sign":
            uri = der["ground"]["uri"]
            if uri.startswith(PROVISION_SCHEME):
                wanted.add(uri[len(PROVISION_SCHEME):])
    return wanted


def activate(plan: CompiledPlan, provisions: Optional[dict] = None) -> PlanBundle:
    """Bind provisions and serialize the plan into an executable bundle."""
    provisions = dict(provisions or {})
    for name in sorted(provision_references(plan)):
        if name not in provisions:
            raise MissingProvisionError(name)
    return PlanBundle(
        inference_repo=plan.inference_repo(),
        concept_repo=plan.concept_repo(),
        provisions=provisions,
    )


def plan_from_bundle(bundle: PlanBundle) -> CompiledPlan:
    """Rebuild a CompiledPlan from a serialized inference repo."""
    ir = bundle.inference_repo
    nodes = {}
    for fi, doc in ir["nodes"].items():
        nodes[fi] = CompiledNode(
            flow_index=fi,
            concept_name=doc["concept"],
            derivation=doc["derivation"],
            kind=doc["kind"],
            parent=doc["parent"],
            children=tuple(doc["children"]),
            loop=doc.get("loop"),
            loop_axis=doc.get("loop_axis"),
            loop_nest=tuple(doc.get("loop_nest", ())),
        )
    return CompiledPlan(
        nodes=nodes,
        edges=[tuple(e) for e in ir["edges"]],
        topo_order=list(ir["topo_order"]),
        stats=dict(ir["stats"]),
        source_digest="",
    )


def ncd_document(plan: CompiledPlan) -> dict:
    """The ``.ncd`` JSON: activation repos plus the source map."""
    return {
        "schema": SCHEMA,
        "inference_repo": plan.inference_repo(),
        "concept_repo": plan.concept_repo(),
        "source_map": {
            fi: [plan.nodes[fi].line, plan.nodes[fi].column]
            for fi in sorted(plan.nodes, key=fi_key)
        },
        "source_digest": plan.source_digest,
    }
