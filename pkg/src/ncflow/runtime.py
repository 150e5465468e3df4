"""Dependency-driven execution of activated plans.

A run materializes the compiled template into an instance graph: template
nodes outside any loop appear once, loop bodies appear once per collection
element with ``[i=N]`` suffixes on their flow indices, and a loop node
completes by stacking its per-iteration results along the collection-named
axis.

Scheduling is Waitlist + Blackboard: the waitlist holds Ready instances in
ascending flow-index order, the blackboard tracks every instance's status.
Each completion retains a checkpoint, so any finished prefix of a run can
be forked or revised later without re-executing upstream work.
"""

from __future__ import annotations

import heapq
import logging
import re
import time
import uuid
from dataclasses import dataclass, field
from typing import Optional

from .agents import (
    AgentRequest,
    AgentSetup,
    DEFAULT_PROMPT_TEMPLATE,
    input_digest as compute_input_digest,
    instruction_digest as compute_instruction_digest,
    match_agent,
)
from .agents import render_prompt as render_agent_prompt
from .compiler import CompiledPlan, PlanBundle, fi_key, plan_from_bundle
from .errors import (
    AgentError,
    DuplicateAxisError,
    IndexOutOfRangeError,
    MissingGroundInputError,
    MissingLoopAxisError,
    NotFoundError,
    OperatorError,
    SchedulerInvariantError,
    ShapeMismatchError,
    UncoveredSemanticNodeError,
    UnknownAxisError,
    UnresolvableSignError,
)
from .events import (
    CHECKPOINT_RETAINED,
    RUN_FINISHED,
    STATUS_CHANGED,
    TRACE_APPENDED,
    RunEvent,
    fold_events,
)
from .refs import Reference, Resolver, Sign, scalar, stack, transmute
from .store import CaseStore

logger = logging.getLogger(__name__)

EXECUTION_FAULTS = (
    AgentError,
    OperatorError,
    UnresolvableSignError,
    MissingLoopAxisError,
    ShapeMismatchError,
    DuplicateAxisError,
    UnknownAxisError,
    IndexOutOfRangeError,
    UncoveredSemanticNodeError,
)


class Status:
    PENDING = "Pending"
    READY = "Ready"
    RUNNING = "Running"
    COMPLETED = "Completed"
    FAILED = "Failed"
    STALE = "Stale"
    PAUSED = "PausedAtBreakpoint"


_SUFFIX_RE = re.compile(r"\[i=(\d+)\]")


def instance_id(template: str, suffix: tuple[int, ...]) -> str:
    return template + "".join(f"[i={k}]" for k in suffix)


def split_instance_id(iid: str) -> tuple[str, tuple[int, ...]]:
    head = iid.split("[", 1)[0]
    return head, tuple(int(m) for m in _SUFFIX_RE.findall(iid))


def instance_key(iid: str) -> tuple:
    """Waitlist order: flow-index segments first, iteration ordinals second."""
    template, suffix = split_instance_id(iid)
    return (fi_key(template), suffix)


@dataclass
class Instance:
    """One schedulable node: a template node under concrete iteration ordinals."""

    iid: str
    template: str
    suffix: tuple[int, ...]
    role: str  # "node" | "loop_iter"
    deps: list[str] = field(default_factory=list)
    # (collection iid, ordinal) when the derivation consumes a loop element
    element: Optional[tuple[str, int]] = None
    # (input name, source iid) pairs, in declared order; name "*" is the element
    input_sources: list[tuple[str, str]] = field(default_factory=list)


class Run:
    """A single run: instance graph, blackboard, waitlist, and event sinks."""

    def __init__(
        self,
        store: CaseStore,
        run_id: str,
        bundle: PlanBundle,
        agents: Optional[AgentSetup] = None,
        inputs: Optional[dict[str, Reference]] = None,
        breakpoints: Optional[set[str]] = None,
        recording: bool = True,
    ):
        self.store = store
        self.run_id = run_id
        self.bundle = bundle
        self.plan: CompiledPlan = plan_from_bundle(bundle)
        self.agents = agents or AgentSetup()
        self.inputs = dict(inputs or {})
        self.breakpoints = set(breakpoints or ())
        self.cleared_breakpoints: set[str] = set()
        # recording=False builds in-memory state only (probes, reconstruction)
        self.recording = recording

        self.instances: dict[str, Instance] = {}
        self.consumers: dict[str, list[str]] = {}
        self.blackboard: dict[str, str] = {}
        self.values: dict[str, Reference] = {}
        self.env_snapshot: dict[str, str] = {}
        self._env_flushed: dict[str, str] = {}
        self._waitlist: list[tuple] = []
        self._event_seq = 0
        self._ckpt_seq = 0
        self._orch_seq = 0
        self._finished = False
        # collection iid -> loop-node iids waiting on that collection
        self._expansions: dict[str, list[str]] = {}
        self._expanded: set[str] = set()

        self.resolver = Resolver(provisions=bundle.provisions, base_dir=store.root)
        self.prompt_template = bundle.provisions.get(
            "prompt_template", DEFAULT_PROMPT_TEMPLATE
        )

    # -- instance graph ----------------------------------------------------

    def _loops_of(self, template: str, role: str) -> tuple[str, ...]:
        nest = self.plan.nodes[template].loop_nest
        if role == "loop_iter":
            return nest + (template,)
        return nest

    def _project(self, src: str, suffix: tuple[int, ...], loops: tuple[str, ...]) -> str:
        """Map a template edge to the instance of ``src`` this suffix selects."""
        src_loops = self.plan.nodes[src].loop_nest
        taken = tuple(s for s, loop_fi in zip(suffix, loops) if loop_fi in src_loops)
        return instance_id(src, taken)

    def _add_instance(self, template: str, suffix: tuple[int, ...], role: str) -> Instance:
        iid = instance_id(template, suffix)
        if iid in self.instances:
            return self.instances[iid]
        node = self.plan.nodes[template]
        loops = self._loops_of(template, role)
        inst = Instance(iid=iid, template=template, suffix=suffix, role=role)

        der = node.derivation
        deps: list[str] = []
        if role == "node" and node.loop is not None:
            coll_iid = self._project(node.loop["collection"], suffix, loops)
            deps.append(coll_iid)
            self._expansions.setdefault(coll_iid, []).append(iid)
        elif der["kind"] == "import":
            if der["source"] == "*":
                loop_fi = der["loop"]
                coll = self.plan.nodes[loop_fi].loop["collection"]
                coll_iid = self._project(coll, suffix, loops)
                inst.element = (coll_iid, suffix[loops.index(loop_fi)])
                deps.append(coll_iid)
            else:
                deps.append(self._project(der["source"], suffix, loops))
        elif der["kind"] == "functional":
            for inp in der["inputs"]:
                if inp["source"] == "*":
                    loop_fi = inp["loop"]
                    coll = self.plan.nodes[loop_fi].loop["collection"]
                    coll_iid = self._project(coll, suffix, loops)
                    inst.element = (coll_iid, suffix[loops.index(loop_fi)])
                    inst.input_sources.append(("*", coll_iid))
                    deps.append(coll_iid)
                else:
                    src_iid = self._project(inp["source"], suffix, loops)
                    inst.input_sources.append((inp["name"], src_iid))
                    deps.append(src_iid)

        seen: set[str] = set()
        inst.deps = [d for d in deps if not (d in seen or seen.add(d))]
        self.instances[iid] = inst
        self.blackboard[iid] = Status.PENDING
        self.consumers.setdefault(iid, [])
        for dep in inst.deps:
            self.consumers.setdefault(dep, []).append(iid)
        return inst

    def _instantiate_static(self) -> None:
        for fi in sorted(self.plan.nodes, key=fi_key):
            if not self.plan.nodes[fi].loop_nest:
                self._add_instance(fi, (), "node")

    def _expand(self, loop_iid: str, collection: Reference) -> None:
        """Create one iteration of body instances per collection element."""
        if loop_iid in self._expanded:
            return
        template, suffix = split_instance_id(loop_iid)
        node = self.plan.nodes[template]
        axis = node.loop["axis"]
        if axis not in collection.axis_names:
            raise MissingLoopAxisError(axis, loop_iid)
        self._expanded.add(loop_iid)
        length = collection.axis_length(axis)
        body_nest = node.loop_nest + (template,)
        members = [
            fi
            for fi in sorted(self.plan.nodes, key=fi_key)
            if self.plan.nodes[fi].loop_nest == body_nest
        ]
        loop_inst = self.instances[loop_iid]
        created: list[Instance] = []
        for k in range(length):
            for fi in members:
                created.append(self._add_instance(fi, suffix + (k,), "node"))
            it = self._add_instance(template, suffix + (k,), "loop_iter")
            created.append(it)
            loop_inst.deps.append(it.iid)
            self.consumers.setdefault(it.iid, []).append(loop_iid)
        self._orch(
            "expanded",
            loop_iid,
            iterations=length,
            instances=[inst.iid for inst in created],
        )
        for inst in created:
            self._emit_status(inst.iid, Status.PENDING)
        self._settle_grounds(created)
        for inst in created:
            self._maybe_ready(inst.iid)

    def _drop_expansion(self, loop_iid: str) -> None:
        """Forget a loop's iteration instances (its collection was overridden)."""
        if loop_iid not in self._expanded:
            return
        self._expanded.discard(loop_iid)
        lt, ls = split_instance_id(loop_iid)
        drop = []
        for iid, inst in self.instances.items():
            inside = lt in self.plan.nodes[inst.template].loop_nest or (
                inst.template == lt and inst.role == "loop_iter"
            )
            if inside and inst.suffix[: len(ls)] == ls:
                drop.append(iid)
        for iid in drop:
            inst = self.instances.pop(iid)
            self.blackboard.pop(iid, None)
            self.values.pop(iid, None)
            self.consumers.pop(iid, None)
            self._expanded.discard(iid)
            self._expansions.pop(iid, None)
            for dep in inst.deps:
                if dep in self.consumers and iid in self.consumers[dep]:
                    self.consumers[dep].remove(iid)
        dropped = set(drop)
        loop_inst = self.instances[loop_iid]
        loop_inst.deps = [d for d in loop_inst.deps if d not in dropped]

    # -- status and bookkeeping ---------------------------------------------

    def _emit_status(self, iid: str, status: str) -> None:
        self.blackboard[iid] = status
        if not self.recording:
            return
        self._event_seq += 1
        self.store.append_event(
            RunEvent(
                run_id=self.run_id,
                seq=self._event_seq,
                kind=STATUS_CHANGED,
                payload={"node": iid, "status": status},
            )
        )

    def _emit_event(self, kind: str, payload: dict) -> None:
        if not self.recording:
            return
        self._event_seq += 1
        self.store.append_event(
            RunEvent(run_id=self.run_id, seq=self._event_seq, kind=kind, payload=payload)
        )

    def _orch(self, event: str, iid: str, **extra) -> None:
        if not self.recording:
            return
        self._orch_seq += 1
        self.store.append_trace(
            self.run_id,
            "orch",
            {"seq": self._orch_seq, "event": event, "node": iid, **extra},
        )

    def _retain(self, iid: str, ref: Reference) -> None:
        if not self.recording:
            return
        digest = self.store.tensors.put(ref)
        self._ckpt_seq += 1
        env_delta = {
            k: v
            for k, v in self.env_snapshot.items()
            if self._env_flushed.get(k) != v
        }
        self._env_flushed.update(env_delta)
        self.store.retain(
            run_id=self.run_id,
            seq=self._ckpt_seq,
            flow_index=iid,
            blackboard=dict(self.blackboard),
            c_delta={iid: digest},
            env_delta=env_delta,
        )
        self._emit_event(CHECKPOINT_RETAINED, {"node": iid, "seq": self._ckpt_seq})
        self.store.append_trace(
            self.run_id,
            "data",
            {
                "seq": self._ckpt_seq,
                "node": iid,
                "digest": digest,
                "axes": [[n, l] for n, l in ref.axes],
            },
        )

    def _maybe_ready(self, iid: str) -> None:
        if self.blackboard.get(iid) not in (Status.PENDING, Status.STALE):
            return
        inst = self.instances[iid]
        if (
            inst.role == "node"
            and self.plan.nodes[inst.template].loop is not None
            and iid not in self._expanded
        ):
            coll_iid = inst.deps[0]
            if self.blackboard.get(coll_iid) != Status.COMPLETED:
                return
            try:
                self._expand(iid, self.values[coll_iid])
            except MissingLoopAxisError as exc:
                self._emit_status(iid, Status.FAILED)
                self._orch("failed", iid, error=str(exc))
                return
        if all(self.blackboard.get(d) == Status.COMPLETED for d in inst.deps):
            self._emit_status(iid, Status.READY)
            heapq.heappush(self._waitlist, (instance_key(iid), iid))
            self._orch("ready", iid)

    def _promote_consumers(self, iid: str) -> None:
        for consumer in list(self.consumers.get(iid, ())):
            self._maybe_ready(consumer)

    def _settle_grounds(self, instances: list[Instance]) -> None:
        """Grounds carry their value from the start: complete them in place."""
        for inst in sorted(instances, key=lambda i: instance_key(i.iid)):
            node = self.plan.nodes[inst.template]
            if inst.role != "node" or node.derivation["kind"] != "ground":
                continue
            if self.blackboard.get(inst.iid) == Status.COMPLETED:
                continue
            ground = node.derivation["ground"]
            if ground["type"] in ("text", "num"):
                value = scalar(ground["value"])
            elif ground["type"] == "sign":
                value = scalar(Sign.for_uri(ground["uri"]))
            else:
                value = self.inputs[node.concept_name]
            self.values[inst.iid] = value
            self._emit_status(inst.iid, Status.COMPLETED)
            self._retain(inst.iid, value)

    # -- input assembly ------------------------------------------------------

    def assemble_inputs(self, iid: str) -> dict[str, Reference]:
        """Exactly the declared inputs, nothing else (the runtime scope rule)."""
        inst = self.instances[iid]
        assembled: dict[str, Reference] = {}
        for name, src_iid in inst.input_sources:
            if self.blackboard.get(src_iid) != Status.COMPLETED:
                raise SchedulerInvariantError(
                    f"{iid} dispatched before input {src_iid} completed"
                )
            if name == "*":
                coll_iid, ordinal = inst.element
                axis = self.plan.nodes[self._element_loop(inst)].loop["axis"]
                assembled["*"] = self.values[coll_iid].slice(axis, ordinal)
            else:
                assembled[name] = self.values[src_iid]
        return assembled

    def _element_loop(self, inst: Instance) -> str:
        der = self.plan.nodes[inst.template].derivation
        if der["kind"] == "import":
            return der["loop"]
        for inp in der["inputs"]:
            if inp["source"] == "*":
                return inp["loop"]
        raise SchedulerInvariantError(f"{inst.iid} has no element binding")

    # -- execution -------------------------------------------------------------

    def _execute_instance(self, iid: str) -> Reference:
        inst = self.instances[iid]
        node = self.plan.nodes[inst.template]
        der = node.derivation

        if inst.role == "node" and node.loop is not None:
            # deps[0] is the collection; the rest are the loop_iter results
            parts = [self.values[i] for i in inst.deps[1:]]
            return stack(parts, node.loop["axis"])

        if der["kind"] == "import":
            if inst.element is not None:
                coll_iid, ordinal = inst.element
                axis = self.plan.nodes[der["loop"]].loop["axis"]
                return self.values[coll_iid].slice(axis, ordinal)
            return self.values[inst.deps[0]]

        inputs = self.assemble_inputs(iid)
        if node.kind == "semantic":
            return self._execute_semantic(iid, der["op"]["text"], inputs)
        return self._execute_syntactic(iid, der["op"]["name"], inputs)

    def _execute_syntactic(
        self, iid: str, op: str, inputs: dict[str, Reference]
    ) -> Reference:
        from . import operators

        return operators.execute(
            op,
            list(inputs.items()),
            outputs_dir=self.store.outputs_dir(self.run_id),
        )

    def _execute_semantic(
        self, iid: str, instruction: str, inputs: dict[str, Reference]
    ) -> Reference:
        inst = self.instances[iid]
        instr_digest = compute_instruction_digest(instruction)
        in_digest = compute_input_digest(inputs)
        transmuted = {
            name: self._transmute_reference(ref) for name, ref in inputs.items()
        }
        prompt = render_agent_prompt(instruction, transmuted, self.prompt_template)
        agent = self.agents.agent_for(inst.template)
        if agent is None:
            raise UncoveredSemanticNodeError(inst.template)
        request = AgentRequest(
            run_id=self.run_id,
            node=iid,
            flow_index=inst.template,
            instruction=instruction,
            inputs=transmuted,
            prompt=prompt,
            instruction_digest=instr_digest,
            input_digest=in_digest,
        )
        response = agent.invoke(request)
        if self.recording:
            self.store.append_trace(
                self.run_id,
                "agent",
                {
                    "node": iid,
                    "agent": agent.name,
                    "instruction": instruction,
                    "instruction_digest": instr_digest,
                    "input_digest": in_digest,
                    "prompt": prompt,
                    "response": response.raw,
                    "reference_digest": response.reference.digest(),
                },
            )
        self._emit_event(TRACE_APPENDED, {"stream": "agent", "node": iid})
        return response.reference

    def _transmute_reference(self, ref: Reference) -> Reference:
        """Replace sign cells with fetched content; record env digests."""
        if not any(isinstance(c, Sign) for c in ref.cells):
            return ref
        new_cells = []
        for cell in ref.cells:
            if isinstance(cell, Sign):
                content, content_digest = transmute(cell, self.resolver)
                self.env_snapshot[cell.sign_id] = content_digest
                new_cells.append(content)
            else:
                new_cells.append(cell)
        return Reference(list(ref.axes), new_cells)

    # -- scheduling ---------------------------------------------------------------

    def _pause_barrier(self) -> Optional[tuple]:
        """Lowest paused address; nothing at or past it may execute."""
        keys = [
            instance_key(iid)
            for iid, status in self.blackboard.items()
            if status == Status.PAUSED
        ]
        return min(keys) if keys else None

    def _pop_ready(self) -> Optional[str]:
        barrier = self._pause_barrier()
        while self._waitlist:
            key, iid = heapq.heappop(self._waitlist)
            if self.blackboard.get(iid) != Status.READY:
                continue
            if barrier is not None and key >= barrier:
                heapq.heappush(self._waitlist, (key, iid))
                return None
            return iid
        return None

    def _hits_breakpoint(self, iid: str) -> bool:
        template, _ = split_instance_id(iid)
        if iid in self.cleared_breakpoints or template in self.cleared_breakpoints:
            return False
        return iid in self.breakpoints or template in self.breakpoints

    def step(self) -> Optional[dict]:
        """Dispatch the lowest Ready instance; returns a report, or None if idle."""
        iid = self._pop_ready()
        if iid is None:
            return None
        if self._hits_breakpoint(iid):
            self._emit_status(iid, Status.PAUSED)
            self._orch("paused", iid)
            return {"node": iid, "status": Status.PAUSED}
        self._emit_status(iid, Status.RUNNING)
        self._orch("dispatch", iid)
        try:
            value = self._execute_instance(iid)
        except EXECUTION_FAULTS as exc:
            self._emit_status(iid, Status.FAILED)
            self._orch("failed", iid, error=str(exc))
            logger.warning("node %s failed: %s", iid, exc)
            return {"node": iid, "status": Status.FAILED, "error": str(exc)}
        self.values[iid] = value
        self._emit_status(iid, Status.COMPLETED)
        self._retain(iid, value)
        self._orch("completed", iid)
        self._after_completion(iid)
        return {"node": iid, "status": Status.COMPLETED}

    def _after_completion(self, iid: str) -> None:
        for loop_iid in list(self._expansions.get(iid, ())):
            if self.blackboard.get(loop_iid) in (Status.COMPLETED, Status.FAILED):
                continue
            try:
                self._expand(loop_iid, self.values[iid])
            except MissingLoopAxisError as exc:
                self._emit_status(loop_iid, Status.FAILED)
                self._orch("failed", loop_iid, error=str(exc))
        self._promote_consumers(iid)

    def execute(self, max_steps: Optional[int] = None) -> str:
        """Run until quiescent (or ``max_steps``); returns the run status."""
        steps = 0
        while max_steps is None or steps < max_steps:
            report = self.step()
            if report is None:
                break
            steps += 1
        status = self.final_status()
        if self.recording:
            self.store.update_run(self.run_id, status=status)
            if status in ("completed", "failed") and not self._finished:
                self._finished = True
                self._emit_event(RUN_FINISHED, {"status": status})
        return status

    def final_status(self) -> str:
        states = set(self.blackboard.values())
        if Status.PAUSED in states:
            return "paused"
        if Status.READY in states or Status.RUNNING in states:
            return "running"
        if Status.FAILED in states:
            return "failed"
        return "completed"

    def resume(self, clear: Optional[set[str]] = None) -> str:
        """Clear paused nodes (all, or the given set) and keep executing."""
        cleared = set(clear) if clear is not None else {
            iid
            for iid, status in self.blackboard.items()
            if status == Status.PAUSED
        }
        self.cleared_breakpoints.update(cleared)
        if self.recording:
            self.store.update_run(
                self.run_id, cleared_breakpoints=sorted(self.cleared_breakpoints)
            )
        paused = [
            iid for iid, status in self.blackboard.items() if status == Status.PAUSED
        ]
        for iid in sorted(paused, key=instance_key):
            if not self._hits_breakpoint(iid):
                self._emit_status(iid, Status.READY)
                heapq.heappush(self._waitlist, (instance_key(iid), iid))
        return self.execute()

    # -- downstream closure (drives override staleness) -------------------------

    def instance_closure(self, iid: str) -> set[str]:
        """Everything transitively downstream of ``iid``, excluding it."""
        if iid not in self.instances:
            raise NotFoundError(f"no node {iid} in run {self.run_id}")
        seen: set[str] = set()
        frontier = [iid]
        while frontier:
            for nxt in self.consumers.get(frontier.pop(), ()):
                if nxt not in seen:
                    seen.add(nxt)
                    frontier.append(nxt)
        seen.discard(iid)
        return seen


# -- run construction -------------------------------------------------------------


def _new_run_id() -> str:
    return "r-" + uuid.uuid4().hex[:12]


def _validate_coverage(plan: CompiledPlan, agents: AgentSetup) -> None:
    for fi in sorted(plan.nodes, key=fi_key):
        if plan.nodes[fi].kind != "semantic":
            continue
        name = match_agent(fi, agents.rules)
        if name is None or name not in agents.agents:
            raise UncoveredSemanticNodeError(fi)


def _validate_inputs(plan: CompiledPlan, inputs: dict[str, Reference]) -> None:
    for fi in sorted(plan.nodes, key=fi_key):
        node = plan.nodes[fi]
        der = node.derivation
        if der["kind"] == "ground" and der["ground"]["type"] == "input":
            if node.concept_name not in inputs:
                raise MissingGroundInputError(node.concept_name, fi)


def _write_manifest(
    run: Run,
    bundle: PlanBundle,
    agents_doc: Optional[dict],
    seed_from: Optional[dict],
) -> None:
    run.store.put_run(
        {
            "schema": "nc/1",
            "run_id": run.run_id,
            "created_at": time.time(),
            "status": "created",
            "bundle": bundle.to_json(),
            "inputs": {
                name: run.store.tensors.put(ref) for name, ref in run.inputs.items()
            },
            "breakpoints": sorted(run.breakpoints),
            "cleared_breakpoints": [],
            "agents_doc": agents_doc,
            "seed_from": seed_from,
        }
    )


def start_run(
    store: CaseStore,
    bundle: PlanBundle,
    agents: Optional[AgentSetup] = None,
    inputs: Optional[dict[str, Reference]] = None,
    breakpoints: Optional[set[str]] = None,
    agents_doc: Optional[dict] = None,
    run_id: Optional[str] = None,
) -> Run:
    """Create a run: manifest written, grounds completed, waitlist seeded."""
    run = Run(
        store=store,
        run_id=run_id or _new_run_id(),
        bundle=bundle,
        agents=agents,
        inputs=inputs,
        breakpoints=breakpoints,
    )
    _validate_coverage(run.plan, run.agents)
    _validate_inputs(run.plan, run.inputs)
    _write_manifest(run, bundle, agents_doc, seed_from=None)
    run._instantiate_static()
    for iid in sorted(run.instances, key=instance_key):
        run._emit_status(iid, Status.PENDING)
    run._settle_grounds(list(run.instances.values()))
    for iid in sorted(run.instances, key=instance_key):
        run._maybe_ready(iid)
    return run


def _rebuild_instances(run: Run, digests: dict[str, str]) -> None:
    """Recreate the instance graph a prior state implies, expansions included.

    Must run with recording off; completed collection values are pulled from
    the tensor store so loops re-expand to the same shape.
    """
    run._instantiate_static()
    changed = True
    while changed:
        changed = False
        for coll_iid in list(run._expansions):
            if coll_iid not in digests:
                continue
            for loop_iid in list(run._expansions[coll_iid]):
                if loop_iid in run._expanded:
                    continue
                collection = run.store.tensors.get(digests[coll_iid])
                run.values[coll_iid] = collection
                run._expand(loop_iid, collection)
                changed = True


def seed_run(
    store: CaseStore,
    bundle: PlanBundle,
    statuses: dict[str, str],
    digests: dict[str, str],
    env: dict[str, str],
    agents: Optional[AgentSetup] = None,
    inputs: Optional[dict[str, Reference]] = None,
    breakpoints: Optional[set[str]] = None,
    agents_doc: Optional[dict] = None,
    seed_from: Optional[dict] = None,
    stale: Optional[set[str]] = None,
    overrides: Optional[dict[str, Reference]] = None,
) -> Run:
    """Create a run primed with inherited state (the fork and override paths).

    Inherited statuses are emitted as ordinary events so the new run's journal
    is self-contained, then one seed checkpoint snapshots the full concept map.
    """
    run = Run(
        store=store,
        run_id=_new_run_id(),
        bundle=bundle,
        agents=agents,
        inputs=inputs,
        breakpoints=breakpoints,
        recording=False,
    )
    _validate_coverage(run.plan, run.agents)
    stale = stale or set()
    overrides = overrides or {}

    _rebuild_instances(run, digests)
    for o_iid in overrides:
        for loop_iid in list(run._expansions.get(o_iid, ())):
            run._drop_expansion(loop_iid)
    run.env_snapshot.update(env)

    inherited: dict[str, str] = {}
    for iid in sorted(run.instances, key=instance_key):
        if iid in overrides:
            run.values[iid] = overrides[iid]
            inherited[iid] = Status.COMPLETED
        elif iid in stale:
            run.values.pop(iid, None)
            inherited[iid] = Status.STALE
        elif statuses.get(iid) == Status.COMPLETED and iid in digests:
            if iid not in run.values:
                run.values[iid] = store.tensors.get(digests[iid])
            inherited[iid] = Status.COMPLETED
        else:
            inherited[iid] = Status.PENDING

    run.recording = True
    _write_manifest(run, bundle, agents_doc, seed_from)
    for iid in sorted(run.instances, key=instance_key):
        run._emit_status(iid, inherited[iid])

    c_delta = {
        iid: store.tensors.put(run.values[iid])
        for iid in sorted(run.values, key=instance_key)
        if inherited.get(iid) == Status.COMPLETED
    }
    run._ckpt_seq += 1
    store.retain(
        run_id=run.run_id,
        seq=run._ckpt_seq,
        flow_index=seed_from.get("flow_index", "seed") if seed_from else "seed",
        blackboard=dict(run.blackboard),
        c_delta=c_delta,
        env_delta=dict(env),
    )
    run._env_flushed.update(env)
    run._emit_event(CHECKPOINT_RETAINED, {"node": "seed", "seq": run._ckpt_seq})
    run._settle_grounds(list(run.instances.values()))
    for iid in sorted(run.instances, key=instance_key):
        run._maybe_ready(iid)
    return run


def fork_run(
    store: CaseStore,
    source_run_id: str,
    flow_index: str,
    agents: Optional[AgentSetup] = None,
    inputs: Optional[dict[str, Reference]] = None,
    breakpoints: Optional[set[str]] = None,
    agents_doc: Optional[dict] = None,
) -> Run:
    """New run inheriting everything Completed at ``flow_index``'s checkpoint.

    Anything not finished at that point (including failures) starts fresh.
    """
    ckpt = store.find_checkpoint(source_run_id, flow_index)
    source = store.get_run(source_run_id)
    bundle = PlanBundle.from_json(source["bundle"])
    run_inputs = inputs if inputs is not None else _manifest_inputs(store, source)
    return seed_run(
        store,
        bundle,
        statuses=ckpt.blackboard,
        digests=ckpt.concept_digests,
        env=ckpt.env_digests,
        agents=agents,
        inputs=run_inputs,
        breakpoints=breakpoints,
        agents_doc=agents_doc if agents_doc is not None else source.get("agents_doc"),
        seed_from={
            "run": source_run_id,
            "flow_index": flow_index,
            "mode": "fork",
        },
    )


def override_run(
    store: CaseStore,
    source_run_id: str,
    flow_index: str,
    new_value: Reference,
    agents: Optional[AgentSetup] = None,
    agents_doc: Optional[dict] = None,
) -> Run:
    """New run from the source's final state with ``flow_index`` revised.

    Exactly the Completed nodes downstream of the revised one go Stale and
    re-execute; everything else is inherited untouched. The replacement must
    keep the original axis names (lengths may differ).
    """
    source = store.get_run(source_run_id)
    bundle = PlanBundle.from_json(source["bundle"])
    last = store.last_checkpoint(source_run_id)
    if last is None:
        raise NotFoundError(f"run {source_run_id} has no checkpoints")
    if flow_index not in last.concept_digests:
        raise NotFoundError(
            f"no completed value for {flow_index!r} in run {source_run_id}"
        )
    old = store.tensors.get(last.concept_digests[flow_index])
    if old.axis_names != new_value.axis_names:
        raise ShapeMismatchError(
            f"override of {flow_index!r} must keep axis names "
            f"{list(old.axis_names)}, got {list(new_value.axis_names)}"
        )

    probe = Run(store=store, run_id="probe", bundle=bundle, recording=False)
    _rebuild_instances(probe, last.concept_digests)
    closure = probe.instance_closure(flow_index)
    completed = {
        iid for iid, status in last.blackboard.items() if status == Status.COMPLETED
    }
    stale = closure & completed

    return seed_run(
        store,
        bundle,
        statuses=last.blackboard,
        digests=last.concept_digests,
        env=last.env_digests,
        agents=agents,
        inputs=_manifest_inputs(store, source),
        breakpoints=set(source.get("breakpoints") or ()),
        agents_doc=agents_doc if agents_doc is not None else source.get("agents_doc"),
        seed_from={
            "run": source_run_id,
            "flow_index": flow_index,
            "mode": "override",
            "stale": sorted(stale, key=instance_key),
        },
        stale=stale,
        overrides={flow_index: new_value},
    )


def _manifest_inputs(store: CaseStore, manifest: dict) -> dict[str, Reference]:
    return {
        name: store.tensors.get(digest)
        for name, digest in (manifest.get("inputs") or {}).items()
    }


def snapshot_run(store: CaseStore, run_id: str) -> Run:
    """Read-only reconstruction for inspection.

    The returned Run never records: it is safe to build one while another
    process (or thread) is still executing the same run. Do not execute it.
    """
    return load_run(store, run_id, readonly=True)


def load_run(
    store: CaseStore,
    run_id: str,
    agents: Optional[AgentSetup] = None,
    readonly: bool = False,
) -> Run:
    """Reconstruct a run from its manifest, events, and checkpoints.

    Values come from the latest checkpoint's concept map, statuses from the
    folded event journal. Failed stays failed; in-flight statuses (an abrupt
    shutdown mid-dispatch) degrade to Pending so the node re-executes.
    """
    manifest = store.get_run(run_id)
    bundle = PlanBundle.from_json(manifest["bundle"])
    run = Run(
        store=store,
        run_id=run_id,
        bundle=bundle,
        agents=agents,
        inputs=_manifest_inputs(store, manifest),
        breakpoints=set(manifest.get("breakpoints") or ()),
        recording=False,
    )
    run.cleared_breakpoints = set(manifest.get("cleared_breakpoints") or ())
    events = store.read_events(run_id)
    statuses = fold_events(events)
    run._event_seq = max((e.seq for e in events), default=0)
    run._finished = any(e.kind == RUN_FINISHED for e in events)
    last = store.last_checkpoint(run_id)
    digests = last.concept_digests if last else {}
    run._ckpt_seq = last.seq if last else 0
    run._orch_seq = max(
        (e.get("seq", 0) for e in store.read_trace(run_id, "orch")), default=0
    )

    _rebuild_instances(run, digests)
    env = last.env_digests if last else {}
    run.env_snapshot.update(env)
    run._env_flushed.update(env)
    for iid in sorted(run.instances, key=instance_key):
        prior = statuses.get(iid)
        if prior == Status.COMPLETED and iid in digests:
            if iid not in run.values:
                run.values[iid] = store.tensors.get(digests[iid])
            run.blackboard[iid] = Status.COMPLETED
        elif prior in (Status.PAUSED, Status.STALE, Status.FAILED):
            run.blackboard[iid] = prior
        elif readonly and prior is not None:
            # inspection keeps in-flight statuses visible instead of
            # degrading them to a fresh attempt
            run.blackboard[iid] = prior
        else:
            run.blackboard[iid] = Status.PENDING
    if readonly:
        return run
    run.recording = True
    run._settle_grounds(list(run.instances.values()))
    for iid in sorted(run.instances, key=instance_key):
        run._maybe_ready(iid)
    return run
