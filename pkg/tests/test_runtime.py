"""Run execution: scheduling, loops, breakpoints, fork/override, events."""

from __future__ import annotations

import fnmatch
import itertools
import random

import pytest

from ncflow.agents import (
    AgentResponse,
    AgentSetup,
    PatternRule,
    ScriptedAgent,
    match_agent,
)
from ncflow.compiler import activate, compile_plan
from ncflow.errors import (
    MissingGroundInputError,
    NotFoundError,
    OperatorError,
    ShapeMismatchError,
    UncoveredSemanticNodeError,
)
from ncflow.events import RUN_FINISHED, STATUS_CHANGED
from ncflow.events import fold_events
from ncflow.operators import execute as run_op
from ncflow.refs import Reference, Sign, scalar, stack
from ncflow.runtime import (
    Status,
    fork_run,
    instance_key,
    load_run,
    override_run,
    start_run,
)
from ncflow.store import CaseStore

from .genplans import bfs_closure, generate_plan
from .test_parser import DECK

NESTED = """\
{report}
    <* {sections}
    <= collect({section text})
    {sections}
    {section text}
        <* {parts}
        <= collect({part text})
        {parts}
            <= "split"({*})
        {part text}
            <= "write part"({*})
"""

DIAMOND = """\
{root}
    <= "combine"({left}, {right})
    {left}
        <= "analyze"({base})
        {base}
            <- "b"
    {right}
        <= "review"({got})
        {got}
            <- {base}
"""


def synth_setup(name: str = "lab"):
    agent = ScriptedAgent(name, synthesize=True)
    return AgentSetup(agents={name: agent}, rules=[PatternRule("*", name)]), agent


def outline(n: int) -> Reference:
    return stack([scalar(f"item-{i}") for i in range(n)], "outline")


def run_deck(tmp_path, n: int, breakpoints=None):
    store = CaseStore(tmp_path)
    bundle = activate(compile_plan(DECK))
    setup, agent = synth_setup()
    run = start_run(
        store,
        bundle,
        agents=setup,
        inputs={"outline": outline(n)},
        breakpoints=breakpoints,
    )
    status = run.execute()
    return store, run, agent, status


class RecordingAgent:
    """Answers deterministically and remembers what each node was shown."""

    def __init__(self, name: str = "probe"):
        self.name = name
        self.seen: dict[str, dict[str, str]] = {}
        self.calls = 0

    def invoke(self, request) -> AgentResponse:
        self.calls += 1
        self.seen[request.node] = {
            name: ref.digest() for name, ref in request.inputs.items()
        }
        return AgentResponse(
            reference=scalar(f"probe:{request.input_digest[:8]}"), raw="{}"
        )


class SplitAgent:
    """Splits each section into a fixed number of parts, writes each part."""

    def __init__(self, lengths: dict[str, int]):
        self.name = "splitter"
        self.lengths = dict(lengths)
        self.calls = 0

    def invoke(self, request) -> AgentResponse:
        self.calls += 1
        element = request.inputs["*"].item()
        if request.instruction == "split":
            n = self.lengths[element]
            ref = stack([scalar(f"{element}/p{j}") for j in range(n)], "parts")
        else:
            ref = scalar(f"wrote:{element}")
        return AgentResponse(reference=ref, raw="{}")


# -- straight-line and loop execution -------------------------------------------


def test_deck_runs_to_completion(tmp_path):
    store, run, agent, status = run_deck(tmp_path, 3)
    assert status == "completed"
    assert set(run.blackboard.values()) == {Status.COMPLETED}
    assert agent.calls == 3
    root = run.values["1"]
    assert root.axes == (("outline", 3),)
    assert len(set(root.cells)) == 3


@pytest.mark.parametrize("n,calls", [(0, 0), (1, 1), (3, 3)])
def test_loop_iteration_and_call_counts(tmp_path, n, calls):
    store, run, agent, status = run_deck(tmp_path, n)
    assert status == "completed"
    assert agent.calls == calls
    assert run.values["1"].axis_length("outline") == n
    if n == 0:
        assert store.read_trace(run.run_id, "agent") == []


def test_iteration_checkpoints_use_suffixed_addresses(tmp_path):
    store, run, agent, _ = run_deck(tmp_path, 3)
    addressed = {
        store.load_checkpoint(run.run_id, s).flow_index
        for s in store.checkpoint_seqs(run.run_id)
    }
    for k in range(3):
        assert f"1.2.2[i={k}]" in addressed
        assert f"1.2[i={k}]" in addressed


def test_save_writes_into_outputs_dir(tmp_path):
    store, run, _, _ = run_deck(tmp_path, 2)
    target = store.outputs_dir(run.run_id) / "deck.json"
    assert target.read_bytes() == run.values["1"].canonical_bytes() + b"\n"


def test_syntactic_only_run_never_resolves_signs(tmp_path):
    text = (
        "{out}\n"
        "    <= wait({a}, {b})\n"
        "    {a}\n"
        '        <- "first"\n'
        "    {b}\n"
        "        <- 2\n"
    )
    store = CaseStore(tmp_path)
    run = start_run(store, activate(compile_plan(text)))
    assert run.execute() == "completed"
    assert run.values["1"] == scalar("first")
    assert run.resolver.calls == 0
    assert store.read_trace(run.run_id, "agent") == []


def test_scheduler_never_dispatches_before_deps(tmp_path):
    store, run, _, _ = run_deck(tmp_path, 3)
    completed: set[str] = set()
    for event in store.read_events(run.run_id):
        if event.kind != STATUS_CHANGED:
            continue
        node, status = event.payload["node"], event.payload["status"]
        if status == Status.RUNNING:
            missing = [d for d in run.instances[node].deps if d not in completed]
            assert not missing, f"{node} ran before {missing}"
        elif status == Status.COMPLETED:
            completed.add(node)


def test_syntactic_replay_is_byte_exact(tmp_path):
    store, run, _, _ = run_deck(tmp_path, 3)
    for iid, inst in run.instances.items():
        node = run.plan.nodes[inst.template]
        is_loop_stack = inst.role == "node" and node.loop is not None
        if node.derivation["kind"] == "ground":
            continue
        if node.kind == "semantic" and not is_loop_stack:
            continue
        again = run._execute_instance(iid)
        assert again.canonical_bytes() == run.values[iid].canonical_bytes()


def test_rerun_is_deterministic(tmp_path):
    _, run_a, _, _ = run_deck(tmp_path / "a", 3)
    _, run_b, _, _ = run_deck(tmp_path / "b", 3)
    assert run_a.values["1"].digest() == run_b.values["1"].digest()


# -- nested loops ------------------------------------------------------------


def test_nested_loop_shapes_and_checkpoints(tmp_path):
    store = CaseStore(tmp_path)
    bundle = activate(compile_plan(NESTED))
    agent = SplitAgent({"sec-0": 3, "sec-1": 3})
    setup = AgentSetup(agents={agent.name: agent}, rules=[PatternRule("*", agent.name)])
    sections = stack([scalar("sec-0"), scalar("sec-1")], "sections")
    run = start_run(store, bundle, agents=setup, inputs={"sections": sections})
    assert run.execute() == "completed"
    root = run.values["1"]
    assert root.axes == (("sections", 2), ("parts", 3))
    assert list(root.cells) == [
        f"wrote:sec-{k}/p{j}" for k in range(2) for j in range(3)
    ]
    assert agent.calls == 2 + 6
    leaf_ckpts = [
        s
        for s in store.checkpoint_seqs(run.run_id)
        if store.load_checkpoint(run.run_id, s).flow_index.startswith("1.2.2[")
    ]
    assert len(leaf_ckpts) == 6


def test_ragged_inner_loops_fail_at_outer_stack(tmp_path):
    store = CaseStore(tmp_path)
    bundle = activate(compile_plan(NESTED))
    agent = SplitAgent({"sec-0": 2, "sec-1": 3})
    setup = AgentSetup(agents={agent.name: agent}, rules=[PatternRule("*", agent.name)])
    sections = stack([scalar("sec-0"), scalar("sec-1")], "sections")
    run = start_run(store, bundle, agents=setup, inputs={"sections": sections})
    assert run.execute() == "failed"
    assert run.blackboard["1"] == Status.FAILED
    assert run.blackboard["1.2[i=0]"] == Status.COMPLETED
    assert run.blackboard["1.2[i=1]"] == Status.COMPLETED
    assert run.values["1.2[i=0]"].axes == (("parts", 2),)
    assert run.values["1.2[i=1]"].axes == (("parts", 3),)


def test_collection_without_loop_axis_fails_loop_only(tmp_path):
    store = CaseStore(tmp_path)
    bundle = activate(compile_plan(DECK))
    setup, _ = synth_setup()
    bad = stack([scalar("x")], "wrong")
    run = start_run(store, bundle, agents=setup, inputs={"outline": bad})
    assert run.execute() == "failed"
    assert run.blackboard["1.2"] == Status.FAILED
    assert run.blackboard["1.1"] == Status.COMPLETED
    assert run.blackboard["1"] == Status.PENDING


# -- runtime scope rule ----------------------------------------------------------


def test_loop_body_sees_only_the_element(tmp_path):
    store = CaseStore(tmp_path)
    bundle = activate(compile_plan(DECK))
    probe = RecordingAgent()
    setup = AgentSetup(agents={"probe": probe}, rules=[PatternRule("*", "probe")])
    run = start_run(store, bundle, agents=setup, inputs={"outline": outline(3)})
    assert run.execute() == "completed"
    for k in range(3):
        seen = probe.seen[f"1.2.2[i={k}]"]
        assert list(seen) == ["*"]
        assert seen["*"] == scalar(f"item-{k}").digest()


def test_probe_agents_see_exactly_declared_inputs(tmp_path):
    rng = random.Random(7)
    for trial in range(10):
        gp = generate_plan(rng, max_nodes=25)
        plan = compile_plan(gp.text)
        by_name = {n.concept_name: fi for fi, n in plan.nodes.items()}
        store = CaseStore(tmp_path / f"t{trial}")
        probe = RecordingAgent()
        setup = AgentSetup(agents={"probe": probe}, rules=[PatternRule("*", "probe")])
        run = start_run(store, activate(plan), agents=setup)
        assert run.execute() == "completed"
        probed = 0
        for fi, node in plan.nodes.items():
            if node.kind != "semantic":
                continue
            probed += 1
            declared = node.derivation["inputs"]
            seen = probe.seen[fi]
            assert list(seen) == [inp["name"] for inp in declared]
            for inp in declared:
                assert seen[inp["name"]] == run.values[inp["source"]].digest()
        assert probed == len(gp.semantic)
        assert len(probe.seen) == probed


# -- events and checkpoints -------------------------------------------------------


def test_event_fold_matches_final_blackboard(tmp_path):
    store, run, _, _ = run_deck(tmp_path, 3)
    assert fold_events(store.read_events(run.run_id)) == run.blackboard


def test_run_finished_event_once_with_status(tmp_path):
    store, run, _, status = run_deck(tmp_path, 2)
    finished = [e for e in store.read_events(run.run_id) if e.kind == RUN_FINISHED]
    assert len(finished) == 1
    assert finished[0].payload["status"] == status == "completed"
    assert store.get_run(run.run_id)["status"] == "completed"


def test_event_seqs_are_gapless(tmp_path):
    store, run, _, _ = run_deck(tmp_path, 2)
    seqs = [e.seq for e in store.read_events(run.run_id)]
    assert seqs == list(range(1, len(seqs) + 1))


def test_journal_reads_skip_in_flight_append(tmp_path):
    # a concurrent reader (another thread, or the CLI against a live
    # service's store) must never choke on a half-written final line
    store, run, _, _ = run_deck(tmp_path, 2)
    events_path = store.events_path(run.run_id)
    complete = store.read_events(run.run_id)

    torn = '{"schema": "nc-events/1", "run_id": "'
    with events_path.open("a", encoding="utf-8") as fh:
        fh.write(torn)
    assert store.read_events(run.run_id) == complete

    with events_path.open("a", encoding="utf-8") as fh:
        fh.write(f'{run.run_id}", "seq": 99, "kind": "TraceAppended", "payload": {{}}}}\n')
    assert [e.seq for e in store.read_events(run.run_id)] == [
        *[e.seq for e in complete],
        99,
    ]

    trace_path = store.trace_path(run.run_id, "orch")
    whole = store.read_trace(run.run_id, "orch")
    with trace_path.open("a", encoding="utf-8") as fh:
        fh.write('{"half":')
    assert store.read_trace(run.run_id, "orch") == whole


def test_every_checkpoint_covers_exactly_completed(tmp_path):
    store, run, _, _ = run_deck(tmp_path, 2)
    for seq in store.checkpoint_seqs(run.run_id):
        ckpt = store.load_checkpoint(run.run_id, seq)
        done = {n for n, s in ckpt.blackboard.items() if s == Status.COMPLETED}
        assert set(ckpt.concept_digests) == done


def test_trace_completeness(tmp_path):
    store, run, agent, _ = run_deck(tmp_path, 2)
    agent_entries = store.read_trace(run.run_id, "agent")
    assert len(agent_entries) == agent.calls == 2
    assert all(e["prompt"] and e["response"] for e in agent_entries)
    dispatches = [
        e for e in store.read_trace(run.run_id, "orch") if e["event"] == "dispatch"
    ]
    running = [
        e
        for e in store.read_events(run.run_id)
        if e.kind == STATUS_CHANGED and e.payload["status"] == Status.RUNNING
    ]
    assert len(dispatches) == len(running)


# -- failure localization -----------------------------------------------------------


FAULTY = """\
{report}
    <= wait({bad}, {good})
    {bad}
        <= extract({data}, {field})
        {data}
            <- "not a dict"
        {field}
            <- "x"
    {good}
        <= "summarize"({src})
        {src}
            <- "s"
"""


def test_failure_stays_local(tmp_path):
    store = CaseStore(tmp_path)
    setup, agent = synth_setup()
    run = start_run(store, activate(compile_plan(FAULTY)), agents=setup)
    assert run.execute() == "failed"
    assert run.blackboard["1.1"] == Status.FAILED
    assert run.blackboard["1.2"] == Status.COMPLETED
    assert run.blackboard["1"] == Status.PENDING
    assert agent.calls == 1
    assert fold_events(store.read_events(run.run_id)) == run.blackboard


def test_agent_failure_marks_node_failed(tmp_path):
    store = CaseStore(tmp_path)
    empty = ScriptedAgent("mute")  # no table, no synthesize: every call errors
    setup = AgentSetup(agents={"mute": empty}, rules=[PatternRule("*", "mute")])
    run = start_run(store, activate(compile_plan(DIAMOND)), agents=setup)
    assert run.execute() == "failed"
    assert run.blackboard["1.1"] == Status.FAILED
    assert run.blackboard["1.2"] == Status.FAILED
    assert run.blackboard["1"] == Status.PENDING


def test_uncovered_semantic_node_rejected_before_any_write(tmp_path):
    store = CaseStore(tmp_path)
    with pytest.raises(UncoveredSemanticNodeError):
        start_run(store, activate(compile_plan(DIAMOND)))
    assert store.list_runs() == []


def test_missing_ground_input_rejected(tmp_path):
    store = CaseStore(tmp_path)
    setup, _ = synth_setup()
    with pytest.raises(MissingGroundInputError):
        start_run(store, activate(compile_plan(DECK)), agents=setup)


# -- breakpoints --------------------------------------------------------------------


def test_breakpoint_pauses_before_execution(tmp_path):
    store, run, agent, status = run_deck(tmp_path, 3, breakpoints={"1.2.2[i=1]"})
    assert status == "paused"
    assert run.blackboard["1.2.2[i=1]"] == Status.PAUSED
    assert run.blackboard["1.2.2[i=0]"] == Status.COMPLETED
    assert run.blackboard["1.2.2[i=2]"] != Status.COMPLETED
    assert agent.calls == 1
    barrier = instance_key("1.2.2[i=1]")
    for iid, st in run.blackboard.items():
        if st in (Status.COMPLETED, Status.RUNNING):
            assert instance_key(iid) < barrier
    assert run.resume() == "completed"
    assert agent.calls == 3


def test_template_breakpoint_hits_every_iteration(tmp_path):
    store, run, agent, status = run_deck(tmp_path, 3, breakpoints={"1.2.2"})
    assert status == "paused"
    assert agent.calls == 0
    rounds = 0
    while status == "paused":
        status = run.resume()
        rounds += 1
        assert rounds <= 4
    assert status == "completed"
    assert agent.calls == 3


def test_template_clear_releases_all_iterations(tmp_path):
    store, run, agent, status = run_deck(tmp_path, 3, breakpoints={"1.2.2"})
    assert status == "paused"
    assert run.resume(clear={"1.2.2"}) == "completed"
    assert agent.calls == 3


def test_paused_run_reloads_and_resumes(tmp_path):
    store, run, agent, status = run_deck(tmp_path, 3, breakpoints={"1"})
    assert status == "paused"
    direct_store, direct_run, _, _ = run_deck(tmp_path / "direct", 3)

    reopened = CaseStore(tmp_path)
    setup, agent2 = synth_setup()
    loaded = load_run(reopened, run.run_id, agents=setup)
    assert loaded.blackboard == run.blackboard
    assert loaded.resume() == "completed"
    assert agent2.calls == 0  # only the paused save step was left
    assert loaded.values["1"].digest() == direct_run.values["1"].digest()
    events = reopened.read_events(run.run_id)
    seqs = [e.seq for e in events]
    assert seqs == sorted(seqs) and len(set(seqs)) == len(seqs)
    assert fold_events(events) == loaded.blackboard


def test_completed_run_reloads_read_only(tmp_path):
    store, run, _, _ = run_deck(tmp_path, 2)
    before = len(store.read_events(run.run_id))
    loaded = load_run(CaseStore(tmp_path), run.run_id, agents=synth_setup()[0])
    assert loaded.blackboard == run.blackboard
    assert loaded.values["1"].digest() == run.values["1"].digest()
    assert len(store.read_events(run.run_id)) == before
    assert loaded.execute() == "completed"


def test_failed_node_stays_failed_on_reload(tmp_path):
    store = CaseStore(tmp_path)
    setup, _ = synth_setup()
    run = start_run(store, activate(compile_plan(FAULTY)), agents=setup)
    assert run.execute() == "failed"
    loaded = load_run(CaseStore(tmp_path), run.run_id, agents=synth_setup()[0])
    assert loaded.blackboard["1.1"] == Status.FAILED
    assert loaded.execute() == "failed"


# -- fork ---------------------------------------------------------------------------


def test_fork_skips_inherited_work_and_matches(tmp_path):
    store, run, agent, _ = run_deck(tmp_path, 3)
    setup, fork_agent = synth_setup()
    forked = fork_run(store, run.run_id, "1.2", agents=setup)
    assert forked.run_id != run.run_id
    assert forked.execute() == "completed"
    assert fork_agent.calls == 0
    assert forked.values["1"].canonical_bytes() == run.values["1"].canonical_bytes()


def test_fork_mid_loop_redoes_only_the_remainder(tmp_path):
    store, run, _, _ = run_deck(tmp_path, 3)
    setup, fork_agent = synth_setup()
    forked = fork_run(store, run.run_id, "1.2.2[i=0]", agents=setup)
    inherited = {
        n for n, s in fold_events(store.read_events(forked.run_id)).items()
        if s == Status.COMPLETED
    }
    assert "1.2.2[i=0]" in inherited
    assert "1.2.2[i=1]" not in inherited
    assert forked.execute() == "completed"
    assert fork_agent.calls == 2
    assert forked.values["1"].canonical_bytes() == run.values["1"].canonical_bytes()


def test_fork_seed_checkpoint_covers_inherited(tmp_path):
    store, run, _, _ = run_deck(tmp_path, 3)
    forked = fork_run(store, run.run_id, "1.2.2[i=0]", agents=synth_setup()[0])
    seed = store.load_checkpoint(forked.run_id, 1)
    done = {n for n, s in seed.blackboard.items() if s == Status.COMPLETED}
    assert set(seed.concept_digests) == done


def test_fork_requires_a_checkpoint(tmp_path):
    store, run, _, _ = run_deck(tmp_path, 2)
    with pytest.raises(NotFoundError):
        fork_run(store, run.run_id, "1.9", agents=synth_setup()[0])


# -- override ------------------------------------------------------------------------


def test_override_diamond_stales_exactly_downstream(tmp_path):
    store = CaseStore(tmp_path)
    setup, _ = synth_setup()
    run = start_run(store, activate(compile_plan(DIAMOND)), agents=setup)
    assert run.execute() == "completed"

    setup2, agent2 = synth_setup()
    revised = override_run(store, run.run_id, "1.1.1", scalar("B2"), agents=setup2)
    manifest = store.get_run(revised.run_id)
    assert manifest["seed_from"]["mode"] == "override"
    assert manifest["seed_from"]["stale"] == ["1", "1.1", "1.2", "1.2.1"]
    assert revised.execute() == "completed"
    assert agent2.calls == 3
    ran = {
        e.payload["node"]
        for e in store.read_events(revised.run_id)
        if e.kind == STATUS_CHANGED and e.payload["status"] == Status.RUNNING
    }
    assert ran == {"1", "1.1", "1.2", "1.2.1"}
    assert revised.values["1.1.1"] == scalar("B2")
    assert revised.values["1"].digest() != run.values["1"].digest()


def test_override_keeps_upstream_values(tmp_path):
    store = CaseStore(tmp_path)
    setup, _ = synth_setup()
    run = start_run(store, activate(compile_plan(DIAMOND)), agents=setup)
    run.execute()
    revised = override_run(store, run.run_id, "1.2", scalar("done"), agents=synth_setup()[0])
    assert revised.execute() == "completed"
    assert revised.values["1.1"].digest() == run.values["1.1"].digest()
    assert revised.values["1.1.1"].digest() == run.values["1.1.1"].digest()


def test_override_axis_names_must_match(tmp_path):
    store, run, _, _ = run_deck(tmp_path, 3)
    with pytest.raises(ShapeMismatchError):
        override_run(
            store, run.run_id, "1.2.1", scalar("flat"), agents=synth_setup()[0]
        )
    with pytest.raises(NotFoundError):
        override_run(store, run.run_id, "1.9", scalar("x"), agents=synth_setup()[0])


def test_override_collection_reexpands_to_new_length(tmp_path):
    store, run, _, _ = run_deck(tmp_path, 3)
    setup, agent = synth_setup()
    new_outline = stack([scalar("fresh-a"), scalar("fresh-b")], "outline")
    revised = override_run(store, run.run_id, "1.2.1", new_outline, agents=setup)
    assert revised.execute() == "completed"
    assert agent.calls == 2
    assert revised.values["1"].axis_length("outline") == 2
    assert "1.2.2[i=2]" not in revised.instances


def test_override_stale_sets_match_reachability_oracle(tmp_path):
    rng = random.Random(20260817)
    for trial in range(25):
        gp = generate_plan(rng, max_nodes=30)
        plan = compile_plan(gp.text)
        by_name = {n.concept_name: fi for fi, n in plan.nodes.items()}
        store = CaseStore(tmp_path / f"t{trial}")
        run = start_run(store, activate(plan), agents=synth_setup()[0])
        assert run.execute() == "completed"

        target = rng.choice(gp.concepts)
        expected = {by_name[c] for c in bfs_closure(gp.edges, target)}
        revised = override_run(
            store, run.run_id, by_name[target], scalar("override"),
            agents=synth_setup()[0],
        )
        stale = set(store.get_run(revised.run_id)["seed_from"]["stale"])
        assert stale == expected
        assert revised.execute() == "completed"
        ran = {
            e.payload["node"]
            for e in store.read_events(revised.run_id)
            if e.kind == STATUS_CHANGED and e.payload["status"] == Status.RUNNING
        }
        assert ran == expected


# -- signs and transmutation -----------------------------------------------------


SIGNED = """\
{summary}
    <= "summarize the document"({document})
    {document}
        <- sign("prov://doc")
"""


def test_semantic_input_is_transmuted_and_env_recorded(tmp_path):
    import hashlib

    store = CaseStore(tmp_path)
    bundle = activate(compile_plan(SIGNED), provisions={"doc": "the cargo manifest"})
    probe = RecordingAgent()
    setup = AgentSetup(agents={"probe": probe}, rules=[PatternRule("*", "probe")])
    run = start_run(store, bundle, agents=setup)
    assert run.execute() == "completed"
    assert run.resolver.calls == 1
    assert probe.seen["1"]["document"] == scalar("the cargo manifest").digest()
    sign_id = Sign.for_uri("prov://doc").sign_id
    env = store.last_checkpoint(run.run_id).env_digests
    assert env == {sign_id: hashlib.sha256(b"the cargo manifest").hexdigest()}


def test_load_exposes_sign_metadata_without_fetching(tmp_path):
    text = (
        "{meta}\n"
        "    <= load({document})\n"
        "    {document}\n"
        '        <- sign("prov://doc")\n'
    )
    store = CaseStore(tmp_path)
    run = start_run(store, activate(compile_plan(text), provisions={"doc": "zzz"}))
    assert run.execute() == "completed"
    cell = run.values["1"].item()
    assert cell["uri"] == "prov://doc"
    assert cell["sign_id"] == Sign.for_uri("prov://doc").sign_id
    assert run.resolver.calls == 0


# -- the built-in operators ----------------------------------------------------------


def test_route_selects_branch_by_name():
    x, y = scalar("left"), scalar("right")
    out = run_op("route", [("flag", scalar("b")), ("a", x), ("b", y)])
    assert out == y
    with pytest.raises(OperatorError):
        run_op("route", [("flag", scalar("c")), ("a", x), ("b", y)])
    with pytest.raises(OperatorError):
        run_op("route", [("flag", scalar(3)), ("a", x)])


def test_group_matches_partition_oracle_exhaustively():
    for n in range(7):
        for combo in itertools.product("abc", repeat=n):
            keys = stack([scalar(k) for k in combo], "k")
            items = stack([scalar(f"v{i}") for i in range(n)], "k")
            out = run_op("group", [("items", items), ("keys", keys)])
            distinct = list(dict.fromkeys(combo))
            expected = [
                {"key": k, "indexes": [i for i in range(n) if combo[i] == k]}
                for k in distinct
            ]
            assert out.axes == (("group", len(distinct)),)
            assert list(out.cells) == expected


def test_group_distinguishes_cell_types():
    keys = stack([scalar(1), scalar("1"), scalar(True), scalar(1)], "k")
    items = stack([scalar(i) for i in range(4)], "k")
    out = run_op("group", [("items", items), ("keys", keys)])
    assert [g["indexes"] for g in out.cells] == [[0, 3], [1], [2]]


def test_group_input_validation():
    keys2d = Reference([("a", 1), ("b", 1)], ["k"])
    items = stack([scalar("v")], "a")
    with pytest.raises(OperatorError):
        run_op("group", [("items", items), ("keys", keys2d)])
    with pytest.raises(OperatorError):
        run_op("group", [("items", stack([scalar("v")], "other")),
                         ("keys", stack([scalar("k")], "k"))])
    with pytest.raises(OperatorError):
        run_op("group", [("items", stack([scalar("v")] * 2, "k")),
                         ("keys", stack([scalar("k")], "k"))])


def test_extract_pulls_fields_cellwise():
    src = stack([scalar({"t": "a", "n": 1}), scalar({"t": "b", "n": 2})], "rows")
    out = run_op("extract", [("src", src), ("field", scalar("t"))])
    assert out.axes == (("rows", 2),)
    assert list(out.cells) == ["a", "b"]
    with pytest.raises(OperatorError):
        run_op("extract", [("src", src), ("field", scalar("missing"))])
    with pytest.raises(OperatorError):
        run_op("extract", [("src", scalar("bare")), ("field", scalar("t"))])


def test_collect_is_identity_on_one_input():
    ref = stack([scalar(1), scalar(2)], "xs")
    assert run_op("collect", [("xs", ref)]) is ref
    with pytest.raises(OperatorError):
        run_op("collect", [("a", ref), ("b", ref)])


def test_wait_passes_first_through():
    a, b = scalar("a"), scalar("b")
    assert run_op("wait", [("a", a), ("b", b)]) is a
    assert run_op("wait", []) == scalar(None)


def test_save_rejects_escaping_paths(tmp_path):
    value = scalar("v")
    for bad in ("/etc/passwd", "../up", "a/../../b"):
        with pytest.raises(OperatorError):
            run_op("save", [("v", value), ("path", scalar(bad))], outputs_dir=tmp_path)
    out = run_op("save", [("v", value), ("path", scalar("sub/ok.json"))],
                 outputs_dir=tmp_path)
    assert out is value
    assert (tmp_path / "sub" / "ok.json").read_bytes() == value.canonical_bytes() + b"\n"


def test_unknown_operator_rejected():
    with pytest.raises(OperatorError):
        run_op("frobnicate", [("a", scalar(1))])


# -- agent matching ---------------------------------------------------------------


def test_match_agent_specificity_and_fallback():
    rules = [PatternRule("1.3.*", "A"), PatternRule("*", "B")]
    assert match_agent("1.3.2", rules) == "A"
    assert match_agent("1.1", rules) == "B"


def test_match_agent_against_evaluate_all_oracle():
    def oracle(fi, rules):
        best_key, best_agent = None, None
        for order, rule in enumerate(rules):
            if fnmatch.fnmatchcase(fi, rule.pattern):
                key = (-rule.priority, order)
                if best_key is None or key < best_key:
                    best_key, best_agent = key, rule.agent
        return best_agent

    rng = random.Random(404)

    def rand_pattern():
        parts = [
            rng.choice(["*", "?", str(rng.randint(1, 4))])
            for _ in range(rng.randint(1, 4))
        ]
        return ".".join(parts) if rng.random() < 0.9 else "*"

    for _ in range(1000):
        rules = [
            PatternRule(rand_pattern(), f"a{i}", priority=rng.randint(-2, 2))
            for i in range(rng.randint(0, 6))
        ]
        fi = ".".join(str(rng.randint(1, 4)) for _ in range(rng.randint(1, 4)))
        assert match_agent(fi, rules) == oracle(fi, rules)


# -- random end-to-end -------------------------------------------------------------


def test_random_plans_run_to_completion(tmp_path):
    rng = random.Random(11)
    for trial in range(10):
        gp = generate_plan(rng, max_nodes=30)
        store = CaseStore(tmp_path / f"t{trial}")
        setup, agent = synth_setup()
        run = start_run(store, activate(compile_plan(gp.text)), agents=setup)
        assert run.execute() == "completed"
        assert set(run.blackboard.values()) == {Status.COMPLETED}
        assert agent.calls == len(gp.semantic)
        assert fold_events(store.read_events(run.run_id)) == run.blackboard
