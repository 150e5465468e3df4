"""The ``nc`` command line tool.

Every subcommand works against a project directory (``--project``, the
``NC_PROJECT_ROOT`` environment variable, or the working directory, in that
order). ``--json`` switches diagnostics and results to machine-readable JSON
on stdout; the exit code is 0 on success and 1 on any toolchain error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional

from .agents import load_agent_setup
from .compiler import (
    PlanBundle,
    compile_plan,
    fi_key,
    generate_narrative,
    ncd_document,
    plan_from_bundle,
)
from .errors import NcError, NotFoundError
from .events import STATUS_CHANGED
from .project import Library, Project, load_agents_doc
from .refs import Reference, scalar, stack
from .render import VIEWS, render_reference, render_stats, render_statuses
from .runtime import (
    Status,
    fork_run,
    instance_key,
    load_run,
    override_run,
    split_instance_id,
    start_run,
)

logger = logging.getLogger(__name__)


def _project_root(args) -> Path:
    if getattr(args, "project", None):
        return Path(args.project)
    env = os.environ.get("NC_PROJECT_ROOT")
    if env:
        return Path(env)
    return Path.cwd()


def _emit_error(args, err: NcError, filename: str = "<plan>") -> int:
    if getattr(args, "json", False):
        print(json.dumps({"error": err.to_json()}, sort_keys=True))
        return 1
    diagnostics = getattr(err, "diagnostics", None)
    if diagnostics:
        for diag in diagnostics:
            print(diag.render(filename), file=sys.stderr)
    else:
        print(f"error: {err}", file=sys.stderr)
    return 1


def _parse_inputs(pairs: list[str], ref_pairs: list[str]) -> dict[str, Reference]:
    inputs: dict[str, Reference] = {}
    for pair in pairs or ():
        name, sep, raw = pair.partition("=")
        if not sep:
            raise NcError(f"--input expects NAME=VALUE, got {pair!r}")
        inputs[name] = _value_to_reference(raw, axis=name)
    for pair in ref_pairs or ():
        name, sep, path = pair.partition("=")
        if not sep:
            raise NcError(f"--input-ref expects NAME=PATH, got {pair!r}")
        doc = json.loads(Path(path).read_text("utf-8"))
        inputs[name] = Reference.from_json(doc)
    return inputs


def _value_to_reference(raw: str, axis: str) -> Reference:
    """JSON value to Reference: lists stack along ``axis``, the rest is a scalar."""
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    if isinstance(value, dict) and value.get("schema") == "nc-ref/1":
        return Reference.from_json(value)
    if isinstance(value, list):
        return stack([scalar(item) for item in value], axis)
    return scalar(value)


def _agents_for_manifest(manifest: dict):
    doc = manifest.get("agents_doc") or {}
    return load_agent_setup(doc, Path.cwd())


def _print_run_summary(args, run, status: str, reran: Optional[set] = None) -> None:
    if getattr(args, "json", False):
        doc = {"run_id": run.run_id, "status": status, "blackboard": run.blackboard}
        if reran is not None:
            doc["re_executed"] = sorted(reran, key=instance_key)
        print(json.dumps(doc, sort_keys=True))
        return
    line = f"run {run.run_id}: {status}"
    if reran is not None:
        line += f" (re-executed {len(reran)} node{'s' if len(reran) != 1 else ''})"
    print(line)
    print(render_statuses(run.blackboard, key=instance_key))


def _reran_nodes(store, run_id: str, since: int) -> set:
    return {
        e.payload["node"]
        for e in store.read_events(run_id, since=since)
        if e.kind == STATUS_CHANGED and e.payload["status"] == Status.RUNNING
    }


# -- subcommands ------------------------------------------------------------------


def cmd_compile(args) -> int:
    root = _project_root(args)
    if args.plan:
        path = Path(args.plan)
        filename = str(path)
        try:
            plan = compile_plan(path.read_text("utf-8"))
        except NcError as err:
            return _emit_error(args, err, filename)
        stem = path.with_suffix("")
        artifacts = {
            stem.with_suffix(".ncd"): json.dumps(
                ncd_document(plan), indent=2, sort_keys=True
            )
            + "\n",
            stem.with_suffix(".ncn"): generate_narrative(plan),
            path.parent / "inference_repo.json": json.dumps(
                plan.inference_repo(), indent=2, sort_keys=True
            )
            + "\n",
            path.parent / "concept_repo.json": json.dumps(
                plan.concept_repo(), indent=2, sort_keys=True
            )
            + "\n",
        }
        for target, text in artifacts.items():
            target.write_text(text, "utf-8")
        written = [str(p) for p in artifacts]
    else:
        project = Project(root)
        filename = str(project.source_path)
        try:
            plan = project.compile()
        except NcError as err:
            return _emit_error(args, err, filename)
        written = [str(project.root / name) for name in
                   ("plan.ncd", "plan.ncn", "inference_repo.json", "concept_repo.json")]
    if args.json:
        print(json.dumps({"artifacts": written, "stats": plan.stats}, sort_keys=True))
    else:
        for item in written:
            print(item)
    return 0


def cmd_narrate(args) -> int:
    try:
        if args.plan:
            plan = compile_plan(Path(args.plan).read_text("utf-8"))
            text = generate_narrative(plan)
        else:
            text = Project(_project_root(args)).narrative().decode("utf-8")
    except NcError as err:
        return _emit_error(args, err, args.plan or "<plan>")
    sys.stdout.write(text)
    return 0


def cmd_stats(args) -> int:
    try:
        if args.plan:
            plan = compile_plan(Path(args.plan).read_text("utf-8"))
        else:
            plan = Project(_project_root(args)).load_plan()
    except NcError as err:
        return _emit_error(args, err, args.plan or "<plan>")
    if args.json:
        semantic = plan.stats.get("semantic_count", 0)
        syntactic = plan.stats.get("syntactic_count", 0)
        total = semantic + syntactic
        print(
            json.dumps(
                {
                    "semantic_count": semantic,
                    "syntactic_count": syntactic,
                    "total": total,
                    "syntactic_fraction": (syntactic / total) if total else 0.0,
                },
                sort_keys=True,
            )
        )
    else:
        print(render_stats(plan.stats))
    return 0


def cmd_run(args) -> int:
    project = Project(_project_root(args))
    try:
        bundle = project.activate()
        if args.agents:
            agents_doc = load_agents_doc(Path(args.agents))
        else:
            agents_doc = project.agents_doc()
        setup = load_agent_setup(agents_doc, project.root)
        inputs = _parse_inputs(args.input, args.input_ref)
        run = start_run(
            project.store(),
            bundle,
            agents=setup,
            inputs=inputs,
            breakpoints=set(args.breakpoint or ()),
            agents_doc=agents_doc,
        )
        status = run.execute()
    except NcError as err:
        return _emit_error(args, err, str(project.source_path))
    _print_run_summary(args, run, status)
    return 0 if status in ("completed", "paused") else 1


def cmd_resume(args) -> int:
    project = Project(_project_root(args))
    store = project.store()
    try:
        manifest = store.get_run(args.run_id)
        run = load_run(store, args.run_id, agents=_agents_for_manifest(manifest))
        seq_before = max((e.seq for e in store.read_events(args.run_id)), default=0)
        if any(s == Status.PAUSED for s in run.blackboard.values()):
            status = run.resume(clear=set(args.clear) if args.clear else None)
        else:
            status = run.execute()
        reran = _reran_nodes(store, args.run_id, seq_before)
    except NcError as err:
        return _emit_error(args, err)
    _print_run_summary(args, run, status, reran=reran)
    return 0 if status in ("completed", "paused") else 1


def cmd_inspect(args) -> int:
    store = Project(_project_root(args)).store()
    try:
        ckpt = store.find_checkpoint(args.run_id, args.flow_index)
        digest = ckpt.concept_digests.get(args.flow_index)
        if digest is None:
            raise NotFoundError(
                f"checkpoint {ckpt.seq} holds no value for {args.flow_index}"
            )
        ref = store.tensors.get(digest)
        print(render_reference(ref, view=args.view))
    except NcError as err:
        return _emit_error(args, err)
    return 0


def cmd_override(args) -> int:
    project = Project(_project_root(args))
    store = project.store()
    try:
        manifest = store.get_run(args.run_id)
        value = _override_value(manifest, args.flow_index, args.value)
        revised = override_run(
            store,
            args.run_id,
            args.flow_index,
            value,
            agents=_agents_for_manifest(manifest),
            agents_doc=manifest.get("agents_doc"),
        )
        stale = store.get_run(revised.run_id)["seed_from"]["stale"]
    except NcError as err:
        return _emit_error(args, err)
    if args.json:
        print(json.dumps({"run_id": revised.run_id, "stale": stale}, sort_keys=True))
    else:
        print(f"run {revised.run_id} seeded from {args.run_id}")
        print(f"stale ({len(stale)}): {', '.join(stale) if stale else '(none)'}")
        print(f"next: nc resume {revised.run_id}")
    return 0


def _override_value(manifest: dict, flow_index: str, raw: str) -> Reference:
    path = Path(raw)
    if path.is_file():
        raw = path.read_text("utf-8")
    template, _ = split_instance_id(flow_index)
    plan = plan_from_bundle(PlanBundle.from_json(manifest["bundle"]))
    node = plan.nodes.get(template)
    axis = node.concept_name if node is not None else template
    return _value_to_reference(raw, axis=axis)


def cmd_fork(args) -> int:
    store = Project(_project_root(args)).store()
    try:
        manifest = store.get_run(args.run_id)
        forked = fork_run(
            store,
            args.run_id,
            args.flow_index,
            agents=_agents_for_manifest(manifest),
            agents_doc=manifest.get("agents_doc"),
        )
    except NcError as err:
        return _emit_error(args, err)
    if args.json:
        print(json.dumps({"run_id": forked.run_id}, sort_keys=True))
    else:
        print(f"run {forked.run_id} forked from {args.run_id} at {args.flow_index}")
        print(f"next: nc resume {forked.run_id}")
    return 0


def cmd_trace(args) -> int:
    store = Project(_project_root(args)).store()
    try:
        entries = store.read_trace(args.run_id, args.view)
    except NcError as err:
        return _emit_error(args, err)
    lo = fi_key(args.from_fi) if args.from_fi else None
    hi = fi_key(args.to_fi) if args.to_fi else None
    for entry in entries:
        node = entry.get("node", "")
        key = fi_key(split_instance_id(node)[0]) if node else ()
        if lo is not None and key < lo:
            continue
        if hi is not None and key > hi:
            continue
        print(json.dumps(entry, sort_keys=True))
    return 0


def cmd_runs(args) -> int:
    store = Project(_project_root(args)).store()
    rows = store.list_runs()
    if args.json:
        print(json.dumps(rows, sort_keys=True))
        return 0
    if not rows:
        print("(no runs)")
        return 0
    for row in rows:
        print(f"{row['run_id']}  {row.get('status', '?')}  {row.get('created_at', '')}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import build_app

    root = Path(args.root) if args.root else _project_root(args)
    ui = args.ui or os.environ.get("NC_UI_DIR")
    app = build_app(Library(root), ui_dir=Path(ui) if ui else None)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


# -- argument wiring -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nc", description="Compile and run scoped workflow plans."
    )
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--project", help="project directory (default: $NC_PROJECT_ROOT or cwd)")
        p.add_argument("--json", action="store_true", help="machine-readable output")

    p = sub.add_parser("compile", help="compile a plan and write its artifacts")
    p.add_argument("plan", nargs="?", help="path to a .ncds file (default: project plan)")
    common(p)
    p.set_defaults(func=cmd_compile)

    p = sub.add_parser("narrate", help="print the plan narrative")
    p.add_argument("plan", nargs="?")
    common(p)
    p.set_defaults(func=cmd_narrate)

    p = sub.add_parser("stats", help="semantic/syntactic node counts")
    p.add_argument("plan", nargs="?")
    common(p)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("run", help="execute the project plan")
    p.add_argument("--input", action="append", metavar="NAME=JSON",
                   help="bind an input concept (JSON lists become one axis)")
    p.add_argument("--input-ref", action="append", metavar="NAME=PATH",
                   help="bind an input from a tensor JSON file")
    p.add_argument("--breakpoint", action="append", metavar="FLOW_INDEX",
                   help="pause before executing this node")
    p.add_argument("--agents", help="agent config path (default: project agents.json)")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("resume", help="continue a paused, seeded, or interrupted run")
    p.add_argument("run_id")
    p.add_argument("--clear", action="append", metavar="FLOW_INDEX",
                   help="clear this breakpoint (default: all paused nodes)")
    common(p)
    p.set_defaults(func=cmd_resume)

    p = sub.add_parser("inspect", help="render a checkpointed value")
    p.add_argument("run_id")
    p.add_argument("flow_index")
    p.add_argument("--view", choices=VIEWS, default="table")
    common(p)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("override", help="revise a value and seed a new run")
    p.add_argument("run_id")
    p.add_argument("flow_index")
    p.add_argument("--value", required=True,
                   help="replacement: a JSON file path or inline JSON")
    common(p)
    p.set_defaults(func=cmd_override)

    p = sub.add_parser("fork", help="new run from a checkpoint")
    p.add_argument("run_id")
    p.add_argument("flow_index")
    common(p)
    p.set_defaults(func=cmd_fork)

    p = sub.add_parser("trace", help="print a run's trace stream")
    p.add_argument("run_id")
    p.add_argument("--view", choices=("agent", "data", "orch"), default="orch")
    p.add_argument("--from", dest="from_fi", metavar="FLOW_INDEX",
                   help="lowest flow index to include")
    p.add_argument("--to", dest="to_fi", metavar="FLOW_INDEX",
                   help="highest flow index to include")
    common(p)
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("runs", help="list runs in the project store")
    common(p)
    p.set_defaults(func=cmd_runs)

    p = sub.add_parser("serve", help="start the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8321)
    p.add_argument("--root", help="library root (default: project root)")
    p.add_argument("--ui", help="static UI build to mount at /app (or $NC_UI_DIR)")
    common(p)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except NcError as err:
        return _emit_error(args, err)


if __name__ == "__main__":
    sys.exit(main())
