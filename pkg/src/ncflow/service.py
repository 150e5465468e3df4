"""HTTP and WebSocket service over a library of projects.

Runs execute on daemon threads; POST endpoints that start work return
immediately and clients follow along by polling ``GET /runs/{id}/graph``,
backfilling ``GET /runs/{id}/events?since=``, or subscribing to the
``nc-events/1`` WebSocket. All durable state lives in each project's store,
so anything the CLI started is visible here and vice versa.
"""

from __future__ import annotations

import asyncio
import json
import logging
import threading
from pathlib import Path
from typing import Optional

from fastapi import Body, FastAPI, Query, Request, WebSocket, WebSocketDisconnect
from fastapi.responses import JSONResponse, PlainTextResponse, Response
from fastapi.staticfiles import StaticFiles

from .agents import load_agent_setup
from .compiler import PlanBundle, fi_key, plan_from_bundle
from .errors import (
    CompileError,
    DuplicateAxisError,
    NcError,
    NotFoundError,
    PlanSyntaxError,
    ShapeMismatchError,
    UnknownAxisError,
)
from .events import EVENTS_SCHEMA, RUN_FINISHED
from .project import Library, Project
from .refs import Reference, scalar, stack
from .render import VIEWS, render_reference
from .runtime import (
    Status,
    fork_run,
    instance_key,
    load_run,
    override_run,
    snapshot_run,
    split_instance_id,
    start_run,
)
from .store import CaseStore

logger = logging.getLogger(__name__)

WS_SUBPROTOCOL = EVENTS_SCHEMA
_UNPROCESSABLE = (
    CompileError,
    PlanSyntaxError,
    ShapeMismatchError,
    UnknownAxisError,
    DuplicateAxisError,
)


def _value_to_reference(value, axis: str) -> Reference:
    if isinstance(value, dict) and value.get("schema") == "nc-ref/1":
        return Reference.from_json(value)
    if isinstance(value, list):
        return stack([scalar(item) for item in value], axis)
    return scalar(value)


class _Runtime:
    """Service-side run registry: stores, worker threads, project lookup."""

    def __init__(self, library: Library):
        self.library = library
        self._stores: dict[Path, CaseStore] = {}
        self._projects: dict[str, Path] = {}
        self._workers: dict[str, threading.Thread] = {}
        self._lock = threading.Lock()

    def store_for(self, project: Project) -> CaseStore:
        root = project.root.resolve()
        with self._lock:
            if root not in self._stores:
                self._stores[root] = CaseStore(root)
            self._projects.setdefault(project.project_id, root)
            return self._stores[root]

    def find_run(self, run_id: str) -> tuple[Project, CaseStore]:
        with self._lock:
            for root, store in self._stores.items():
                try:
                    store.get_run(run_id)
                    return Project(root), store
                except NotFoundError:
                    pass
        for entry in self.library.list():
            project = self.library.get(entry["id"])
            store = self.store_for(project)
            try:
                store.get_run(run_id)
                return project, store
            except NotFoundError:
                pass
        raise NotFoundError(f"no run {run_id!r} in any project")

    def is_live(self, run_id: str) -> bool:
        with self._lock:
            worker = self._workers.get(run_id)
            return worker is not None and worker.is_alive()

    def launch(self, run_id: str, target) -> None:
        def work():
            try:
                target()
            except Exception:
                logger.exception("run %s crashed", run_id)

        worker = threading.Thread(target=work, name=f"run-{run_id}", daemon=True)
        with self._lock:
            self._workers[run_id] = worker
        worker.start()


def _error_response(status: int, err: NcError) -> JSONResponse:
    return JSONResponse({"error": err.to_json()}, status_code=status)


def _conflict(message: str) -> JSONResponse:
    return JSONResponse(
        {"error": {"code": "conflict", "message": message}}, status_code=409
    )


def build_app(library: Library, ui_dir: Optional[Path] = None) -> FastAPI:
    app = FastAPI(title="nc service", version="1.0")
    rt = _Runtime(library)
    app.state.runtime = rt

    @app.exception_handler(NcError)
    async def handle_nc_error(request: Request, err: NcError):
        if isinstance(err, NotFoundError):
            return _error_response(404, err)
        if isinstance(err, _UNPROCESSABLE):
            return _error_response(422, err)
        return _error_response(400, err)

    # -- projects -----------------------------------------------------------

    @app.post("/projects", status_code=201)
    def create_project(body: dict = Body(...)):
        name = body.get("name")
        source = body.get("source")
        if not name or not isinstance(source, str):
            raise NcError("body must carry 'name' and 'source'")
        project = library.create(name, source)
        manifest = project.manifest() or {}
        return {
            "id": project.project_id,
            "name": manifest.get("name"),
            "created_at": manifest.get("created_at"),
        }

    @app.get("/projects")
    def list_projects():
        return {"projects": library.list()}

    @app.post("/projects/{project_id}/compile")
    def compile_project(project_id: str):
        project = library.get(project_id)
        plan = project.compile()
        return {
            "artifacts": ["plan.ncd", "plan.ncn", "inference_repo.json", "concept_repo.json"],
            "stats": plan.stats,
        }

    @app.get("/projects/{project_id}/narrative")
    def project_narrative(project_id: str):
        project = library.get(project_id)
        return PlainTextResponse(project.narrative(), media_type="text/plain; charset=utf-8")

    @app.post("/projects/{project_id}/runs", status_code=202)
    def start_project_run(project_id: str, body: dict = Body(default={})):
        project = library.get(project_id)
        store = rt.store_for(project)
        bundle = project.activate()
        agents_doc = body.get("agents") or project.agents_doc()
        setup = load_agent_setup(agents_doc, project.root)
        inputs = {
            name: _value_to_reference(value, axis=name)
            for name, value in (body.get("inputs") or {}).items()
        }
        run = start_run(
            store,
            bundle,
            agents=setup,
            inputs=inputs,
            breakpoints=set(body.get("breakpoints") or ()),
            agents_doc=agents_doc,
        )
        rt.launch(run.run_id, run.execute)
        return {"run_id": run.run_id, "status": "accepted"}

    # -- runs ---------------------------------------------------------------

    @app.get("/runs")
    def list_runs():
        rows = []
        for entry in library.list():
            project = library.get(entry["id"])
            store = rt.store_for(project)
            for row in store.list_runs():
                rows.append({"project_id": entry["id"], **row})
        return {"runs": rows}

    @app.get("/runs/{run_id}/graph")
    def run_graph(run_id: str):
        _, store = rt.find_run(run_id)
        run = snapshot_run(store, run_id)
        manifest = store.get_run(run_id)
        nodes = []
        for iid in sorted(run.instances, key=instance_key):
            inst = run.instances[iid]
            node = run.plan.nodes[inst.template]
            nodes.append(
                {
                    "id": iid,
                    "template": inst.template,
                    "role": inst.role,
                    "concept": node.concept_name,
                    "kind": node.kind,
                    "deps": list(inst.deps),
                    "status": run.blackboard.get(iid, Status.PENDING),
                }
            )
        return {
            "run_id": run_id,
            "status": manifest.get("status"),
            "live": rt.is_live(run_id),
            "nodes": nodes,
        }

    @app.get("/runs/{run_id}/checkpoints")
    def run_checkpoints(run_id: str):
        _, store = rt.find_run(run_id)
        out = []
        for seq in store.checkpoint_seqs(run_id):
            ckpt = store.load_checkpoint(run_id, seq)
            out.append({"seq": seq, "flow_index": ckpt.flow_index, "ts": ckpt.ts})
        return {"run_id": run_id, "checkpoints": out}

    @app.get("/runs/{run_id}/checkpoints/{flow_index}/tensor")
    def checkpoint_tensor(run_id: str, flow_index: str, view: str = Query("json")):
        if view not in VIEWS:
            raise NcError(f"unknown view {view!r}; expected one of {', '.join(VIEWS)}")
        _, store = rt.find_run(run_id)
        ckpt = store.find_checkpoint(run_id, flow_index)
        digest = ckpt.concept_digests.get(flow_index)
        if digest is None:
            raise NotFoundError(
                f"checkpoint {ckpt.seq} holds no value for {flow_index}"
            )
        ref = store.tensors.get(digest)
        doc = {"run_id": run_id, "flow_index": flow_index, "view": view, "seq": ckpt.seq}
        if view == "json":
            doc["reference"] = ref.to_json()
        else:
            doc["text"] = render_reference(ref, view=view)
        return doc

    @app.post("/runs/{run_id}/checkpoints/{flow_index}/override")
    def override_checkpoint(run_id: str, flow_index: str, body: dict = Body(...)):
        if "value" not in body:
            raise NcError("body must carry 'value'")
        _, store = rt.find_run(run_id)
        if rt.is_live(run_id):
            return _conflict(f"run {run_id} is still executing")
        manifest = store.get_run(run_id)
        plan = plan_from_bundle(PlanBundle.from_json(manifest["bundle"]))
        template, _ = split_instance_id(flow_index)
        node = plan.nodes.get(template)
        value = _value_to_reference(
            body["value"], axis=node.concept_name if node else template
        )
        agents_doc = manifest.get("agents_doc") or {}
        revised = override_run(
            store,
            run_id,
            flow_index,
            value,
            agents=load_agent_setup(agents_doc, Path.cwd()),
            agents_doc=agents_doc,
        )
        seeded = store.get_run(revised.run_id)
        return {"run_id": revised.run_id, "stale": seeded["seed_from"]["stale"]}

    @app.post("/runs/{run_id}/checkpoints/{flow_index}/fork")
    def fork_checkpoint(run_id: str, flow_index: str):
        _, store = rt.find_run(run_id)
        manifest = store.get_run(run_id)
        agents_doc = manifest.get("agents_doc") or {}
        forked = fork_run(
            store,
            run_id,
            flow_index,
            agents=load_agent_setup(agents_doc, Path.cwd()),
            agents_doc=agents_doc,
        )
        return {"run_id": forked.run_id}

    @app.post("/runs/{run_id}/resume", status_code=202)
    def resume_run(run_id: str, body: dict = Body(default={})):
        _, store = rt.find_run(run_id)
        if rt.is_live(run_id):
            return _conflict(f"run {run_id} is already executing")
        manifest = store.get_run(run_id)
        if manifest.get("status") in ("completed", "failed"):
            return _conflict(f"run {run_id} already finished: {manifest['status']}")
        agents_doc = manifest.get("agents_doc") or {}
        run = load_run(store, run_id, agents=load_agent_setup(agents_doc, Path.cwd()))
        clear = body.get("clear")

        def work():
            if any(s == Status.PAUSED for s in run.blackboard.values()):
                run.resume(clear=set(clear) if clear else None)
            else:
                run.execute()

        rt.launch(run_id, work)
        return {"run_id": run_id, "status": "accepted"}

    @app.get("/runs/{run_id}/trace/{stream}")
    def run_trace(
        run_id: str,
        stream: str,
        from_fi: Optional[str] = Query(None, alias="from"),
        to_fi: Optional[str] = Query(None, alias="to"),
    ):
        if stream not in ("agent", "data", "orch"):
            raise NotFoundError(f"no trace stream {stream!r}")
        _, store = rt.find_run(run_id)
        lo = fi_key(from_fi) if from_fi else None
        hi = fi_key(to_fi) if to_fi else None
        entries = []
        for entry in store.read_trace(run_id, stream):
            node = entry.get("node", "")
            key = fi_key(split_instance_id(node)[0]) if node else ()
            if lo is not None and key < lo:
                continue
            if hi is not None and key > hi:
                continue
            entries.append(entry)
        return {"run_id": run_id, "stream": stream, "entries": entries}

    @app.get("/runs/{run_id}/events")
    def run_events(run_id: str, since: int = Query(0)):
        _, store = rt.find_run(run_id)
        return {
            "run_id": run_id,
            "events": [e.to_json() for e in store.read_events(run_id, since=since)],
        }

    @app.websocket("/runs/{run_id}/events/ws")
    async def run_events_ws(ws: WebSocket, run_id: str, since: int = Query(0)):
        try:
            _, store = rt.find_run(run_id)
        except NotFoundError:
            await ws.accept()
            await ws.close(code=4404, reason=f"no run {run_id}")
            return
        offered = ws.headers.get("sec-websocket-protocol", "")
        subprotocol = WS_SUBPROTOCOL if WS_SUBPROTOCOL in offered else None
        await ws.accept(subprotocol=subprotocol)
        cursor = since
        finished = False
        try:
            while True:
                events = store.read_events(run_id, since=cursor)
                for event in events:
                    await ws.send_text(json.dumps(event.to_json(), sort_keys=True))
                    cursor = event.seq
                    if event.kind == RUN_FINISHED:
                        finished = True
                if finished:
                    await ws.close()
                    return
                await asyncio.sleep(0.05)
        except WebSocketDisconnect:
            return

    @app.get("/healthz")
    def health():
        return {"status": "ok"}

    if ui_dir is not None and Path(ui_dir).is_dir():
        app.mount("/app", StaticFiles(directory=str(ui_dir), html=True), name="app")
    else:

        @app.get("/app")
        def no_ui():
            return Response(
                "no UI build is configured; start with --ui <dir>",
                media_type="text/plain",
                status_code=404,
            )

    return app
