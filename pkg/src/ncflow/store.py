"""Per-project persistence: tensors, checkpoints, run manifests, traces.

Layout under the project root::

    store/objects/<digest>          canonical Reference bytes (write-once)
    store/checkpoints/<run>/<seq>.json
    store/events/<run>.jsonl
    store/traces/<run>/trace.{agent,data,orch}.jsonl
    store/outputs/<run>/            files written by the save built-in
    store/runs.json                 run manifests

Checkpoints delta-encode the concept snapshot: each file carries only the
digests added since the previous checkpoint, and loading folds the prefix.
Everything is schema-versioned JSON except object files, which are the raw
canonical bytes their digest names.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

from .errors import NotFoundError, StorageError
from .events import RunEvent, append_event, read_events
from .refs import Reference, canonical_json_bytes

logger = logging.getLogger(__name__)

SCHEMA = "nc/1"


class TensorStore:
    """Content-addressed store of canonical Reference bytes."""

    def __init__(self, objects_dir: Union[str, Path]):
        self.objects_dir = Path(objects_dir)
        self.objects_dir.mkdir(parents=True, exist_ok=True)

    def put(self, ref: Reference) -> str:
        digest = ref.digest()
        path = self.objects_dir / digest
        if path.exists():
            return digest
        tmp = path.with_suffix(".tmp-%d" % os.getpid())
        try:
            tmp.write_bytes(ref.canonical_bytes())
            os.replace(tmp, path)
        except OSError as exc:
            raise StorageError(f"cannot store object {digest}: {exc}")
        return digest

    def get(self, digest: str) -> Reference:
        path = self.objects_dir / digest
        if not path.exists():
            raise NotFoundError(f"no stored object {digest}")
        ref = Reference.from_bytes(path.read_bytes())
        if ref.digest() != digest:
            raise StorageError(f"object {digest} fails digest verification")
        return ref

    def has(self, digest: str) -> bool:
        return (self.objects_dir / digest).exists()

    def count(self) -> int:
        return sum(1 for p in self.objects_dir.iterdir() if not p.name.startswith("."))


@dataclass
class Checkpoint:
    """A Level-1 case: run, node, statuses, and the concept snapshot."""

    run_id: str
    seq: int
    flow_index: str
    blackboard: dict[str, str]
    concept_digests: dict[str, str]
    env_digests: dict[str, str] = field(default_factory=dict)
    ts: float = 0.0


class CaseStore:
    """All durable state for one project directory."""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)
        self.store_dir = self.root / "store"
        self.tensors = TensorStore(self.store_dir / "objects")
        self._runs_lock = threading.Lock()
        for sub in ("checkpoints", "events", "traces", "outputs"):
            (self.store_dir / sub).mkdir(parents=True, exist_ok=True)

    # -- run manifests ---------------------------------------------------

    @property
    def runs_path(self) -> Path:
        return self.store_dir / "runs.json"

    def _read_runs(self) -> dict:
        if not self.runs_path.exists():
            return {"schema": SCHEMA, "runs": {}}
        return json.loads(self.runs_path.read_text("utf-8"))

    def _write_runs(self, doc: dict) -> None:
        tmp = self.runs_path.with_suffix(".tmp-%d" % os.getpid())
        tmp.write_bytes(canonical_json_bytes(doc) + b"\n")
        os.replace(tmp, self.runs_path)

    def put_run(self, manifest: dict) -> None:
        with self._runs_lock:
            doc = self._read_runs()
            doc["runs"][manifest["run_id"]] = manifest
            self._write_runs(doc)

    def update_run(self, run_id: str, **fields) -> None:
        with self._runs_lock:
            doc = self._read_runs()
            if run_id not in doc["runs"]:
                raise NotFoundError(f"no run {run_id}")
            doc["runs"][run_id].update(fields)
            self._write_runs(doc)

    def get_run(self, run_id: str) -> dict:
        doc = self._read_runs()
        if run_id not in doc["runs"]:
            raise NotFoundError(f"no run {run_id}")
        return doc["runs"][run_id]

    def list_runs(self) -> list[dict]:
        doc = self._read_runs()
        return sorted(doc["runs"].values(), key=lambda m: m.get("created_at", 0))

    # -- checkpoints -------------------------------------------------------

    def _ckpt_dir(self, run_id: str) -> Path:
        return self.store_dir / "checkpoints" / run_id

    def retain(
        self,
        run_id: str,
        seq: int,
        flow_index: str,
        blackboard: dict[str, str],
        c_delta: dict[str, str],
        env_delta: Optional[dict[str, str]] = None,
    ) -> int:
        path = self._ckpt_dir(run_id)
        path.mkdir(parents=True, exist_ok=True)
        doc = {
            "schema": SCHEMA,
            "run_id": run_id,
            "seq": seq,
            "flow_index": flow_index,
            "ts": time.time(),
            "blackboard": blackboard,
            "c_delta": c_delta,
            "env_delta": env_delta or {},
        }
        target = path / f"{seq:06d}.json"
        if target.exists():
            raise StorageError(f"checkpoint {run_id}/{seq} already exists")
        tmp = target.with_suffix(".tmp-%d" % os.getpid())
        try:
            tmp.write_bytes(canonical_json_bytes(doc) + b"\n")
            os.replace(tmp, target)
        except OSError as exc:
            raise StorageError(f"cannot retain checkpoint {run_id}/{seq}: {exc}")
        return seq

    def _read_ckpt(self, run_id: str, seq: int) -> dict:
        path = self._ckpt_dir(run_id) / f"{seq:06d}.json"
        if not path.exists():
            raise NotFoundError(f"no checkpoint {run_id}/{seq}")
        return json.loads(path.read_text("utf-8"))

    def checkpoint_seqs(self, run_id: str) -> list[int]:
        path = self._ckpt_dir(run_id)
        if not path.exists():
            return []
        return sorted(int(p.stem) for p in path.glob("*.json"))

    def load_checkpoint(self, run_id: str, seq: int) -> Checkpoint:
        """Materialize C and E at ``seq`` by folding the delta prefix."""
        seqs = [s for s in self.checkpoint_seqs(run_id) if s <= seq]
        if not seqs or seqs[-1] != seq:
            raise NotFoundError(f"no checkpoint {run_id}/{seq}")
        concept: dict[str, str] = {}
        env: dict[str, str] = {}
        last = None
        for s in seqs:
            last = self._read_ckpt(run_id, s)
            concept.update(last["c_delta"])
            env.update(last["env_delta"])
        return Checkpoint(
            run_id=run_id,
            seq=seq,
            flow_index=last["flow_index"],
            blackboard=last["blackboard"],
            concept_digests=concept,
            env_digests=env,
            ts=last["ts"],
        )

    def find_checkpoint(self, run_id: str, flow_index: str) -> Checkpoint:
        """The checkpoint taken when ``flow_index`` completed (latest if several)."""
        found = None
        for s in self.checkpoint_seqs(run_id):
            doc = self._read_ckpt(run_id, s)
            if doc["flow_index"] == flow_index:
                found = s
        if found is None:
            raise NotFoundError(f"no checkpoint for {flow_index!r} in run {run_id}")
        return self.load_checkpoint(run_id, found)

    def last_checkpoint(self, run_id: str) -> Optional[Checkpoint]:
        seqs = self.checkpoint_seqs(run_id)
        if not seqs:
            return None
        return self.load_checkpoint(run_id, seqs[-1])

    def list_cases(
        self,
        run_id: Optional[str] = None,
        flow_index: Optional[str] = None,
        since: Optional[float] = None,
    ) -> list[dict]:
        """Checkpoint summaries across runs, in completion order."""
        run_ids = [run_id] if run_id else [m["run_id"] for m in self.list_runs()]
        rows = []
        for rid in run_ids:
            for s in self.checkpoint_seqs(rid):
                doc = self._read_ckpt(rid, s)
                if flow_index and doc["flow_index"] != flow_index:
                    continue
                if since and doc["ts"] < since:
                    continue
                statuses = doc["blackboard"].values()
                rows.append(
                    {
                        "run_id": rid,
                        "seq": s,
                        "flow_index": doc["flow_index"],
                        "ts": doc["ts"],
                        "status_counts": {
                            status: sum(1 for v in statuses if v == status)
                            for status in sorted(set(statuses))
                        },
                    }
                )
        rows.sort(key=lambda r: (r["ts"], r["run_id"], r["seq"]))
        return rows

    # -- events ------------------------------------------------------------

    def events_path(self, run_id: str) -> Path:
        return self.store_dir / "events" / f"{run_id}.jsonl"

    def append_event(self, event: RunEvent) -> None:
        append_event(self.events_path(event.run_id), event)

    def read_events(self, run_id: str, since: int = 0) -> list[RunEvent]:
        return [e for e in read_events(self.events_path(run_id)) if e.seq > since]

    # -- traces -------------------------------------------------------------

    def trace_dir(self, run_id: str) -> Path:
        return self.store_dir / "traces" / run_id

    def trace_path(self, run_id: str, stream: str) -> Path:
        if stream not in ("agent", "data", "orch"):
            raise NotFoundError(f"unknown trace stream {stream!r}")
        return self.trace_dir(run_id) / f"trace.{stream}.jsonl"

    def append_trace(self, run_id: str, stream: str, entry: dict) -> None:
        path = self.trace_path(run_id, stream)
        path.parent.mkdir(parents=True, exist_ok=True)
        doc = {"schema": SCHEMA, **entry}
        payload = json.dumps(doc, ensure_ascii=False) + "\n"
        with path.open("ab") as fh:
            fh.write(payload.encode("utf-8"))

    def read_trace(self, run_id: str, stream: str) -> list[dict]:
        path = self.trace_path(run_id, stream)
        if not path.exists():
            return []
        # like the event journal, an unterminated final line is an append
        # still in flight and is skipped until its newline lands
        lines = path.read_bytes().split(b"\n")
        return [json.loads(line) for line in lines[:-1] if line.strip()]

    # -- outputs -------------------------------------------------------------

    def outputs_dir(self, run_id: str) -> Path:
        path = self.store_dir / "outputs" / run_id
        path.mkdir(parents=True, exist_ok=True)
        return path
