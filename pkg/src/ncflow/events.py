"""Run events: the append-only journal every run writes as it progresses.

Events are the source of truth for run state reconstruction and for live
subscribers (the WebSocket feed replays and then follows this journal).
Folding a run's events yields exactly the final node-status map, which the
test suite asserts against the in-memory blackboard.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Union

EVENTS_SCHEMA = "nc-events/1"

STATUS_CHANGED = "StatusChanged"
CHECKPOINT_RETAINED = "CheckpointRetained"
TRACE_APPENDED = "TraceAppended"
RUN_FINISHED = "RunFinished"

KINDS = (STATUS_CHANGED, CHECKPOINT_RETAINED, TRACE_APPENDED, RUN_FINISHED)


@dataclass
class RunEvent:
    run_id: str
    seq: int
    kind: str
    payload: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "schema": EVENTS_SCHEMA,
            "run_id": self.run_id,
            "seq": self.seq,
            "kind": self.kind,
            "payload": self.payload,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "RunEvent":
        return cls(
            run_id=doc["run_id"],
            seq=doc["seq"],
            kind=doc["kind"],
            payload=doc.get("payload", {}),
        )


def fold_events(events: Iterable[RunEvent]) -> dict[str, str]:
    """Replay status changes into a node → status map."""
    statuses: dict[str, str] = {}
    for event in events:
        if event.kind == STATUS_CHANGED:
            statuses[event.payload["node"]] = event.payload["status"]
    return statuses


def final_status(events: Iterable[RunEvent]) -> Union[str, None]:
    last = None
    for event in events:
        if event.kind == RUN_FINISHED:
            last = event.payload.get("status")
    return last


def read_events(path: Union[str, Path]) -> list[RunEvent]:
    path = Path(path)
    if not path.exists():
        return []
    events = []
    lines = path.read_bytes().split(b"\n")
    # a non-empty final element is a line another writer has not finished
    # appending; it only counts once its newline lands
    for line in lines[:-1]:
        if line.strip():
            events.append(RunEvent.from_json(json.loads(line)))
    return events


def append_event(path: Union[str, Path], event: RunEvent) -> None:
    payload = json.dumps(event.to_json(), ensure_ascii=False) + "\n"
    with Path(path).open("ab") as fh:
        fh.write(payload.encode("utf-8"))
