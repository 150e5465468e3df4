"""Project directories: plan source, compiled artifacts, agents, run store.

A project is a plain directory. ``plan.ncds`` is the only required file;
everything else appears as the toolchain produces it:

    plan.ncds             the source
    plan.ncd              compiled plan (JSON, includes the source map)
    plan.ncn              the narrative rendering
    inference_repo.json   activation repo: derivations
    concept_repo.json     activation repo: concepts and signs
    agents.json           agent bindings (optional)
    provisions.json       named resources for prov:// signs (optional)
    project.json          identity manifest (optional; created by the library)
    store/                runs, checkpoints, tensors, traces
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import secrets
from dataclasses import replace
from pathlib import Path
from typing import Optional, Union

from .agents import AgentSetup, load_agent_setup
from .compiler import (
    SCHEMA,
    CompiledPlan,
    PlanBundle,
    activate,
    compile_plan,
    generate_narrative,
    ncd_document,
    plan_from_bundle,
)
from .errors import AgentError, NotFoundError, StorageError
from .store import CaseStore

ARTIFACT_NAMES = ("plan.ncd", "plan.ncn", "inference_repo.json", "concept_repo.json")


def _utcnow() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def source_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def load_agents_doc(path: Union[str, Path]) -> dict:
    """Read an agent config, resolving fixture paths to absolute paths.

    Resolution happens at load time so the document can be stored in a run
    manifest and still work when the run is reloaded from elsewhere.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text("utf-8"))
    except OSError as exc:
        raise AgentError(f"agent config {path}: {exc}") from exc
    except ValueError as exc:
        raise AgentError(f"agent config {path} is not JSON: {exc}") from exc
    for item in doc.get("agents", []):
        fixture = item.get("fixture")
        if fixture and not Path(fixture).is_absolute():
            item["fixture"] = str((path.parent / fixture).resolve())
    return doc


class Project:
    """One plan and everything attached to it, rooted at a directory."""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)

    # -- layout -------------------------------------------------------------

    @property
    def source_path(self) -> Path:
        return self.root / "plan.ncds"

    @property
    def ncd_path(self) -> Path:
        return self.root / "plan.ncd"

    @property
    def ncn_path(self) -> Path:
        return self.root / "plan.ncn"

    @property
    def inference_repo_path(self) -> Path:
        return self.root / "inference_repo.json"

    @property
    def concept_repo_path(self) -> Path:
        return self.root / "concept_repo.json"

    @property
    def agents_path(self) -> Path:
        return self.root / "agents.json"

    @property
    def provisions_path(self) -> Path:
        return self.root / "provisions.json"

    @property
    def manifest_path(self) -> Path:
        return self.root / "project.json"

    @property
    def store_dir(self) -> Path:
        # CaseStore nests its data under <root>/store
        return self.root / "store"

    def exists(self) -> bool:
        return self.source_path.is_file()

    @property
    def project_id(self) -> str:
        manifest = self.manifest()
        if manifest and manifest.get("id"):
            return str(manifest["id"])
        return self.root.name

    def manifest(self) -> Optional[dict]:
        if not self.manifest_path.is_file():
            return None
        return json.loads(self.manifest_path.read_text("utf-8"))

    @classmethod
    def init(
        cls,
        root: Union[str, Path],
        source: str,
        name: Optional[str] = None,
        project_id: Optional[str] = None,
    ) -> "Project":
        project = cls(root)
        if project.source_path.exists():
            raise StorageError(f"{project.source_path} already exists")
        project.root.mkdir(parents=True, exist_ok=True)
        project.source_path.write_text(source, "utf-8")
        project.manifest_path.write_text(
            json.dumps(
                {
                    "schema": SCHEMA,
                    "id": project_id or project.root.name,
                    "name": name or project.root.name,
                    "created_at": _utcnow(),
                },
                indent=2,
                sort_keys=True,
            )
            + "\n",
            "utf-8",
        )
        return project

    # -- attached configuration ----------------------------------------------

    def provisions(self) -> dict:
        if not self.provisions_path.is_file():
            return {}
        doc = json.loads(self.provisions_path.read_text("utf-8"))
        if not isinstance(doc, dict):
            raise StorageError(f"{self.provisions_path} must hold a JSON object")
        return doc

    def agents_doc(self) -> dict:
        """The agent config with fixture paths resolved to absolute paths."""
        if not self.agents_path.is_file():
            return {}
        return load_agents_doc(self.agents_path)

    def agent_setup(self) -> AgentSetup:
        return load_agent_setup(self.agents_doc(), self.root)

    def store(self) -> CaseStore:
        return CaseStore(self.root)

    # -- compilation ----------------------------------------------------------

    def read_source(self) -> str:
        if not self.source_path.is_file():
            raise NotFoundError(f"no plan.ncds under {self.root}")
        return self.source_path.read_text("utf-8")

    def is_stale(self) -> bool:
        """True when artifacts are missing or predate the current source."""
        if not all((self.root / n).is_file() for n in ARTIFACT_NAMES):
            return True
        doc = json.loads(self.ncd_path.read_text("utf-8"))
        return doc.get("source_digest") != source_digest(self.read_source())

    def compile(self) -> CompiledPlan:
        """Compile the source and write all four artifacts."""
        plan = compile_plan(self.read_source())
        doc = ncd_document(plan)
        self.ncd_path.write_text(
            json.dumps(doc, indent=2, sort_keys=True) + "\n", "utf-8"
        )
        self.ncn_path.write_text(generate_narrative(plan), "utf-8")
        self.inference_repo_path.write_text(
            json.dumps(plan.inference_repo(), indent=2, sort_keys=True) + "\n", "utf-8"
        )
        self.concept_repo_path.write_text(
            json.dumps(plan.concept_repo(), indent=2, sort_keys=True) + "\n", "utf-8"
        )
        return plan

    def load_plan(self) -> CompiledPlan:
        """The compiled plan, recompiling when artifacts are stale or absent."""
        if self.is_stale():
            return self.compile()
        doc = json.loads(self.ncd_path.read_text("utf-8"))
        bundle = PlanBundle(
            inference_repo=doc["inference_repo"],
            concept_repo=doc["concept_repo"],
            provisions={},
        )
        return replace(
            plan_from_bundle(bundle),
            source_digest=doc.get("source_digest", ""),
            _consumers={},
            _deps={},
        )

    def activate(self) -> PlanBundle:
        return activate(self.load_plan(), provisions=self.provisions())

    def narrative(self) -> bytes:
        if self.is_stale():
            self.compile()
        return self.ncn_path.read_bytes()


class Library:
    """A directory of projects; the service's plan collection."""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)

    def create(self, name: str, source: str) -> Project:
        self.root.mkdir(parents=True, exist_ok=True)
        project_id = f"p-{secrets.token_hex(6)}"
        return Project.init(
            self.root / project_id, source, name=name, project_id=project_id
        )

    def list(self) -> list[dict]:
        if not self.root.is_dir():
            return []
        out = []
        for child in sorted(self.root.iterdir()):
            project = Project(child)
            if not project.exists():
                continue
            manifest = project.manifest() or {}
            out.append(
                {
                    "id": project.project_id,
                    "name": manifest.get("name", project.root.name),
                    "created_at": manifest.get("created_at"),
                    "compiled": not project.is_stale(),
                }
            )
        return out

    def get(self, project_id: str) -> Project:
        for child in self.root.iterdir() if self.root.is_dir() else ():
            project = Project(child)
            if project.exists() and project.project_id == project_id:
                return project
        raise NotFoundError(f"no project {project_id!r} under {self.root}")
