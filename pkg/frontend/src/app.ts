// Single-page client: project list, narrative review, graph canvas with
// breakpoints, checkpoint browser, detail panel, trace views. State lives
// on the server; this file is rendering and wiring only.

import { ApiError, Client } from "./api";
import { RunEventFeed } from "./events";
import {
  ApprovalStore,
  PositionStore,
  STATUS_COLORS,
  compareInstanceIds,
  isReferenceDoc,
  layoutGraph,
  shapeSummary,
  splitInstanceId,
  validateReference,
} from "./model";
import type {
  GraphNode,
  RunGraph,
  TensorDoc,
  TensorView,
  TraceEntry,
  TraceStream,
} from "./types";

const client = new Client("");
const approvals = new ApprovalStore();
const positions = new PositionStore();

const root = document.getElementById("app") as HTMLElement;

function el(html: string): HTMLElement {
  const template = document.createElement("template");
  template.innerHTML = html.trim();
  return template.content.firstElementChild as HTMLElement;
}

function esc(text: unknown): string {
  return String(text)
    .replaceAll("&", "&amp;")
    .replaceAll("<", "&lt;")
    .replaceAll(">", "&gt;")
    .replaceAll('"', "&quot;");
}

function errorBanner(err: unknown): HTMLElement {
  if (err instanceof ApiError) {
    const diags = (err.body.diagnostics ?? [])
      .map(
        (d) =>
          `<li><code>${esc(d.code)}</code> line ${d.line ?? "?"}: ${esc(d.message)}</li>`,
      )
      .join("");
    return el(
      `<div class="banner error"><strong>${esc(err.code)}</strong> ${esc(
        err.message,
      )}${diags ? `<ul>${diags}</ul>` : ""}</div>`,
    );
  }
  return el(`<div class="banner error">${esc(err)}</div>`);
}

function flash(parent: HTMLElement, node: HTMLElement): void {
  parent.prepend(node);
  setTimeout(() => node.remove(), 8000);
}

// -- projects page -------------------------------------------------------------

async function renderProjects(): Promise<void> {
  root.replaceChildren(el(`<div class="page"><h1>Projects</h1><div id="list">loading</div>
    <form id="create" class="card">
      <h2>New project</h2>
      <input name="name" placeholder="name" required>
      <textarea name="source" rows="12" placeholder="plan text" required></textarea>
      <button>Create</button>
    </form></div>`));
  const page = root.firstElementChild as HTMLElement;
  const list = page.querySelector("#list") as HTMLElement;

  async function refresh(): Promise<void> {
    const projects = await client.listProjects();
    if (!projects.length) {
      list.replaceChildren(el(`<p class="dim">no projects yet</p>`));
      return;
    }
    const rows = projects
      .map(
        (p) => `<tr>
          <td><a href="#/project/${esc(p.id)}">${esc(p.name)}</a></td>
          <td class="dim">${esc(p.id)}</td>
          <td>${p.compiled ? "compiled" : "stale"}</td>
          <td><button data-compile="${esc(p.id)}">Compile</button></td>
        </tr>`,
      )
      .join("");
    list.replaceChildren(
      el(`<table><tr><th>name</th><th>id</th><th>state</th><th></th></tr>${rows}</table>`),
    );
    for (const button of list.querySelectorAll<HTMLButtonElement>("[data-compile]")) {
      button.onclick = async () => {
        try {
          await client.compileProject(button.dataset.compile as string);
          await refresh();
        } catch (err) {
          flash(page, errorBanner(err));
        }
      };
    }
  }

  (page.querySelector("#create") as HTMLFormElement).onsubmit = async (submit) => {
    submit.preventDefault();
    const form = submit.target as HTMLFormElement;
    const data = new FormData(form);
    try {
      const project = await client.createProject(
        String(data.get("name")),
        String(data.get("source")),
      );
      location.hash = `#/project/${project.id}`;
    } catch (err) {
      flash(page, errorBanner(err));
    }
  };
  await refresh();
}

// -- project page: narrative gate and run form ----------------------------------

async function renderProject(projectId: string, draftBreakpoints = ""): Promise<void> {
  root.replaceChildren(el(`<div class="page">
    <h1>${esc(projectId)}</h1>
    <p><a href="#/projects">all projects</a></p>
    <div class="card"><h2>Narrative</h2>
      <pre id="narrative" class="narrative">loading</pre>
      <div id="gate"></div>
    </div>
    <form id="run" class="card">
      <h2>Start a run</h2>
      <label>inputs (JSON object)</label>
      <textarea name="inputs" rows="4">{}</textarea>
      <label>breakpoints (comma separated flow indexes)</label>
      <input name="breakpoints" placeholder="1.2.2.2" value="${esc(draftBreakpoints)}">
      <button id="start" disabled>Run</button>
      <span class="dim" id="why"></span>
    </form>
    <div class="card"><h2>Runs</h2><div id="runs">loading</div></div>
  </div>`));
  const page = root.firstElementChild as HTMLElement;

  let narrative = "";
  try {
    await client.compileProject(projectId);
    narrative = await client.narrative(projectId);
  } catch (err) {
    flash(page, errorBanner(err));
  }
  (page.querySelector("#narrative") as HTMLElement).textContent = narrative;

  const gate = page.querySelector("#gate") as HTMLElement;
  const start = page.querySelector("#start") as HTMLButtonElement;
  const why = page.querySelector("#why") as HTMLElement;

  function renderGate(): void {
    if (approvals.approved(projectId, narrative)) {
      gate.replaceChildren(el(`<p class="ok">narrative approved for this source</p>`));
      start.disabled = false;
      why.textContent = "";
    } else {
      const approve = el(`<button type="button">Approve narrative</button>`);
      approve.onclick = () => {
        approvals.approve(projectId, narrative);
        renderGate();
      };
      gate.replaceChildren(approve);
      start.disabled = true;
      why.textContent = "review and approve the narrative first";
    }
  }
  renderGate();

  (page.querySelector("#run") as HTMLFormElement).onsubmit = async (submit) => {
    submit.preventDefault();
    const data = new FormData(submit.target as HTMLFormElement);
    let inputs: Record<string, unknown>;
    try {
      inputs = JSON.parse(String(data.get("inputs")) || "{}");
    } catch (err) {
      flash(page, errorBanner(`inputs is not valid JSON: ${err}`));
      return;
    }
    const breakpoints = String(data.get("breakpoints") || "")
      .split(",")
      .map((s) => s.trim())
      .filter(Boolean);
    try {
      const started = await client.startRun(projectId, { inputs, breakpoints });
      location.hash = `#/run/${started.run_id}`;
    } catch (err) {
      flash(page, errorBanner(err));
    }
  };

  const runsBox = page.querySelector("#runs") as HTMLElement;
  const runs = (await client.listRuns()).filter((r) => r.project_id === projectId);
  runsBox.replaceChildren(
    runs.length
      ? el(
          `<ul>${runs
            .map(
              (r) =>
                `<li><a href="#/run/${esc(r.run_id)}">${esc(r.run_id)}</a> <span class="dim">${esc(
                  r.status,
                )}</span></li>`,
            )
            .join("")}</ul>`,
        )
      : el(`<p class="dim">none yet</p>`),
  );
}

// -- run page: canvas, checkpoints, detail, traces -------------------------------

interface RunPageState {
  graph: RunGraph | null;
  feed: RunEventFeed | null;
  selected: string | null;
  view: TensorView;
  breakpointDraft: Set<string>;
}

async function renderRun(runId: string): Promise<void> {
  const state: RunPageState = {
    graph: null,
    feed: null,
    selected: null,
    view: "table",
    breakpointDraft: new Set(),
  };

  root.replaceChildren(el(`<div class="page run-page">
    <h1>run <code>${esc(runId)}</code> <span id="run-status" class="pill"></span></h1>
    <p><a href="#/projects">projects</a></p>
    <div class="columns">
      <div class="main">
        <div class="card"><h2>Graph</h2><div id="canvas" class="canvas"></div>
          <p class="dim">click a node to inspect its checkpoint; click its badge to toggle a breakpoint for the next run</p>
          <div id="bp-draft"></div>
          <div id="resume-controls"></div>
        </div>
        <div class="card"><h2>Traces</h2>
          <nav id="trace-tabs">
            <button data-stream="agent">agent</button>
            <button data-stream="data">data</button>
            <button data-stream="orch">orch</button>
          </nav>
          <div id="trace-range" class="dim" hidden>
            from <input id="trace-from" size="8"> to <input id="trace-to" size="8">
            <button id="trace-apply">apply</button>
          </div>
          <div id="trace-body">pick a stream</div>
        </div>
      </div>
      <div class="side">
        <div class="card"><h2>Checkpoints</h2><div id="ckpts">loading</div></div>
        <div class="card"><h2>Detail</h2><div id="detail"><p class="dim">select a node</p></div></div>
      </div>
    </div>
  </div>`));
  const page = root.firstElementChild as HTMLElement;
  const statusPill = page.querySelector("#run-status") as HTMLElement;
  const canvas = page.querySelector("#canvas") as HTMLElement;
  const detail = page.querySelector("#detail") as HTMLElement;
  const ckpts = page.querySelector("#ckpts") as HTMLElement;
  const resumeControls = page.querySelector("#resume-controls") as HTMLElement;

  const runRow = (await client.listRuns()).find((r) => r.run_id === runId);
  const scope = runRow ? runRow.project_id : runId;
  if (Array.isArray(runRow?.breakpoints)) {
    for (const fi of runRow.breakpoints) state.breakpointDraft.add(String(fi));
  }

  async function reloadGraph(): Promise<void> {
    state.graph = await client.graph(runId);
    statusPill.textContent = state.graph.status + (state.graph.live ? " (live)" : "");
    drawCanvas();
    drawResumeControls();
  }

  function drawCanvas(): void {
    if (!state.graph) return;
    const layout = layoutGraph(state.graph.nodes, positions, scope);
    const edges = layout.edges
      .map((edge) => {
        const from = layout.nodes.find((n) => n.id === edge.from);
        const to = layout.nodes.find((n) => n.id === edge.to);
        if (!from || !to) return "";
        return `<line x1="${from.x + 72}" y1="${from.y + 20}" x2="${to.x}" y2="${
          to.y + 20
        }" class="edge"></line>`;
      })
      .join("");
    const nodes = layout.nodes
      .map((node) => {
        const color = STATUS_COLORS[node.status];
        const [template] = splitInstanceId(node.id);
        const bp = state.breakpointDraft.has(template) ? "●" : "○";
        return `<g class="node" data-id="${esc(node.id)}" transform="translate(${node.x},${node.y})">
          <rect width="144" height="40" rx="6" stroke="${color}"></rect>
          <text x="8" y="16" class="fi">${esc(node.id)}</text>
          <text x="8" y="31" class="concept">${esc(node.concept)}</text>
          <text x="128" y="16" class="badge" data-bp="${esc(template)}">${bp}</text>
          <circle cx="134" cy="30" r="5" fill="${color}"></circle>
        </g>`;
      })
      .join("");
    canvas.replaceChildren(
      el(
        `<svg viewBox="0 0 ${layout.width} ${layout.height}" width="${layout.width}" height="${layout.height}">${edges}${nodes}</svg>`,
      ),
    );

    const draftBar = page.querySelector("#bp-draft") as HTMLElement;
    if (state.breakpointDraft.size) {
      const drafted = [...state.breakpointDraft].sort(compareInstanceIds);
      const bar = el(`<p class="dim">drafted breakpoints: ${drafted
        .map((fi) => `<code>${esc(fi)}</code>`)
        .join(" ")} <button type="button">Start a new run with these</button></p>`);
      (bar.querySelector("button") as HTMLButtonElement).onclick = () => {
        location.hash = `#/project/${scope}?bp=${encodeURIComponent(drafted.join(","))}`;
      };
      draftBar.replaceChildren(bar);
    } else {
      draftBar.replaceChildren();
    }

    for (const group of canvas.querySelectorAll<SVGGElement>("g.node")) {
      const id = group.dataset.id as string;
      let moved = false;
      group.addEventListener("pointerdown", (down) => {
        const svg = canvas.querySelector("svg") as SVGSVGElement;
        const startX = down.clientX;
        const startY = down.clientY;
        const base = positions.get(scope, id) ?? {
          x: Number(/translate\((\d+\.?\d*),/.exec(group.getAttribute("transform") ?? "")?.[1] ?? 0),
          y: Number(/,(\d+\.?\d*)\)/.exec(group.getAttribute("transform") ?? "")?.[1] ?? 0),
        };
        moved = false;
        const onMove = (move: PointerEvent) => {
          const dx = move.clientX - startX;
          const dy = move.clientY - startY;
          if (Math.abs(dx) + Math.abs(dy) > 3) moved = true;
          group.setAttribute("transform", `translate(${base.x + dx},${base.y + dy})`);
        };
        const onUp = (up: PointerEvent) => {
          svg.removeEventListener("pointermove", onMove);
          svg.removeEventListener("pointerup", onUp);
          if (moved) {
            positions.set(scope, id, base.x + (up.clientX - startX), base.y + (up.clientY - startY));
          }
        };
        svg.addEventListener("pointermove", onMove);
        svg.addEventListener("pointerup", onUp);
      });
      group.addEventListener("click", (click) => {
        if (moved) return;
        const target = click.target as Element;
        if (target.classList.contains("badge")) {
          const template = target.getAttribute("data-bp") as string;
          if (state.breakpointDraft.has(template)) state.breakpointDraft.delete(template);
          else state.breakpointDraft.add(template);
          drawCanvas();
          return;
        }
        state.selected = id;
        void drawDetail();
      });
    }
  }

  function drawResumeControls(): void {
    if (!state.graph) return;
    const paused = state.graph.nodes.filter((n) => n.status === "PausedAtBreakpoint");
    if (state.graph.status !== "paused" || state.graph.live) {
      resumeControls.replaceChildren();
      return;
    }
    const templates = [...new Set(paused.map((n) => splitInstanceId(n.id)[0]))];
    const box = el(`<div class="resume">
      <p>paused at ${paused.map((n) => `<code>${esc(n.id)}</code>`).join(", ")}</p>
      <button id="step">Resume (step)</button>
      <button id="release">Resume and clear ${esc(templates.join(", "))}</button>
    </div>`);
    (box.querySelector("#step") as HTMLButtonElement).onclick = () => void doResume();
    (box.querySelector("#release") as HTMLButtonElement).onclick = () =>
      void doResume(templates);
    resumeControls.replaceChildren(box);
  }

  async function doResume(clear?: string[]): Promise<void> {
    try {
      await client.resume(runId, clear);
      followEvents();
    } catch (err) {
      flash(page, errorBanner(err));
    }
  }

  async function drawCheckpoints(): Promise<void> {
    const rows = await client.checkpoints(runId);
    if (!rows.length) {
      ckpts.replaceChildren(el(`<p class="dim">none retained yet</p>`));
      return;
    }
    ckpts.replaceChildren(
      el(
        `<table>${rows
          .map(
            (c) => `<tr>
              <td class="dim">${c.seq}</td>
              <td><a href="#" data-fi="${esc(c.flow_index)}">${esc(c.flow_index)}</a></td>
              <td><button data-fork="${esc(c.flow_index)}">Fork</button></td>
            </tr>`,
          )
          .join("")}</table>`,
      ),
    );
    for (const link of ckpts.querySelectorAll<HTMLAnchorElement>("[data-fi]")) {
      link.onclick = (click) => {
        click.preventDefault();
        state.selected = link.dataset.fi as string;
        void drawDetail();
      };
    }
    for (const button of ckpts.querySelectorAll<HTMLButtonElement>("[data-fork]")) {
      button.onclick = async () => {
        try {
          const forked = await client.fork(runId, button.dataset.fork as string);
          location.hash = `#/run/${forked.run_id}`;
        } catch (err) {
          flash(page, errorBanner(err));
        }
      };
    }
  }

  async function drawDetail(): Promise<void> {
    const id = state.selected;
    if (!id) return;
    const node = state.graph?.nodes.find((n) => n.id === id);
    const header = `<h3><code>${esc(id)}</code>${
      node ? ` <span class="dim">${esc(node.concept)} · ${esc(node.status)}</span>` : ""
    }</h3>`;

    if (node && node.status === "PausedAtBreakpoint") {
      // the node has not produced a value yet; show its assembled inputs
      const inputs = await Promise.all(
        node.deps.map(async (dep) => {
          try {
            const doc = await client.tensor(runId, dep, "list");
            return `<div class="input"><h4><code>${esc(dep)}</code></h4><pre>${esc(
              doc.text ?? "",
            )}</pre></div>`;
          } catch {
            return `<div class="input"><h4><code>${esc(dep)}</code></h4><p class="dim">no value yet</p></div>`;
          }
        }),
      );
      detail.replaceChildren(
        el(`<div>${header}<p class="dim">paused before execution; inputs:</p>${inputs.join("")}</div>`),
      );
      return;
    }

    let doc: TensorDoc;
    try {
      doc = await client.tensor(runId, id, state.view);
    } catch (err) {
      detail.replaceChildren(el(`<div>${header}</div>`));
      detail.append(errorBanner(err));
      return;
    }

    const tabs = (["table", "list", "json"] as TensorView[])
      .map(
        (view) =>
          `<button data-view="${view}"${view === state.view ? ' class="active"' : ""}>${view}</button>`,
      )
      .join("");
    const body =
      doc.view === "json"
        ? `<p class="dim">${esc(shapeSummary(doc.reference!))}</p><pre>${esc(
            JSON.stringify(doc.reference, null, 2),
          )}</pre>`
        : `<pre>${esc(doc.text ?? "")}</pre>`;

    const box = el(`<div>${header}
      <nav>${tabs}</nav>
      ${body}
      <details><summary>Override</summary>
        <textarea id="override-doc" rows="6" placeholder='"new value" or canonical reference JSON'></textarea>
        <div id="override-problems" class="problems"></div>
        <button id="override-submit">Override and seed revised run</button>
      </details>
    </div>`);

    for (const tab of box.querySelectorAll<HTMLButtonElement>("[data-view]")) {
      tab.onclick = () => {
        state.view = tab.dataset.view as TensorView;
        void drawDetail();
      };
    }

    const editor = box.querySelector("#override-doc") as HTMLTextAreaElement;
    const problems = box.querySelector("#override-problems") as HTMLElement;
    (box.querySelector("#override-submit") as HTMLButtonElement).onclick = async () => {
      let value: unknown;
      try {
        value = JSON.parse(editor.value);
      } catch {
        value = editor.value; // plain text is a scalar
      }
      if (isReferenceDoc(value)) {
        const found = validateReference(value);
        if (found.length) {
          problems.replaceChildren(
            el(`<ul>${found.map((p) => `<li>${esc(p)}</li>`).join("")}</ul>`),
          );
          return;
        }
      }
      problems.replaceChildren();
      try {
        const result = await client.override(runId, id, value);
        const go = el(`<div class="banner ok">seeded <code>${esc(result.run_id)}</code>,
          stale: ${result.stale.map((s) => `<code>${esc(s)}</code>`).join(" ")}
          <button>Resume it</button></div>`);
        (go.querySelector("button") as HTMLButtonElement).onclick = async () => {
          await client.resume(result.run_id);
          location.hash = `#/run/${result.run_id}`;
        };
        detail.prepend(go);
      } catch (err) {
        detail.prepend(errorBanner(err));
      }
    };

    detail.replaceChildren(box);
  }

  // -- traces -----------------------------------------------------------------

  const traceBody = page.querySelector("#trace-body") as HTMLElement;
  const traceRange = page.querySelector("#trace-range") as HTMLElement;
  let traceStream: TraceStream = "agent";

  function traceEntryHtml(entry: TraceEntry): string {
    if (traceStream === "agent") {
      return `<details><summary><code>${esc(entry.node ?? "")}</code> ${esc(
        entry.instruction ?? "",
      )}</summary><pre>${esc(JSON.stringify(entry, null, 2))}</pre></details>`;
    }
    return `<div class="trace-row"><code>${esc(entry.node ?? "")}</code> <span class="dim">${esc(
      JSON.stringify(entry),
    )}</span></div>`;
  }

  async function drawTrace(): Promise<void> {
    const from = (page.querySelector("#trace-from") as HTMLInputElement).value.trim();
    const to = (page.querySelector("#trace-to") as HTMLInputElement).value.trim();
    try {
      const entries = await client.trace(runId, traceStream, {
        from: from || undefined,
        to: to || undefined,
      });
      traceBody.innerHTML = entries.length
        ? entries.map(traceEntryHtml).join("")
        : `<p class="dim">empty</p>`;
    } catch (err) {
      traceBody.replaceChildren(errorBanner(err));
    }
  }

  for (const tab of page.querySelectorAll<HTMLButtonElement>("#trace-tabs button")) {
    tab.onclick = () => {
      traceStream = tab.dataset.stream as TraceStream;
      traceRange.hidden = traceStream !== "data";
      void drawTrace();
    };
  }
  (page.querySelector("#trace-apply") as HTMLButtonElement).onclick = () => void drawTrace();

  // -- live updates -------------------------------------------------------------

  function followEvents(): void {
    state.feed?.close();
    state.feed = new RunEventFeed(client, runId, {
      onEvent: (event) => {
        if (event.kind === "StatusChanged" && state.graph) {
          const node = state.graph.nodes.find(
            (n) => n.id === (event.payload.node as string),
          );
          if (node) {
            node.status = event.payload.status as never;
            drawCanvas();
          } else {
            // a loop expanded mid-run; pick up the new instances
            void reloadGraph();
          }
        }
        if (event.kind === "CheckpointRetained") void drawCheckpoints();
        if (event.kind === "RunFinished") void reloadGraph();
      },
      onFinished: () => void drawCheckpoints(),
    });
  }

  await reloadGraph();
  await drawCheckpoints();
  if (state.graph && (state.graph.live || state.graph.status === "running")) {
    followEvents();
  }
}

// -- router ---------------------------------------------------------------------

async function route(): Promise<void> {
  const hash = location.hash || "#/projects";
  const [pathPart, queryPart] = hash.split("?", 2) as [string, string | undefined];
  const query = new URLSearchParams(queryPart ?? "");
  try {
    const runMatch = /^#\/run\/(.+)$/.exec(pathPart);
    if (runMatch) return await renderRun(runMatch[1]!);
    const projectMatch = /^#\/project\/(.+)$/.exec(pathPart);
    if (projectMatch) return await renderProject(projectMatch[1]!, query.get("bp") ?? "");
    return await renderProjects();
  } catch (err) {
    root.replaceChildren(errorBanner(err));
  }
}

window.addEventListener("hashchange", () => void route());
void route();
