// End-to-end pass against a real service process: create and compile a
// project, review its narrative, run to a breakpoint, inspect checkpointed
// values, resume, override, and fork, all through the same client the app
// uses. The service binary comes from the Python package on PATH.

import { execFile, spawn, type ChildProcess } from "node:child_process";
import { existsSync, mkdtempSync, rmSync } from "node:fs";
import { createServer } from "node:net";
import { tmpdir } from "node:os";
import path from "node:path";
import { fileURLToPath } from "node:url";
import { promisify } from "node:util";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { WebSocket as NodeWebSocket } from "ws";

import { Client } from "../src/api";
import { RunEventFeed, foldStatuses } from "../src/events";
import type { WebSocketLike } from "../src/events";
import { ApprovalStore, MemoryStore, downstreamOf, splitInstanceId } from "../src/model";
import type { NodeStatus, RunEvent } from "../src/types";

const run = promisify(execFile);
const FRONTEND = path.dirname(path.dirname(fileURLToPath(import.meta.url)));

const DECK_SOURCE = `# assemble a slide deck from an outline
{deck}
    <= save({assembled}, {output path})
    {output path}
        <- "deck.json"
    {assembled}
        <= "assemble the title and slides into one deck"({title card}, {slides})
        {title card}
            <= "write a title slide for the outline"({outline for title})
            {outline for title}
                <- {outline}
        {slides}
            <* {outline}
            <= collect({slide})
            {outline}
            {slide}
                <= "draft one slide for this outline item"({*})
`;

const AGENTS = {
  agents: [{ name: "lab", kind: "scripted" }],
  rules: [{ pattern: "*", agent: "lab" }],
};

async function freePort(): Promise<number> {
  return new Promise((resolve, reject) => {
    const probe = createServer();
    probe.once("error", reject);
    probe.listen(0, "127.0.0.1", () => {
      const port = (probe.address() as { port: number }).port;
      probe.close(() => resolve(port));
    });
  });
}

let libraryRoot: string;
let service: ChildProcess;
let baseUrl: string;
let client: Client;
let stderr = "";

beforeAll(async () => {
  await run("node", ["build.mjs"], { cwd: FRONTEND });
  expect(existsSync(path.join(FRONTEND, "dist", "index.html"))).toBe(true);

  libraryRoot = mkdtempSync(path.join(tmpdir(), "nc-e2e-"));
  const port = await freePort();
  baseUrl = `http://127.0.0.1:${port}`;
  service = spawn(
    "nc",
    ["serve", "--root", libraryRoot, "--port", String(port), "--ui", path.join(FRONTEND, "dist")],
    { stdio: ["ignore", "ignore", "pipe"] },
  );
  service.stderr?.on("data", (chunk) => {
    stderr += String(chunk);
  });
  client = new Client(baseUrl);

  const deadline = Date.now() + 30_000;
  for (;;) {
    try {
      const response = await fetch(`${baseUrl}/healthz`);
      if (response.ok) break;
    } catch {
      // not up yet
    }
    if (Date.now() > deadline) {
      throw new Error(`service never became healthy\n${stderr}`);
    }
    await new Promise((r) => setTimeout(r, 100));
  }
});

afterAll(async () => {
  service?.kill("SIGTERM");
  await new Promise((resolve) => {
    if (!service || service.exitCode !== null) return resolve(null);
    service.once("exit", resolve);
    setTimeout(resolve, 3000);
  });
  rmSync(libraryRoot, { recursive: true, force: true });
});

async function waitForRunStatus(runId: string, wanted: string[]): Promise<void> {
  const deadline = Date.now() + 30_000;
  for (;;) {
    const graph = await client.graph(runId);
    if (wanted.includes(graph.status) && !graph.live) return;
    if (Date.now() > deadline) {
      throw new Error(`run ${runId} stuck at ${graph.status}\n${stderr}`);
    }
    await new Promise((r) => setTimeout(r, 100));
  }
}

function nodeWsFactory(url: string, protocols: string[]): WebSocketLike {
  const socket = new NodeWebSocket(url, protocols.length ? protocols : undefined);
  const like: WebSocketLike = {
    onmessage: null,
    onclose: null,
    onerror: null,
    close: () => socket.close(),
  };
  socket.on("message", (data) => like.onmessage?.({ data: String(data) }));
  socket.on("close", () => like.onclose?.());
  socket.on("error", (err) => like.onerror?.(err));
  return like;
}

function followToFinish(runId: string, overWebSocket = false): Promise<RunEvent[]> {
  return new Promise((resolve, reject) => {
    const feed = new RunEventFeed(client, runId, {
      webSocket: overWebSocket ? nodeWsFactory : null,
      pollIntervalMs: 50,
      onEvent: () => {},
      onFinished: () => resolve([...feed.log.all()]),
      onError: reject,
    });
    setTimeout(() => reject(new Error("no RunFinished within 30s")), 30_000);
  });
}

let projectId: string;
let runId: string;

describe("project lifecycle", () => {
  it("creates, compiles, and reports plan statistics", async () => {
    const project = await client.createProject("deck", DECK_SOURCE);
    projectId = project.id;
    const compiled = await client.compileProject(projectId);
    expect(compiled.stats.semantic_count).toBe(3);
    expect(compiled.stats.syntactic_count).toBe(5);
    const listed = await client.listProjects();
    expect(listed.map((p) => p.id)).toContain(projectId);
  });

  it("serves the narrative the command line prints, byte for byte", async () => {
    const viaHttp = await client.narrative(projectId);
    const viaCli = await run("nc", ["narrate", "--project", path.join(libraryRoot, projectId)]);
    expect(viaHttp).toBe(viaCli.stdout);
    expect(viaHttp.startsWith("Step 1 ")).toBe(true);
  });

  it("gates the first run on an approval of that exact narrative", async () => {
    const approvals = new ApprovalStore(new MemoryStore());
    const narrative = await client.narrative(projectId);
    expect(approvals.approved(projectId, narrative)).toBe(false);
    approvals.approve(projectId, narrative);
    expect(approvals.approved(projectId, narrative)).toBe(true);
    expect(approvals.approved(projectId, narrative + " ")).toBe(false);
  });
});

describe("running with a breakpoint", () => {
  it("pauses before the first loop iteration", async () => {
    const started = await client.startRun(projectId, {
      inputs: { outline: ["intro", "plan", "budget"] },
      breakpoints: ["1.2.2.2"],
      agents: AGENTS,
    });
    runId = started.run_id;
    await waitForRunStatus(runId, ["paused"]);

    const graph = await client.graph(runId);
    const paused = graph.nodes.filter((n) => n.status === "PausedAtBreakpoint");
    expect(paused.map((n) => n.id)).toEqual(["1.2.2.2[i=0]"]);
    for (const node of graph.nodes) {
      if (splitInstanceId(node.id)[0] === "1.2.2.2") {
        expect(["Running", "Completed"]).not.toContain(node.status);
      }
    }
  });

  it("shows the checkpointed collection in all three views", async () => {
    const json = await client.tensor(runId, "1.2.2.1", "json");
    expect(json.reference?.axes).toEqual([["outline", 3]]);
    expect(json.reference?.cells).toHaveLength(3);

    const table = await client.tensor(runId, "1.2.2.1", "table");
    expect(table.text?.startsWith("outline")).toBe(true);

    const list = await client.tensor(runId, "1.2.2.1", "list");
    expect(list.text).toContain("- outline[0]:");
  });

  it("resume with clear releases the breakpoint and the run completes", async () => {
    await client.resume(runId, ["1.2.2.2"]);
    await waitForRunStatus(runId, ["completed"]);

    const events = await client.events(runId);
    const seqs = events.map((e) => e.seq);
    expect(seqs).toEqual([...seqs].sort((a, b) => a - b));
    expect(new Set(seqs).size).toBe(seqs.length);
    expect(events.at(-1)?.kind).toBe("RunFinished");

    // the replayed journal folds to exactly the server's final rendering
    const folded = foldStatuses(events);
    const graph = await client.graph(runId);
    for (const node of graph.nodes) {
      expect(folded.get(node.id)).toBe(node.status);
      expect(node.status).toBe("Completed" satisfies NodeStatus);
    }
  });
});

describe("override and fork", () => {
  it("override invalidates exactly the downstream closure", async () => {
    const graph = await client.graph(runId);
    const result = await client.override(runId, "1.2.1", "Revised Title");
    expect(new Set(result.stale)).toEqual(new Set(["1", "1.2"]));
    expect(new Set(result.stale)).toEqual(downstreamOf(graph.nodes, "1.2.1"));

    await client.resume(result.run_id);
    await waitForRunStatus(result.run_id, ["completed"]);

    const events = await followToFinish(result.run_id);
    const reran = new Set(
      events
        .filter((e) => e.kind === "StatusChanged" && e.payload.status === "Running")
        .map((e) => e.payload.node as string),
    );
    expect(reran).toEqual(new Set(result.stale));
  });

  it("a fork resumed from a checkpoint reproduces the original result", async () => {
    const forked = await client.fork(runId, "1.2.2");
    expect(forked.run_id).not.toBe(runId);
    await client.resume(forked.run_id);
    await waitForRunStatus(forked.run_id, ["completed"]);

    const original = await client.tensor(runId, "1", "json");
    const replayed = await client.tensor(forked.run_id, "1", "json");
    expect(replayed.reference).toEqual(original.reference);
  });

  it("lists both derived runs against the project", async () => {
    const rows = await client.listRuns();
    const mine = rows.filter((r) => r.project_id === projectId);
    expect(mine.length).toBeGreaterThanOrEqual(3);
    for (const row of mine) {
      expect(["completed", "paused", "created", "running", "failed"]).toContain(row.status);
    }
  });
});

describe("live event stream", () => {
  it("a browser-style websocket follows a run from start to finish", async () => {
    const started = await client.startRun(projectId, {
      inputs: { outline: ["one", "two"] },
      agents: AGENTS,
    });
    const events = await followToFinish(started.run_id, true);
    expect(events.at(-1)?.kind).toBe("RunFinished");
    expect(events.at(-1)?.payload.status).toBe("completed");
    const seqs = events.map((e) => e.seq);
    expect(seqs).toEqual([...seqs].sort((a, b) => a - b));

    await waitForRunStatus(started.run_id, ["completed"]);
    const graph = await client.graph(started.run_id);
    const folded = foldStatuses(events);
    for (const node of graph.nodes) {
      expect(folded.get(node.id)).toBe(node.status);
    }
  });
});

describe("static UI mount", () => {
  it("serves the built app under /app", async () => {
    const page = await fetch(`${baseUrl}/app/`);
    expect(page.status).toBe(200);
    const html = await page.text();
    expect(html).toContain('<div id="app">');
    const script = await fetch(`${baseUrl}/app/app.js`);
    expect(script.status).toBe(200);
  });
});
