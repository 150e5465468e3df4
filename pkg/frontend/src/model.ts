// View models: graph layout, status colors, override-editor validation,
// and the two bits of purely local state (narrative approval, dragged node
// positions). Values themselves always come from the service.

import type { GraphNode, NodeStatus, ReferenceJson } from "./types";

export const STATUS_COLORS: Record<NodeStatus, string> = {
  Pending: "#8888a0",
  Ready: "#06b6d4",
  Running: "#3b82f6",
  Completed: "#22c55e",
  Failed: "#ef4444",
  Stale: "#eab308",
  PausedAtBreakpoint: "#f97316",
};

export function splitInstanceId(id: string): [string, string] {
  const at = id.indexOf("[");
  return at < 0 ? [id, ""] : [id.slice(0, at), id.slice(at)];
}

/** Sort key matching the scheduler's ordering: flow index, then ordinals. */
export function instanceKey(id: string): number[] {
  const [template, suffix] = splitInstanceId(id);
  const key = template.split(".").map(Number);
  for (const match of suffix.matchAll(/=(\d+)/g)) {
    key.push(Number(match[1]));
  }
  return key;
}

export function compareInstanceIds(a: string, b: string): number {
  const ka = instanceKey(a);
  const kb = instanceKey(b);
  const n = Math.max(ka.length, kb.length);
  for (let i = 0; i < n; i++) {
    const da = ka[i] ?? -1;
    const db = kb[i] ?? -1;
    if (da !== db) return da - db;
  }
  return 0;
}

export interface PlacedNode extends GraphNode {
  x: number;
  y: number;
  pinned: boolean;
}

export interface GraphEdge {
  from: string;
  to: string;
}

export interface GraphLayout {
  nodes: PlacedNode[];
  edges: GraphEdge[];
  width: number;
  height: number;
}

export const CELL_W = 170;
export const CELL_H = 64;

/**
 * Layered auto-layout: column is flow-index depth, row is scheduler order
 * within the column. A manually dragged node keeps its stored position.
 */
export function layoutGraph(
  nodes: GraphNode[],
  positions?: PositionStore,
  scopeKey = "",
): GraphLayout {
  const ordered = [...nodes].sort((a, b) => compareInstanceIds(a.id, b.id));
  const rows = new Map<number, number>();
  const placed: PlacedNode[] = [];
  for (const node of ordered) {
    const depth = splitInstanceId(node.id)[0].split(".").length - 1;
    const row = rows.get(depth) ?? 0;
    rows.set(depth, row + 1);
    const manual = positions?.get(scopeKey, node.id);
    placed.push({
      ...node,
      x: manual ? manual.x : 40 + depth * CELL_W,
      y: manual ? manual.y : 40 + row * CELL_H,
      pinned: Boolean(manual),
    });
  }
  const edges: GraphEdge[] = [];
  const known = new Set(ordered.map((n) => n.id));
  for (const node of ordered) {
    for (const dep of node.deps) {
      if (known.has(dep)) edges.push({ from: dep, to: node.id });
    }
  }
  const width = Math.max(...placed.map((n) => n.x), 0) + CELL_W;
  const height = Math.max(...placed.map((n) => n.y), 0) + CELL_H;
  return { nodes: placed, edges, width, height };
}

/** Everything downstream of a node, following consumer edges. */
export function downstreamOf(nodes: GraphNode[], start: string): Set<string> {
  const consumers = new Map<string, string[]>();
  for (const node of nodes) {
    for (const dep of node.deps) {
      const list = consumers.get(dep);
      if (list) list.push(node.id);
      else consumers.set(dep, [node.id]);
    }
  }
  const seen = new Set<string>();
  const frontier = [start];
  while (frontier.length) {
    const current = frontier.pop() as string;
    for (const next of consumers.get(current) ?? []) {
      if (!seen.has(next)) {
        seen.add(next);
        frontier.push(next);
      }
    }
  }
  seen.delete(start);
  return seen;
}

// -- override editor ---------------------------------------------------------

const REF_SCHEMA = "nc-ref/1";

/**
 * Problems with a canonical value document, empty when it is well formed.
 * Only the shape is checked; cell contents are the service's business.
 */
export function validateReference(doc: unknown): string[] {
  if (typeof doc !== "object" || doc === null || Array.isArray(doc)) {
    return ["expected an object with schema, axes, and cells"];
  }
  const ref = doc as Partial<ReferenceJson>;
  const problems: string[] = [];
  if (ref.schema !== REF_SCHEMA) {
    problems.push(`schema must be "${REF_SCHEMA}"`);
  }
  if (!Array.isArray(ref.axes)) {
    problems.push("axes must be an array of [name, length] pairs");
  } else {
    const names = new Set<string>();
    for (const axis of ref.axes) {
      if (!Array.isArray(axis) || axis.length !== 2) {
        problems.push("each axis must be a [name, length] pair");
        break;
      }
      const [name, length] = axis;
      if (typeof name !== "string" || !name) {
        problems.push("axis names must be non-empty strings");
      } else if (names.has(name)) {
        problems.push(`duplicate axis name "${name}"`);
      } else {
        names.add(name);
      }
      if (!Number.isInteger(length) || (length as number) < 0) {
        problems.push(`axis "${name}" needs a non-negative integer length`);
      }
    }
  }
  if (!Array.isArray(ref.cells)) {
    problems.push("cells must be an array");
  } else if (Array.isArray(ref.axes) && problems.length === 0) {
    const expected = ref.axes.reduce((acc, [, length]) => acc * length, 1);
    if (ref.cells.length !== expected) {
      problems.push(`axes imply ${expected} cells, document has ${ref.cells.length}`);
    }
    for (const cell of ref.cells) {
      if (typeof cell !== "object" || cell === null || !("t" in cell) || !("v" in cell)) {
        problems.push("each cell must be a tagged {t, v} object");
        break;
      }
    }
  }
  return problems;
}

export function isReferenceDoc(value: unknown): boolean {
  return (
    typeof value === "object" &&
    value !== null &&
    (value as { schema?: unknown }).schema === REF_SCHEMA
  );
}

export function shapeSummary(ref: ReferenceJson): string {
  if (!ref.axes.length) return "scalar";
  const dims = ref.axes.map(([name, length]) => `${name}[${length}]`).join(" x ");
  return `${dims}, ${ref.cells.length} cells`;
}

// -- local state --------------------------------------------------------------

export interface KeyValueStore {
  getItem(key: string): string | null;
  setItem(key: string, value: string): void;
}

export class MemoryStore implements KeyValueStore {
  private readonly data = new Map<string, string>();
  getItem(key: string): string | null {
    return this.data.get(key) ?? null;
  }
  setItem(key: string, value: string): void {
    this.data.set(key, value);
  }
}

export function defaultStore(): KeyValueStore {
  const storage = (globalThis as { localStorage?: KeyValueStore }).localStorage;
  return storage ?? new MemoryStore();
}

function textHash(text: string): string {
  // fnv-1a, enough to notice the narrative changed under an old approval
  let hash = 0x811c9dc5;
  for (let i = 0; i < text.length; i++) {
    hash ^= text.charCodeAt(i);
    hash = Math.imul(hash, 0x01000193) >>> 0;
  }
  return hash.toString(16);
}

/**
 * The run gate: a project's narrative must be read and approved before its
 * first run, and approval is void the moment the narrative text changes.
 */
export class ApprovalStore {
  constructor(private readonly store: KeyValueStore = defaultStore()) {}

  private key(projectId: string): string {
    return `nc-canvas/approved/${projectId}`;
  }

  approve(projectId: string, narrative: string): void {
    this.store.setItem(this.key(projectId), textHash(narrative));
  }

  approved(projectId: string, narrative: string): boolean {
    return this.store.getItem(this.key(projectId)) === textHash(narrative);
  }
}

/** Dragged node positions, per project, survive reloads. */
export class PositionStore {
  constructor(private readonly store: KeyValueStore = defaultStore()) {}

  private key(scope: string): string {
    return `nc-canvas/pos/${scope}`;
  }

  private read(scope: string): Record<string, { x: number; y: number }> {
    const raw = this.store.getItem(this.key(scope));
    if (!raw) return {};
    try {
      return JSON.parse(raw) as Record<string, { x: number; y: number }>;
    } catch {
      return {};
    }
  }

  get(scope: string, nodeId: string): { x: number; y: number } | null {
    return this.read(scope)[nodeId] ?? null;
  }

  set(scope: string, nodeId: string, x: number, y: number): void {
    const all = this.read(scope);
    all[nodeId] = { x, y };
    this.store.setItem(this.key(scope), JSON.stringify(all));
  }
}
