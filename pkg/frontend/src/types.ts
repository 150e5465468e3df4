// Payload shapes of the REST/WS contract. The client renders what the
// service sends and never recomputes values on its own.

export type NodeStatus =
  | "Pending"
  | "Ready"
  | "Running"
  | "Completed"
  | "Failed"
  | "Stale"
  | "PausedAtBreakpoint";

export type RunStatus = "created" | "running" | "paused" | "completed" | "failed";

export interface ProjectRow {
  id: string;
  name: string;
  created_at: number;
  compiled: boolean;
}

export interface CompileStats {
  semantic_count: number;
  syntactic_count: number;
}

export interface CompileResult {
  artifacts: string[];
  stats: CompileStats;
}

export interface GraphNode {
  id: string;
  template: string;
  role: string;
  concept: string;
  kind: "semantic" | "syntactic";
  deps: string[];
  status: NodeStatus;
}

export interface RunGraph {
  run_id: string;
  status: RunStatus;
  live: boolean;
  nodes: GraphNode[];
}

export interface RunRow {
  run_id: string;
  project_id: string;
  status: RunStatus;
  created_at?: number;
  [key: string]: unknown;
}

export interface CheckpointRow {
  seq: number;
  flow_index: string;
  ts: number;
}

export interface TaggedCell {
  t: string;
  v: unknown;
}

export interface ReferenceJson {
  schema: string;
  axes: [string, number][];
  cells: TaggedCell[];
}

export type TensorView = "table" | "list" | "json";

export interface TensorDoc {
  run_id: string;
  flow_index: string;
  view: TensorView;
  seq: number;
  reference?: ReferenceJson;
  text?: string;
}

export interface OverrideResult {
  run_id: string;
  stale: string[];
}

export interface RunEvent {
  schema: string;
  run_id: string;
  seq: number;
  kind: "StatusChanged" | "CheckpointRetained" | "TraceAppended" | "RunFinished";
  payload: Record<string, unknown>;
}

export type TraceStream = "agent" | "data" | "orch";

export interface TraceEntry {
  node?: string;
  [key: string]: unknown;
}

export interface DiagnosticJson {
  code: string;
  message: string;
  line?: number;
  column?: number;
  concept?: string;
  flow_index?: string;
}

export interface ErrorBody {
  code: string;
  message: string;
  diagnostics?: DiagnosticJson[];
}

export interface RunStartOptions {
  inputs?: Record<string, unknown>;
  breakpoints?: string[];
  agents?: Record<string, unknown>;
}
