// Live run state comes from one journal. The feed replays history and
// follows new events, deduplicating by sequence number, so a reconnect or
// a switch from WebSocket to polling never double-applies a transition.

import type { Client } from "./api";
import type { NodeStatus, RunEvent, RunStatus } from "./types";

export const EVENTS_SUBPROTOCOL = "nc-events/1";

export function foldStatuses(events: Iterable<RunEvent>): Map<string, NodeStatus> {
  const statuses = new Map<string, NodeStatus>();
  for (const event of events) {
    if (event.kind === "StatusChanged") {
      statuses.set(event.payload.node as string, event.payload.status as NodeStatus);
    }
  }
  return statuses;
}

export function finalStatus(events: Iterable<RunEvent>): RunStatus | null {
  let last: RunStatus | null = null;
  for (const event of events) {
    if (event.kind === "RunFinished") {
      last = event.payload.status as RunStatus;
    }
  }
  return last;
}

/** Ordered, deduplicated event history for one run. */
export class EventLog {
  private readonly events: RunEvent[] = [];
  lastSeq = 0;

  push(event: RunEvent): boolean {
    if (event.seq <= this.lastSeq) return false;
    this.events.push(event);
    this.lastSeq = event.seq;
    return true;
  }

  all(): readonly RunEvent[] {
    return this.events;
  }

  statuses(): Map<string, NodeStatus> {
    return foldStatuses(this.events);
  }

  finalStatus(): RunStatus | null {
    return finalStatus(this.events);
  }
}

export interface WebSocketLike {
  onmessage: ((event: { data: unknown }) => void) | null;
  onclose: (() => void) | null;
  onerror: ((err: unknown) => void) | null;
  close(): void;
}

export type WebSocketFactory = (url: string, protocols: string[]) => WebSocketLike;

export interface FeedOptions {
  since?: number;
  onEvent: (event: RunEvent) => void;
  onFinished?: (status: RunStatus) => void;
  onError?: (err: unknown) => void;
  /** Omit to use the browser WebSocket; pass null to force polling. */
  webSocket?: WebSocketFactory | null;
  pollIntervalMs?: number;
}

function defaultFactory(): WebSocketFactory | null {
  const ctor = (globalThis as { WebSocket?: new (url: string, protocols: string[]) => WebSocketLike })
    .WebSocket;
  if (!ctor) return null;
  return (url, protocols) => new ctor(url, protocols);
}

/**
 * Follow a run's journal until RunFinished. Uses the WebSocket when one is
 * available and falls back to polling the events endpoint otherwise; both
 * paths feed the same log, so the rendering cannot depend on the transport.
 */
export class RunEventFeed {
  readonly log = new EventLog();
  private closed = false;
  private socket: WebSocketLike | null = null;
  private timer: ReturnType<typeof setTimeout> | null = null;

  constructor(
    private readonly client: Client,
    private readonly runId: string,
    private readonly options: FeedOptions,
  ) {
    this.log.lastSeq = options.since ?? 0;
    const factory = options.webSocket === undefined ? defaultFactory() : options.webSocket;
    if (factory) {
      this.openSocket(factory);
    } else {
      void this.poll();
    }
  }

  private apply(event: RunEvent): void {
    if (!this.log.push(event)) return;
    this.options.onEvent(event);
    if (event.kind === "RunFinished") {
      this.options.onFinished?.(event.payload.status as RunStatus);
      this.close();
    }
  }

  private openSocket(factory: WebSocketFactory): void {
    const url = this.client.eventsUrl(this.runId, this.log.lastSeq);
    let socket: WebSocketLike;
    try {
      socket = factory(url, [EVENTS_SUBPROTOCOL]);
    } catch {
      // the schema name is not a legal Sec-WebSocket-Protocol token, so
      // strict clients refuse to offer it; the server accepts a bare
      // connection and every event still carries the schema tag inline
      try {
        socket = factory(url, []);
      } catch (err) {
        this.options.onError?.(err);
        void this.poll();
        return;
      }
    }
    this.socket = socket;
    socket.onmessage = (message) => {
      try {
        this.apply(JSON.parse(String(message.data)) as RunEvent);
      } catch (err) {
        this.options.onError?.(err);
      }
    };
    socket.onclose = () => {
      this.socket = null;
      // a close before RunFinished means the server went away mid-run;
      // polling picks up from the last applied seq
      if (!this.closed) void this.poll();
    };
    socket.onerror = (err) => {
      this.options.onError?.(err);
    };
  }

  private async poll(): Promise<void> {
    if (this.closed) return;
    try {
      const events = await this.client.events(this.runId, this.log.lastSeq);
      for (const event of events) {
        this.apply(event);
        if (this.closed) return;
      }
    } catch (err) {
      this.options.onError?.(err);
    }
    if (this.closed) return;
    this.timer = setTimeout(() => void this.poll(), this.options.pollIntervalMs ?? 400);
  }

  close(): void {
    if (this.closed) return;
    this.closed = true;
    if (this.timer) clearTimeout(this.timer);
    this.timer = null;
    if (this.socket) {
      const socket = this.socket;
      this.socket = null;
      socket.onclose = null;
      socket.close();
    }
  }
}
