import { createServer } from "node:http";
import type { AddressInfo } from "node:net";
import { describe, expect, it } from "vitest";
import { WebSocket as NodeWebSocket, WebSocketServer } from "ws";

import { Client } from "../src/api";
import {
  EVENTS_SUBPROTOCOL,
  EventLog,
  RunEventFeed,
  foldStatuses,
  finalStatus,
} from "../src/events";
import type { WebSocketFactory, WebSocketLike } from "../src/events";
import type { NodeStatus, RunEvent } from "../src/types";

function ev(seq: number, kind: RunEvent["kind"], payload: Record<string, unknown>): RunEvent {
  return { schema: "nc-events/1", run_id: "r1", seq, kind, payload };
}

const SAMPLE: RunEvent[] = [
  ev(1, "StatusChanged", { node: "1.1", status: "Running" }),
  ev(2, "StatusChanged", { node: "1.1", status: "Completed" }),
  ev(3, "CheckpointRetained", { flow_index: "1.1", seq: 1 }),
  ev(4, "StatusChanged", { node: "1", status: "Running" }),
  ev(5, "TraceAppended", { stream: "orch", node: "1" }),
  ev(6, "StatusChanged", { node: "1", status: "Completed" }),
  ev(7, "RunFinished", { status: "completed" }),
];

describe("EventLog", () => {
  it("deduplicates by sequence number", () => {
    const log = new EventLog();
    expect(log.push(SAMPLE[0]!)).toBe(true);
    expect(log.push(SAMPLE[0]!)).toBe(false);
    expect(log.push(SAMPLE[1]!)).toBe(true);
    expect(log.push(SAMPLE[0]!)).toBe(false);
    expect(log.all().map((e) => e.seq)).toEqual([1, 2]);
    expect(log.lastSeq).toBe(2);
  });

  it("folds to the same statuses however the events arrive", () => {
    const whole = foldStatuses(SAMPLE);
    const log = new EventLog();
    for (const event of SAMPLE) log.push(event);
    for (const event of SAMPLE) log.push(event); // replay changes nothing
    expect(log.statuses()).toEqual(whole);
    expect(whole.get("1.1")).toBe("Completed");
    expect(log.finalStatus()).toBe("completed");
    expect(finalStatus(SAMPLE.slice(0, 6))).toBeNull();
  });
});

function stubClient(batches: RunEvent[][]): Client {
  let call = 0;
  const impl = async (url: string): Promise<Response> => {
    const since = Number(new URL(url, "http://x").searchParams.get("since") ?? 0);
    const batch = batches[Math.min(call, batches.length - 1)] ?? [];
    call += 1;
    const events = batch.filter((e) => e.seq > since);
    return new Response(JSON.stringify({ events }), { status: 200 });
  };
  return new Client("http://stub", impl);
}

function collect() {
  const seen: RunEvent[] = [];
  let finished: string | null = null;
  let resolve: () => void = () => {};
  const done = new Promise<void>((r) => {
    resolve = r;
  });
  return {
    seen,
    finishedStatus: () => finished,
    done,
    options: {
      onEvent: (event: RunEvent) => void seen.push(event),
      onFinished: (status: string) => {
        finished = status;
        resolve();
      },
    },
  };
}

describe("RunEventFeed polling", () => {
  it("drains batches in order, once each, and stops at RunFinished", async () => {
    const client = stubClient([SAMPLE.slice(0, 3), SAMPLE.slice(0, 5), SAMPLE]);
    const sink = collect();
    const feed = new RunEventFeed(client, "r1", {
      ...sink.options,
      webSocket: null,
      pollIntervalMs: 5,
    });
    await sink.done;
    expect(sink.seen.map((e) => e.seq)).toEqual([1, 2, 3, 4, 5, 6, 7]);
    expect(sink.finishedStatus()).toBe("completed");
    expect(feed.log.statuses()).toEqual(foldStatuses(SAMPLE));
  });

  it("honors a starting seq", async () => {
    const client = stubClient([SAMPLE]);
    const sink = collect();
    new RunEventFeed(client, "r1", {
      ...sink.options,
      since: 5,
      webSocket: null,
      pollIntervalMs: 5,
    });
    await sink.done;
    expect(sink.seen.map((e) => e.seq)).toEqual([6, 7]);
  });
});

describe("RunEventFeed over websocket", () => {
  async function wsServer(
    handle: (send: (e: RunEvent) => void, close: () => void, since: number) => void,
  ): Promise<{ url: string; stop: () => Promise<void>; protocols: string[] }> {
    // the plain-HTTP side answers the polling endpoint with nothing, so a
    // test only passes when the payload really traveled over the socket
    const http = createServer((_request, response) => {
      response.setHeader("content-type", "application/json");
      response.end(JSON.stringify({ events: [] }));
    });
    const wss = new WebSocketServer({ server: http });
    const protocols: string[] = [];
    wss.on("connection", (socket, request) => {
      protocols.push(socket.protocol);
      const since = Number(
        new URL(request.url ?? "/", "http://x").searchParams.get("since") ?? 0,
      );
      handle(
        (event) => socket.send(JSON.stringify(event)),
        () => socket.close(),
        since,
      );
    });
    await new Promise<void>((resolve) => http.listen(0, resolve));
    const port = (http.address() as AddressInfo).port;
    return {
      url: `http://127.0.0.1:${port}`,
      protocols,
      stop: () =>
        new Promise((resolve) => {
          wss.close(() => http.close(() => resolve()));
        }),
    };
  }

  function nodeWsFactory(attempts?: string[][]): WebSocketFactory {
    return (url, protocols) => {
      attempts?.push([...protocols]);
      // ws enforces the token grammar exactly like a browser does and
      // throws here when offered the slash-bearing schema name
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
    };
  }

  it("streams events, falling back to a bare offer when the token is refused", async () => {
    const server = await wsServer((send) => {
      for (const event of SAMPLE) send(event);
    });
    const client = new Client(server.url);
    const sink = collect();
    const attempts: string[][] = [];
    new RunEventFeed(client, "r1", { ...sink.options, webSocket: nodeWsFactory(attempts) });
    await sink.done;
    await server.stop();
    expect(sink.seen.map((e) => e.seq)).toEqual([1, 2, 3, 4, 5, 6, 7]);
    expect(attempts).toEqual([[EVENTS_SUBPROTOCOL], []]);
    expect(server.protocols).toEqual([""]);
    for (const event of sink.seen) expect(event.schema).toBe(EVENTS_SUBPROTOCOL);
  });

  it("falls back to polling when the socket closes mid-run, without duplicates", async () => {
    const server = await wsServer((send, close) => {
      send(SAMPLE[0]!);
      send(SAMPLE[1]!);
      setTimeout(close, 10);
    });
    // polling endpoint backs the same journal
    let polled = 0;
    const poller = async (url: string): Promise<Response> => {
      polled += 1;
      const since = Number(new URL(url).searchParams.get("since") ?? 0);
      const events = SAMPLE.filter((e) => e.seq > since);
      return new Response(JSON.stringify({ events }), { status: 200 });
    };
    const client = new Client(server.url, poller);
    const sink = collect();
    const feed = new RunEventFeed(client, "r1", {
      ...sink.options,
      webSocket: nodeWsFactory(),
      pollIntervalMs: 5,
    });
    await sink.done;
    await server.stop();
    expect(polled).toBeGreaterThan(0);
    expect(sink.seen.map((e) => e.seq)).toEqual([1, 2, 3, 4, 5, 6, 7]);
    const statuses: Map<string, NodeStatus> = feed.log.statuses();
    expect(statuses).toEqual(foldStatuses(SAMPLE));
  });

  it("close() stops a feed that never finished", async () => {
    const server = await wsServer((send) => send(SAMPLE[0]!));
    const client = new Client(server.url);
    const sink = collect();
    const feed = new RunEventFeed(client, "r1", {
      ...sink.options,
      webSocket: nodeWsFactory(),
    });
    await new Promise((r) => setTimeout(r, 50));
    feed.close();
    await server.stop();
    expect(sink.seen.map((e) => e.seq)).toEqual([1]);
    expect(sink.finishedStatus()).toBeNull();
  });
});
