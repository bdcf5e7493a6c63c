import { describe, expect, it } from "vitest";

import { LiveClient, SocketLike } from "../src/client.js";
import { applyEvent, bufferedGap, createViewModel, registerRequest, statusSnapshot } from "../src/viewModel.js";
import { InteractionRequestRecord, TraceEventRecord } from "../src/wire.js";
import { loadSpec } from "./helpers.js";

function event(seq: number, nodeId: string, kind: TraceEventRecord["kind"], payload: Record<string, unknown>): TraceEventRecord {
  return { seq, wall_time: seq, node_id: nodeId, kind, payload };
}

/** A scripted engine behind a fake socket: emits the pre-block records on
 * connect, then the resumption records once the right reply arrives. */
class ScriptedEngineSocket implements SocketLike {
  onmessage: ((event: { data: string }) => void) | null = null;
  onclose: (() => void) | null = null;
  onerror: ((event: unknown) => void) | null = null;
  sent: string[] = [];

  constructor(
    private readonly snapshot: Array<Record<string, unknown>>,
    private readonly expectedRequestId: string,
    private readonly continuation: Array<Record<string, unknown>>,
  ) {}

  open(): void {
    for (const record of this.snapshot) {
      this.onmessage?.({ data: JSON.stringify(record) });
    }
  }

  send(data: string): void {
    this.sent.push(data);
    const record = JSON.parse(data);
    if (record.request_id === this.expectedRequestId && record.payload === "accept") {
      this.onmessage?.({ data: JSON.stringify({ status: "accepted", request_id: record.request_id }) });
      for (const next of this.continuation) {
        this.onmessage?.({ data: JSON.stringify(next) });
      }
    } else {
      this.onmessage?.({
        data: JSON.stringify({ status: "rejected", request_id: record.request_id, reason: "stale request_id" }),
      });
    }
  }

  close(): void {
    this.onclose?.();
  }
}

const REVIEW_REQUEST: InteractionRequestRecord = {
  request_id: "req-0001",
  node_id: "Finalizer",
  prompt: "Approve the final report?",
  schema: "accept_reject",
};

function blockedRunRecords(): Array<Record<string, unknown>> {
  return [
    event(0, "DrafterA", "status_change", { status: "running", from: "ready" }),
    event(1, "DrafterA", "status_change", { status: "done", from: "running" }),
    event(2, "Finalizer", "status_change", { status: "running", from: "ready" }),
    event(3, "Finalizer", "interaction_request", { ...REVIEW_REQUEST }),
    { ...REVIEW_REQUEST },
  ];
}

function resumedRecords(): Array<Record<string, unknown>> {
  return [
    event(4, "Finalizer", "interaction_response", { request_id: "req-0001", payload: "accept" }),
    event(5, "Finalizer", "status_change", { status: "done", from: "running" }),
  ];
}

function wire(model: ReturnType<typeof createViewModel>, socket: ScriptedEngineSocket) {
  const acks: Array<Record<string, unknown>> = [];
  const client = new LiveClient(
    "ws://fake",
    {
      onTrace: (traceEvent) => applyEvent(model, traceEvent),
      onRequest: (request) => registerRequest(model, request),
      onAck: (ack) => {
        acks.push(ack as unknown as Record<string, unknown>);
        if (ack.status !== "accepted" && ack.request_id) {
          const item = model.pending.get(ack.request_id);
          if (item) item.notice = `${ack.status}: ${ack.reason ?? ""}`;
        }
      },
      nextSeq: () => model.nextSeq,
      hasGap: () => bufferedGap(model),
    },
    { socketFactory: () => socket, gapTimeoutMs: 20, reconnectDelayMs: 5 },
  );
  return { client, acks };
}

describe("answering interactions", () => {
  it("an accept reply unblocks the scripted engine run", () => {
    const model = createViewModel(loadSpec());
    const socket = new ScriptedEngineSocket(blockedRunRecords(), "req-0001", resumedRecords());
    const { client } = wire(model, socket);
    client.connect();
    socket.open();

    expect(model.pending.size).toBe(1);
    expect(statusSnapshot(model).Finalizer).toBe("running");

    client.answer({ request_id: "req-0001", payload: "accept" });

    expect(model.pending.size).toBe(0); // item clears on acceptance
    expect(statusSnapshot(model).Finalizer).toBe("done"); // resumption arrived
    client.close();
  });

  it("a stale request_id shows a rejection notice and keeps the item pending", () => {
    const model = createViewModel(loadSpec());
    const socket = new ScriptedEngineSocket(blockedRunRecords(), "req-0001", resumedRecords());
    const { client, acks } = wire(model, socket);
    client.connect();
    socket.open();

    client.answer({ request_id: "req-ancient", payload: "accept" });
    expect(acks.at(-1)).toMatchObject({ status: "rejected" });
    expect(model.pending.size).toBe(1);
    expect(model.pending.get("req-0001")).toBeTruthy();
    client.close();
  });

  it("a persistent seq gap triggers a snapshot reconnect", async () => {
    const model = createViewModel(loadSpec());
    const gappy = blockedRunRecords().filter(
      (record) => !("seq" in record) || (record.seq as number) !== 1,
    );
    let connections = 0;
    const sockets: ScriptedEngineSocket[] = [];
    const client = new LiveClient(
      "ws://fake",
      {
        onTrace: (traceEvent) => applyEvent(model, traceEvent),
        onRequest: (request) => registerRequest(model, request),
        onAck: () => {},
        nextSeq: () => model.nextSeq,
        hasGap: () => bufferedGap(model),
      },
      {
        socketFactory: () => {
          connections += 1;
          const socket = new ScriptedEngineSocket(
            connections === 1 ? gappy : blockedRunRecords(),
            "req-0001",
            resumedRecords(),
          );
          sockets.push(socket);
          queueMicrotask(() => socket.open());
          return socket;
        },
        gapTimeoutMs: 15,
        reconnectDelayMs: 5,
      },
    );
    client.connect();
    await new Promise((resolve) => setTimeout(resolve, 120));
    expect(connections).toBeGreaterThan(1); // gap forced a reconnect
    expect(statusSnapshot(model).Finalizer).toBe("running"); // snapshot healed the gap
    expect(bufferedGap(model)).toBe(false);
    client.close();
  });
});
