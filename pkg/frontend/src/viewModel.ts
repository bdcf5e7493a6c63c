/**
 * The view model is a pure fold over (spec, ordered trace events): replaying
 * a recorded trace always reproduces the identical final state. Events
 * arriving out of order are buffered until the seq gap closes; the node and
 * edge sets always equal the served spec's sets, and per-node statuses equal
 * the latest status_change for that node.
 */

import {
  EXIT,
  ENTRY,
  InteractionRequestRecord,
  SpecDoc,
  TraceEventRecord,
} from "./wire.js";

export type NodeStatus = "pending" | "ready" | "running" | "done" | "failed" | "skipped";

export const STATUS_COLORS: Record<NodeStatus, string> = {
  pending: "#94a3b8",
  ready: "#38bdf8",
  running: "#f59e0b",
  done: "#22c55e",
  failed: "#ef4444",
  skipped: "#64748b",
};

export interface ViewNode {
  id: string;
  kind: string;
  status: NodeStatus;
  iteration: number;
  instructions: string;
  inputFields: string[];
  outputFields: string[];
}

export interface ViewEdge {
  source: string;
  target: string;
  active: boolean;
  lastPayload: Record<string, unknown> | null;
  label: string | null;
}

export interface PanelItem {
  requestId: string;
  nodeId: string;
  prompt: string;
  schema: string;
  replyDraft: string;
  notice: string | null;
}

export interface ViewModel {
  nodes: Map<string, ViewNode>;
  edges: ViewEdge[];
  pending: Map<string, PanelItem>;
  nextSeq: number;
  buffered: Map<number, TraceEventRecord>;
  eventCount: number;
  notices: string[];
}

export function createViewModel(spec: SpecDoc): ViewModel {
  const nodes = new Map<string, ViewNode>();
  for (const node of spec.nodes) {
    nodes.set(node.id, {
      id: node.id,
      kind: node.type,
      status: "pending",
      iteration: 1,
      instructions: node.instructions ?? "",
      inputFields: node.input_fields ?? [],
      outputFields: node.output_fields ?? [],
    });
  }
  const edges: ViewEdge[] = spec.edges.map((edge) => ({
    source: edge.source,
    target: edge.target,
    active: false,
    lastPayload: null,
    label: typeof edge.attributes?.label === "string" ? (edge.attributes.label as string) : null,
  }));
  return {
    nodes,
    edges,
    pending: new Map(),
    nextSeq: 0,
    buffered: new Map(),
    eventCount: 0,
    notices: [],
  };
}

/** Buffer-or-apply one event; drains the buffer as the seq gap closes. */
export function applyEvent(model: ViewModel, event: TraceEventRecord): void {
  if (event.seq < model.nextSeq) {
    return; // replayed duplicate (reconnect overlap)
  }
  model.buffered.set(event.seq, event);
  while (model.buffered.has(model.nextSeq)) {
    const next = model.buffered.get(model.nextSeq)!;
    model.buffered.delete(model.nextSeq);
    model.nextSeq += 1;
    applyInOrder(model, next);
  }
}

export function bufferedGap(model: ViewModel): boolean {
  return model.buffered.size > 0;
}

function applyInOrder(model: ViewModel, event: TraceEventRecord): void {
  model.eventCount += 1;
  switch (event.kind) {
    case "status_change": {
      const node = model.nodes.get(event.node_id);
      if (node) {
        node.status = event.payload.status as NodeStatus;
        if (typeof event.payload.iteration === "number") {
          node.iteration = event.payload.iteration;
        }
      }
      break;
    }
    case "message_dispatched": {
      const target = String(event.payload.target ?? "");
      const edge = model.edges.find((e) => e.source === event.node_id && e.target === target);
      if (edge) {
        edge.active = true;
        const data = event.payload.data;
        edge.lastPayload =
          typeof data === "object" && data !== null ? (data as Record<string, unknown>) : null;
      }
      break;
    }
    case "interaction_request": {
      const requestId = String(event.payload.request_id ?? "");
      if (requestId && !model.pending.has(requestId)) {
        model.pending.set(requestId, {
          requestId,
          nodeId: event.node_id,
          prompt: String(event.payload.prompt ?? ""),
          schema: String(event.payload.schema ?? "free_text"),
          replyDraft: "",
          notice: null,
        });
      }
      break;
    }
    case "interaction_response": {
      const requestId = String(event.payload.request_id ?? "");
      model.pending.delete(requestId); // answered: the item disappears
      break;
    }
    case "error": {
      if (event.payload.severity === "error") {
        model.notices.push(`${event.node_id}: ${JSON.stringify(event.payload)}`);
      }
      break;
    }
    default:
      break;
  }
}

/** Direct request records (pushed by the broker) are idempotent with the
 * trace-derived items. */
export function registerRequest(model: ViewModel, request: InteractionRequestRecord): void {
  if (!model.pending.has(request.request_id)) {
    model.pending.set(request.request_id, {
      requestId: request.request_id,
      nodeId: request.node_id,
      prompt: request.prompt,
      schema: request.schema,
      replyDraft: "",
      notice: null,
    });
  }
}

/** Pure fold: spec + recorded events in any arrival order -> final model. */
export function reduceTrace(spec: SpecDoc, events: TraceEventRecord[]): ViewModel {
  const model = createViewModel(spec);
  for (const event of events) {
    applyEvent(model, event);
  }
  return model;
}

export function statusSnapshot(model: ViewModel): Record<string, NodeStatus> {
  const out: Record<string, NodeStatus> = {};
  for (const [id, node] of model.nodes) {
    out[id] = node.status;
  }
  return out;
}

export { ENTRY, EXIT };
