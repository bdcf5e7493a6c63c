/**
 * Wire records exchanged with the serve endpoint.
 *
 * The live channel carries one JSON object per line. Outbound from the
 * engine: trace events and pending interaction requests; inbound from the
 * client: interaction responses. Records are discriminated by shape:
 * trace events carry `seq` + `kind`, interaction requests carry `request_id`
 * without `kind`, and acks carry `status`.
 */

export interface NodeRecord {
  id: string;
  type: string;
  input_fields?: string[];
  output_fields?: string[];
  instructions?: string;
  config?: Record<string, unknown>;
}

export interface EdgeRecord {
  source: string;
  target: string;
  attributes?: Record<string, unknown>;
}

export interface SpecDoc {
  version?: number;
  nodes: NodeRecord[];
  edges: EdgeRecord[];
}

export type TraceKind =
  | "status_change"
  | "message_dispatched"
  | "state_write"
  | "interaction_request"
  | "interaction_response"
  | "model_call"
  | "error";

export interface TraceEventRecord {
  seq: number;
  wall_time: number;
  node_id: string;
  kind: TraceKind;
  payload: Record<string, unknown>;
}

export interface InteractionRequestRecord {
  request_id: string;
  node_id: string;
  prompt: string;
  schema: string;
}

export interface InteractionResponseRecord {
  request_id: string;
  payload: unknown;
}

export interface AckRecord {
  status: "accepted" | "ignored" | "rejected";
  request_id?: string;
  reason?: string;
}

export type InboundRecord =
  | { type: "trace"; event: TraceEventRecord }
  | { type: "request"; request: InteractionRequestRecord }
  | { type: "ack"; ack: AckRecord }
  | { type: "unknown"; raw: unknown };

export const ENTRY = "ENTRY";
export const EXIT = "EXIT";

export function classifyRecord(raw: unknown): InboundRecord {
  if (typeof raw !== "object" || raw === null) {
    return { type: "unknown", raw };
  }
  const record = raw as Record<string, unknown>;
  if (typeof record.seq === "number" && typeof record.kind === "string") {
    return { type: "trace", event: record as unknown as TraceEventRecord };
  }
  if (typeof record.request_id === "string" && typeof record.prompt === "string") {
    return { type: "request", request: record as unknown as InteractionRequestRecord };
  }
  if (typeof record.status === "string") {
    return { type: "ack", ack: record as unknown as AckRecord };
  }
  return { type: "unknown", raw };
}

export function parseLine(line: string): InboundRecord {
  try {
    return classifyRecord(JSON.parse(line));
  } catch {
    return { type: "unknown", raw: line };
  }
}

export function encodeResponse(response: InteractionResponseRecord): string {
  return JSON.stringify(response) + "\n";
}
