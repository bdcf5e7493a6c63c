/**
 * Live-channel client: connects to /ws, feeds records to the view model,
 * replies by request_id, and recovers from seq gaps by reconnecting with
 * ?since=<next expected seq> (the server then resends a gap-free snapshot).
 */

import { AckRecord, InteractionResponseRecord, parseLine } from "./wire.js";

export interface SocketLike {
  send(data: string): void;
  close(): void;
  onmessage: ((event: { data: string }) => void) | null;
  onclose: (() => void) | null;
  onerror: ((event: unknown) => void) | null;
}

export type SocketFactory = (url: string) => SocketLike;

export interface ClientHooks {
  onTrace(event: import("./wire.js").TraceEventRecord): void;
  onRequest(request: import("./wire.js").InteractionRequestRecord): void;
  onAck(ack: AckRecord): void;
  /** Next seq the view model expects; drives resume-on-reconnect. */
  nextSeq(): number;
  /** True while buffered out-of-order events are waiting on a gap. */
  hasGap(): boolean;
  onStatus?(status: string): void;
}

export interface ClientOptions {
  gapTimeoutMs?: number;
  reconnectDelayMs?: number;
  socketFactory?: SocketFactory;
}

const defaultFactory: SocketFactory = (url) => new WebSocket(url) as unknown as SocketLike;

export class LiveClient {
  private socket: SocketLike | null = null;
  private gapTimer: ReturnType<typeof setTimeout> | null = null;
  private closed = false;

  constructor(
    private readonly baseUrl: string,
    private readonly hooks: ClientHooks,
    private readonly options: ClientOptions = {},
  ) {}

  connect(): void {
    this.closed = false;
    this.open(this.hooks.nextSeq());
  }

  private open(since: number): void {
    const factory = this.options.socketFactory ?? defaultFactory;
    const url = `${this.baseUrl}/ws?since=${since}`;
    this.hooks.onStatus?.(`connecting (since=${since})`);
    const socket = factory(url);
    this.socket = socket;
    socket.onmessage = (event) => this.handleLine(event.data);
    socket.onclose = () => {
      if (!this.closed) {
        this.scheduleReconnect();
      }
    };
    socket.onerror = () => {
      /* onclose follows */
    };
    this.hooks.onStatus?.("connected");
  }

  private handleLine(data: string): void {
    for (const line of data.split("\n")) {
      if (!line.trim()) continue;
      const record = parseLine(line);
      if (record.type === "trace") {
        this.hooks.onTrace(record.event);
        this.watchGap();
      } else if (record.type === "request") {
        this.hooks.onRequest(record.request);
      } else if (record.type === "ack") {
        this.hooks.onAck(record.ack);
      }
    }
  }

  /** A persistent seq gap means lost records: reconnect with a snapshot. */
  private watchGap(): void {
    if (!this.hooks.hasGap()) {
      if (this.gapTimer) {
        clearTimeout(this.gapTimer);
        this.gapTimer = null;
      }
      return;
    }
    if (this.gapTimer) return;
    const timeout = this.options.gapTimeoutMs ?? 3000;
    this.gapTimer = setTimeout(() => {
      this.gapTimer = null;
      if (this.hooks.hasGap() && !this.closed) {
        this.hooks.onStatus?.("seq gap persisted; reconnecting with snapshot");
        this.socket?.close();
        this.open(this.hooks.nextSeq());
      }
    }, timeout);
  }

  private scheduleReconnect(): void {
    const delay = this.options.reconnectDelayMs ?? 1000;
    setTimeout(() => {
      if (!this.closed) {
        this.open(this.hooks.nextSeq());
      }
    }, delay);
  }

  answer(response: InteractionResponseRecord): void {
    if (!this.socket) {
      throw new Error("not connected");
    }
    this.socket.send(JSON.stringify(response));
  }

  close(): void {
    this.closed = true;
    if (this.gapTimer) clearTimeout(this.gapTimer);
    this.socket?.close();
  }
}
