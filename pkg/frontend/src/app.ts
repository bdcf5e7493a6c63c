/**
 * Browser entry point: fetches the served spec, renders the layered topology
 * as SVG, follows the live trace (status colors, edge payloads), and hosts
 * the interaction panel for pending requests.
 */

import { LiveClient } from "./client.js";
import { computeDelta, deleteNodeEdit, isEmptyDelta } from "./diff.js";
import { computeLayout, Layout } from "./layout.js";
import {
  applyEvent,
  bufferedGap,
  createViewModel,
  registerRequest,
  STATUS_COLORS,
  ViewModel,
} from "./viewModel.js";
import { SpecDoc } from "./wire.js";

const NODE_W = 132;
const NODE_H = 48;
const SVG_NS = "http://www.w3.org/2000/svg";

interface AppState {
  spec: SpecDoc;
  model: ViewModel;
  layout: Layout;
  client: LiveClient;
  selected: string | null;
}

let state: AppState | null = null;

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  attrs: Record<string, string> = {},
  text?: string,
): HTMLElementTagNameMap[K] {
  const element = document.createElement(tag);
  for (const [key, value] of Object.entries(attrs)) element.setAttribute(key, value);
  if (text !== undefined) element.textContent = text;
  return element;
}

function svgEl(tag: string, attrs: Record<string, string> = {}): SVGElement {
  const element = document.createElementNS(SVG_NS, tag);
  for (const [key, value] of Object.entries(attrs)) element.setAttribute(key, value);
  return element;
}

async function boot(): Promise<void> {
  const origin = window.location.origin;
  const response = await fetch(`${origin}/spec`);
  if (!response.ok) {
    banner(`cannot load spec: HTTP ${response.status}`);
    return;
  }
  const spec = (await response.json()) as SpecDoc;
  const model = createViewModel(spec);
  const layout = computeLayout(spec);
  const wsBase = origin.replace(/^http/, "ws");
  const client = new LiveClient(wsBase, {
    onTrace: (event) => {
      if (state) {
        applyEvent(state.model, event);
        render();
      }
    },
    onRequest: (request) => {
      if (state) {
        registerRequest(state.model, request);
        render();
      }
    },
    onAck: (ack) => {
      if (!state) return;
      if (ack.status !== "accepted" && ack.request_id) {
        const item = state.model.pending.get(ack.request_id);
        if (item) item.notice = `${ack.status}: ${ack.reason ?? ""}`;
      }
      render();
    },
    nextSeq: () => state?.model.nextSeq ?? 0,
    hasGap: () => (state ? bufferedGap(state.model) : false),
    onStatus: (status) => setConnectionStatus(status),
  });
  state = { spec, model, layout, client, selected: null };
  client.connect();
  render();
}

function banner(message: string): void {
  const box = document.getElementById("banner")!;
  box.textContent = message;
  box.style.display = message ? "block" : "none";
}

function setConnectionStatus(status: string): void {
  const box = document.getElementById("connection");
  if (box) box.textContent = status;
}

function render(): void {
  if (!state) return;
  renderGraph();
  renderDetails();
  renderPanel();
}

function renderGraph(): void {
  const { model, layout } = state!;
  const host = document.getElementById("graph")!;
  host.innerHTML = "";
  const svg = svgEl("svg", {
    width: String(layout.width + NODE_W),
    height: String(Math.max(layout.height + NODE_H, 240)),
  });

  for (const edge of model.edges) {
    const from = layout.positions.get(edge.source);
    const to = layout.positions.get(edge.target);
    if (!from || !to) continue;
    const line = svgEl("line", {
      x1: String(from.x + NODE_W / 2),
      y1: String(from.y),
      x2: String(to.x - NODE_W / 2),
      y2: String(to.y),
      stroke: edge.active ? "#0ea5e9" : "#cbd5e1",
      "stroke-width": edge.active ? "2.5" : "1.5",
    });
    line.addEventListener("click", () => {
      const payload = edge.lastPayload ? JSON.stringify(edge.lastPayload, null, 2) : "(nothing yet)";
      showDetail(
        `${edge.source} -> ${edge.target}` + (edge.label ? ` [${edge.label}]` : ""),
        `last message payload:\n${payload}`,
      );
    });
    svg.appendChild(line);
  }

  const sentinels = ["ENTRY", "EXIT"];
  for (const [id, position] of state!.layout.positions) {
    const node = model.nodes.get(id);
    const color = node ? STATUS_COLORS[node.status] : "#e2e8f0";
    const group = svgEl("g", { transform: `translate(${position.x - NODE_W / 2},${position.y - NODE_H / 2})` });
    group.appendChild(
      svgEl("rect", {
        width: String(NODE_W),
        height: String(NODE_H),
        rx: sentinels.includes(id) ? "24" : "8",
        fill: sentinels.includes(id) ? "#f1f5f9" : color,
        stroke: state!.selected === id ? "#1e293b" : "#64748b",
        "stroke-width": state!.selected === id ? "3" : "1",
      }),
    );
    const label = svgEl("text", {
      x: String(NODE_W / 2),
      y: String(NODE_H / 2 + 4),
      "text-anchor": "middle",
      "font-size": "12",
      "font-family": "monospace",
    });
    label.textContent = id;
    group.appendChild(label);
    if (node && node.iteration > 1) {
      const lap = svgEl("text", {
        x: String(NODE_W - 8),
        y: "12",
        "text-anchor": "end",
        "font-size": "10",
      });
      lap.textContent = `#${node.iteration}`;
      group.appendChild(lap);
    }
    group.addEventListener("click", () => {
      state!.selected = id;
      render();
    });
    svg.appendChild(group);
  }
  host.appendChild(svg);
}

function showDetail(title: string, body: string): void {
  const box = document.getElementById("details")!;
  box.innerHTML = "";
  box.appendChild(el("h3", {}, title));
  box.appendChild(el("pre", {}, body));
}

function renderDetails(): void {
  const { model, selected } = state!;
  if (!selected) return;
  const node = model.nodes.get(selected);
  if (!node) return;
  showDetail(
    `${node.id} (${node.kind}) - ${node.status}`,
    [
      node.instructions || "(no instructions)",
      "",
      `inputs:  ${node.inputFields.join(", ") || "-"}`,
      `outputs: ${node.outputFields.join(", ") || "-"}`,
    ].join("\n"),
  );
}

function renderPanel(): void {
  const { model, client, spec } = state!;
  const host = document.getElementById("panel")!;
  host.innerHTML = "";
  host.appendChild(el("h3", {}, `Pending interactions (${model.pending.size})`));
  for (const item of model.pending.values()) {
    const card = el("div", { class: "card" });
    card.appendChild(el("strong", {}, `${item.nodeId} [${item.schema}]`));
    card.appendChild(el("pre", {}, item.prompt));
    if (item.notice) card.appendChild(el("p", { class: "notice" }, item.notice));

    const draft = el("textarea", { rows: "3", placeholder: "feedback or edited artifact JSON" });
    draft.value = item.replyDraft;
    draft.addEventListener("input", () => {
      item.replyDraft = draft.value;
    });
    card.appendChild(draft);

    const actions = el("div", { class: "actions" });
    if (item.schema !== "free_text") {
      const accept = el("button", {}, "Accept");
      accept.addEventListener("click", () => client.answer({ request_id: item.requestId, payload: "accept" }));
      actions.appendChild(accept);
    }
    const send = el("button", {}, "Send reply");
    send.addEventListener("click", () => {
      let payload: unknown = item.replyDraft;
      try {
        payload = JSON.parse(item.replyDraft);
      } catch {
        /* plain feedback text */
      }
      client.answer({ request_id: item.requestId, payload });
    });
    actions.appendChild(send);

    if (item.schema === "spec_edit") {
      const dropButton = el("button", {}, "Delete selected node");
      dropButton.addEventListener("click", () => {
        if (!state!.selected || !model.nodes.has(state!.selected)) {
          item.notice = "select a workflow node first";
          render();
          return;
        }
        const delta = computeDelta(spec, deleteNodeEdit(spec, state!.selected));
        if (!isEmptyDelta(delta)) {
          client.answer({ request_id: item.requestId, payload: delta as unknown as Record<string, unknown> });
        }
      });
      actions.appendChild(dropButton);
    }
    card.appendChild(actions);
    host.appendChild(card);
  }
  const runControls = el("div", { class: "actions" });
  const startButton = el("button", {}, "Start run");
  startButton.addEventListener("click", async () => {
    const response = await fetch(`${window.location.origin}/runs`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({}),
    });
    banner(response.ok ? "" : `run not started: HTTP ${response.status}`);
  });
  runControls.appendChild(startButton);
  host.appendChild(runControls);
}

if (typeof window !== "undefined" && typeof document !== "undefined" && document.getElementById("graph")) {
  void boot();
}

export { boot };
