/**
 * Deterministic layered layout: ENTRY on the left, EXIT on the right, every
 * workflow node in the column given by its longest-path depth from ENTRY.
 * Fixed geometry so rendered topologies are reproducible in tests.
 */

import { ENTRY, EXIT, SpecDoc } from "./wire.js";

export const COLUMN_WIDTH = 180;
export const ROW_HEIGHT = 90;
export const MARGIN_X = 60;
export const MARGIN_Y = 50;

export interface Position {
  x: number;
  y: number;
  layer: number;
}

export interface Layout {
  positions: Map<string, Position>;
  layers: string[][]; // layers[0] = [ENTRY], last = [EXIT]
  width: number;
  height: number;
}

export function layerByLongestPath(spec: SpecDoc): Map<string, number> {
  const ids = spec.nodes.map((n) => n.id);
  const incoming = new Map<string, string[]>(ids.map((id) => [id, []]));
  const entryTargets: string[] = [];
  for (const edge of spec.edges) {
    if (edge.source === edge.target) continue; // self-loops carry iteration, not depth
    if (edge.source === ENTRY && incoming.has(edge.target)) {
      entryTargets.push(edge.target);
    } else if (incoming.has(edge.source) && incoming.has(edge.target)) {
      incoming.get(edge.target)!.push(edge.source);
    }
  }
  const depth = new Map<string, number>();
  for (const id of entryTargets) depth.set(id, 0);
  let changed = true;
  let guard = 0;
  while (changed && guard <= ids.length + 2) {
    changed = false;
    guard += 1;
    for (const id of ids) {
      const parents = incoming.get(id)!;
      if (!parents.length && !depth.has(id)) continue;
      const known = parents.filter((p) => depth.has(p));
      if (parents.length && known.length === parents.length) {
        const next = 1 + Math.max(...known.map((p) => depth.get(p)!));
        if (!depth.has(id) || next > depth.get(id)!) {
          depth.set(id, next);
          changed = true;
        }
      }
    }
  }
  // anything unreachable (invalid specs only) parks in column 0
  for (const id of ids) if (!depth.has(id)) depth.set(id, 0);
  return depth;
}

export function computeLayout(spec: SpecDoc): Layout {
  const depth = layerByLongestPath(spec);
  const maxDepth = Math.max(-1, ...depth.values());
  const layers: string[][] = [[ENTRY]];
  for (let i = 0; i <= maxDepth; i += 1) {
    const layer = spec.nodes
      .map((n) => n.id)
      .filter((id) => depth.get(id) === i)
      .sort();
    layers.push(layer);
  }
  layers.push([EXIT]);

  const positions = new Map<string, Position>();
  layers.forEach((layer, layerIndex) => {
    layer.forEach((id, rowIndex) => {
      positions.set(id, {
        x: MARGIN_X + layerIndex * COLUMN_WIDTH,
        y: MARGIN_Y + rowIndex * ROW_HEIGHT,
        layer: layerIndex,
      });
    });
  });
  const tallest = Math.max(...layers.map((layer) => layer.length));
  return {
    positions,
    layers,
    width: MARGIN_X * 2 + (layers.length - 1) * COLUMN_WIDTH,
    height: MARGIN_Y * 2 + Math.max(0, tallest - 1) * ROW_HEIGHT,
  };
}
