import { readFileSync } from "node:fs";
import { join } from "node:path";

import { SpecDoc, TraceEventRecord } from "../src/wire.js";

const FIXTURES = join(__dirname, "fixtures");

export function loadSpec(): SpecDoc {
  return JSON.parse(readFileSync(join(FIXTURES, "weekly_spec.json"), "utf-8"));
}

export function loadTrace(): TraceEventRecord[] {
  return readFileSync(join(FIXTURES, "weekly_trace.ndjson"), "utf-8")
    .split("\n")
    .filter((line) => line.trim())
    .map((line) => JSON.parse(line) as TraceEventRecord);
}
