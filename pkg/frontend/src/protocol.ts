// Wire protocol types: newline-delimited JSON messages, mirroring the
// server's schema. Unknown fields are ignored; unknown types are surfaced
// to the caller as null so the UI can warn without crashing.

export interface AckMessage {
  type: "ack";
  seq: number;
  prompt: string;
}

export interface GateReportMessage {
  type: "gate_report";
  seq: number;
  stage: number;
  accept: boolean;
  score: number;
  reason: string | null;
  t: number;
  threshold?: number | null;
}

export interface FramePayload {
  frame: number;
  source: "generator" | "fallback";
  reference: number[];
  executed: number[];
  endpoints: [number, number][];
  violations: number[];
}

export interface FramesMessage {
  type: "frames";
  seq: number;
  frames: FramePayload[];
}

export interface FallbackMessage {
  type: "fallback";
  seq: number;
  duration_s: number;
}

export interface MetricsMessage {
  type: "metrics";
  seq: number;
  frames: number;
  jv_rate: number;
  sc_rate: number;
  mpjpe_mm: number;
  fallbacks: number;
}

export interface ErrorMessage {
  type: "error";
  seq: number;
  message: string;
}

export type ServerMessage =
  | AckMessage
  | GateReportMessage
  | FramesMessage
  | FallbackMessage
  | MetricsMessage
  | ErrorMessage;

export interface PromptMessage {
  type: "prompt";
  text: string;
}

const SERVER_TYPES = new Set([
  "ack",
  "gate_report",
  "frames",
  "fallback",
  "metrics",
  "error",
]);

/** Parse one NDJSON line; returns null for unknown types or bad JSON. */
export function parseServerLine(line: string): ServerMessage | null {
  let doc: unknown;
  try {
    doc = JSON.parse(line);
  } catch {
    return null;
  }
  if (typeof doc !== "object" || doc === null) return null;
  const type = (doc as { type?: unknown }).type;
  if (typeof type !== "string" || !SERVER_TYPES.has(type)) return null;
  return doc as ServerMessage;
}

export function encodePrompt(text: string): string {
  return JSON.stringify({ type: "prompt", text } satisfies PromptMessage) + "\n";
}
