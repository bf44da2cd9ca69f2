// SessionModel: a pure reducer over the wire stream. The panels render
// exclusively from this state, so replaying a recorded message log
// reproduces the identical final panel state.

import type { FramePayload, GateReportMessage, ServerMessage } from "./protocol.js";

export const TIMELINE_WINDOW_S = 60; // rolling window for the R timeline
export const FRAME_BUFFER = 400;

export interface TimelinePoint {
  t: number;
  score: number;
  accept: boolean;
}

export interface MetricsFooter {
  frames: number;
  jv_rate: number;
  sc_rate: number;
  mpjpe_mm: number;
  fallbacks: number;
}

export type Connection = "idle" | "connected" | "disconnected";

export interface SessionState {
  connection: Connection;
  currentPrompt: string | null;
  awaitingAck: boolean;
  gateReports: GateReportMessage[]; // reports for the current prompt
  frames: FramePayload[]; // rolling frame buffer
  lastFrame: FramePayload | null;
  generatorFrames: number; // count since last prompt
  fallbackFrames: number;
  timeline: TimelinePoint[];
  tauStab: number | null;
  fallbackActive: boolean;
  metrics: MetricsFooter | null;
  warnings: string[];
  lastSeq: number;
}

export function initialState(): SessionState {
  return {
    connection: "idle",
    currentPrompt: null,
    awaitingAck: false,
    gateReports: [],
    frames: [],
    lastFrame: null,
    generatorFrames: 0,
    fallbackFrames: 0,
    timeline: [],
    tauStab: null,
    fallbackActive: false,
    metrics: null,
    warnings: [],
    lastSeq: 0,
  };
}

function withWarning(state: SessionState, warning: string): SessionState {
  return { ...state, warnings: [...state.warnings, warning] };
}

/** Apply one server message; never mutates the input state. */
export function reduce(state: SessionState, msg: ServerMessage): SessionState {
  let next: SessionState = { ...state };
  if (msg.seq <= state.lastSeq) {
    next = withWarning(next, `stale sequence number ${msg.seq} (last ${state.lastSeq})`);
  } else if (state.lastSeq > 0 && msg.seq !== state.lastSeq + 1) {
    next = withWarning(next, `sequence gap: expected ${state.lastSeq + 1}, got ${msg.seq}`);
  }
  next.lastSeq = Math.max(state.lastSeq, msg.seq);

  switch (msg.type) {
    case "ack":
      return {
        ...next,
        currentPrompt: msg.prompt,
        awaitingAck: false,
        gateReports: [],
        generatorFrames: 0,
        fallbackFrames: 0,
      };
    case "gate_report": {
      const timeline =
        msg.stage === 2
          ? trimTimeline(
              [...next.timeline, { t: msg.t, score: msg.score, accept: msg.accept }],
            )
          : next.timeline;
      return {
        ...next,
        gateReports: [...next.gateReports, msg],
        timeline,
        tauStab: msg.stage === 2 && msg.threshold != null ? msg.threshold : next.tauStab,
      };
    }
    case "frames": {
      const frames = [...next.frames, ...msg.frames].slice(-FRAME_BUFFER);
      const generator = msg.frames.filter((f) => f.source === "generator").length;
      const fallback = msg.frames.length - generator;
      const sawGenerator = generator > 0;
      return {
        ...next,
        frames,
        lastFrame: frames[frames.length - 1] ?? next.lastFrame,
        generatorFrames: next.generatorFrames + generator,
        fallbackFrames: next.fallbackFrames + fallback,
        // the banner stays up until generator frames flow again
        fallbackActive: next.fallbackActive && !sawGenerator,
      };
    }
    case "fallback":
      return { ...next, fallbackActive: true };
    case "metrics":
      return {
        ...next,
        metrics: {
          frames: msg.frames,
          jv_rate: msg.jv_rate,
          sc_rate: msg.sc_rate,
          mpjpe_mm: msg.mpjpe_mm,
          fallbacks: msg.fallbacks,
        },
      };
    case "error":
      return withWarning(next, `server error: ${msg.message}`);
    default:
      return withWarning(next, `unhandled message type ${(msg as { type: string }).type}`);
  }
}

function trimTimeline(points: TimelinePoint[]): TimelinePoint[] {
  if (points.length === 0) return points;
  const horizon = points[points.length - 1].t - TIMELINE_WINDOW_S;
  return points.filter((p) => p.t >= horizon);
}

export function setConnection(state: SessionState, connection: Connection): SessionState {
  return { ...state, connection };
}

export function markPromptSent(state: SessionState): SessionState {
  return { ...state, awaitingAck: true };
}

/** Replay a recorded NDJSON log against a fresh state. */
export function replay(messages: ServerMessage[]): SessionState {
  let state = initialState();
  for (const msg of messages) {
    state = reduce(state, msg);
  }
  return state;
}
