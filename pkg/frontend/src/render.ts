// Stick-figure and timeline drawing on 2D canvas contexts. Pure functions
// of (context, state slices) so tests can drive them with fake contexts.

import type { FramePayload } from "./protocol.js";
import type { TimelinePoint } from "./session.js";

export interface ChainViewport {
  width: number;
  height: number;
  scale: number; // pixels per meter
}

/** Map a chain point (meters, y up) to canvas pixels (y down), base centered. */
export function toCanvas(
  point: [number, number],
  vp: ChainViewport,
): [number, number] {
  return [vp.width / 2 + point[0] * vp.scale, vp.height / 2 - point[1] * vp.scale];
}

export function drawChain(
  ctx: CanvasRenderingContext2D,
  frame: FramePayload,
  vp: ChainViewport,
): void {
  ctx.clearRect(0, 0, vp.width, vp.height);
  const violating = new Set(frame.violations);
  let prev: [number, number] = toCanvas([0, 0], vp);
  ctx.lineWidth = 4;
  ctx.lineCap = "round";
  frame.endpoints.forEach((endpoint, link) => {
    const here = toCanvas(endpoint, vp);
    ctx.strokeStyle = violating.has(link) ? "#e44" : frame.source === "fallback" ? "#d90" : "#3a7";
    ctx.beginPath();
    ctx.moveTo(prev[0], prev[1]);
    ctx.lineTo(here[0], here[1]);
    ctx.stroke();
    ctx.fillStyle = "#445";
    ctx.beginPath();
    ctx.arc(here[0], here[1], 3, 0, 2 * Math.PI);
    ctx.fill();
    prev = here;
  });
  // base marker
  const base = toCanvas([0, 0], vp);
  ctx.fillStyle = "#222";
  ctx.fillRect(base[0] - 5, base[1] - 5, 10, 10);
}

export function drawTimeline(
  ctx: CanvasRenderingContext2D,
  points: TimelinePoint[],
  tauStab: number | null,
  width: number,
  height: number,
  windowS: number,
): void {
  ctx.clearRect(0, 0, width, height);
  if (points.length === 0) return;
  const tEnd = points[points.length - 1].t;
  const tStart = tEnd - windowS;
  const maxScore = Math.max(
    tauStab ?? 0,
    ...points.map((p) => p.score),
  ) * 1.2 || 1;
  const x = (t: number) => ((t - tStart) / windowS) * width;
  const y = (s: number) => height - (s / maxScore) * (height - 8) - 4;

  if (tauStab != null) {
    ctx.strokeStyle = "#c33";
    ctx.setLineDash([5, 4]);
    ctx.beginPath();
    ctx.moveTo(0, y(tauStab));
    ctx.lineTo(width, y(tauStab));
    ctx.stroke();
    ctx.setLineDash([]);
  }
  ctx.strokeStyle = "#36c";
  ctx.beginPath();
  points.forEach((p, i) => {
    if (i === 0) ctx.moveTo(x(p.t), y(p.score));
    else ctx.lineTo(x(p.t), y(p.score));
  });
  ctx.stroke();
  for (const p of points) {
    ctx.fillStyle = p.accept ? "#36c" : "#e44";
    ctx.beginPath();
    ctx.arc(x(p.t), y(p.score), 2.5, 0, 2 * Math.PI);
    ctx.fill();
  }
}
