// Page bootstrap: wires the client, panels, and playback loop together.

import { ConsoleClient } from "./client.js";
import { drawChain, drawTimeline, type ChainViewport } from "./render.js";
import { TIMELINE_WINDOW_S, type SessionState } from "./session.js";

const $ = <T extends HTMLElement>(id: string) => document.getElementById(id) as T;

const chainCanvas = $<HTMLCanvasElement>("chain");
const timelineCanvas = $<HTMLCanvasElement>("timeline");
const promptInput = $<HTMLInputElement>("prompt");
const sendButton = $<HTMLButtonElement>("send");
const reconnectButton = $<HTMLButtonElement>("reconnect");
const gatePanel = $<HTMLDivElement>("gates");
const banner = $<HTMLDivElement>("banner");
const footer = $<HTMLDivElement>("metrics");
const statusEl = $<HTMLSpanElement>("status");
const warningsEl = $<HTMLDivElement>("warnings");

const viewport: ChainViewport = {
  width: chainCanvas.width,
  height: chainCanvas.height,
  scale: chainCanvas.width / 5.2, // the 2.4 m chain fits with margin
};

const wsUrl =
  new URLSearchParams(location.search).get("server") ??
  `ws://${location.host || "127.0.0.1:8321"}/ws`;

let playbackQueue: SessionState["frames"] = [];
let playbackIndex = 0;

function renderGates(state: SessionState): void {
  const stages = [1, 2, 3];
  gatePanel.innerHTML = stages
    .map((stage) => {
      const report = state.gateReports.filter((r) => r.stage === stage).at(-1);
      const cls = report == null ? "pending" : report.accept ? "accept" : "reject";
      const score = report == null ? "–" : report.score.toPrecision(3);
      const reason = report?.reason ? ` (${report.reason})` : "";
      return `<div class="stage ${cls}">stage ${stage}<br><small>${score}${reason}</small></div>`;
    })
    .join("");
}

function renderState(state: SessionState): void {
  statusEl.textContent = state.connection;
  statusEl.className = state.connection;
  reconnectButton.hidden = state.connection !== "disconnected";
  sendButton.disabled = state.connection !== "connected" || state.awaitingAck;
  promptInput.disabled = sendButton.disabled;
  renderGates(state);
  banner.hidden = !state.fallbackActive;
  if (state.metrics) {
    footer.textContent =
      `frames ${state.metrics.frames} | JV ${state.metrics.jv_rate.toFixed(2)}% | ` +
      `SC ${state.metrics.sc_rate.toFixed(2)}% | MPJPE ${state.metrics.mpjpe_mm.toFixed(1)} mm | ` +
      `fallbacks ${state.metrics.fallbacks}`;
  }
  warningsEl.textContent = state.warnings.slice(-3).join(" · ");
  drawTimeline(
    timelineCanvas.getContext("2d")!,
    state.timeline,
    state.tauStab,
    timelineCanvas.width,
    timelineCanvas.height,
    TIMELINE_WINDOW_S,
  );
  playbackQueue = state.frames;
}

const client = new ConsoleClient(wsUrl, renderState);
client.connect();

sendButton.onclick = () => {
  if (client.submitPrompt(promptInput.value)) promptInput.value = "";
};
promptInput.onkeydown = (event) => {
  if (event.key === "Enter") sendButton.click();
};
reconnectButton.onclick = () => {
  client.connect();
};

// 25 fps playback of whatever frames have streamed in; on disconnect the
// last frame simply stays up
setInterval(() => {
  if (playbackQueue.length === 0) return;
  playbackIndex = Math.min(playbackIndex + 1, playbackQueue.length - 1);
  const frame = playbackQueue[playbackIndex] ?? playbackQueue.at(-1);
  if (frame) drawChain(chainCanvas.getContext("2d")!, frame, viewport);
}, 40);
