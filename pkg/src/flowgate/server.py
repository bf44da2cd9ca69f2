"""FastAPI service: the streaming episode behind a WebSocket endpoint.

Single-client by design: the service demonstrates the interaction loop.
Each WebSocket text frame carries one newline-terminated JSON message (the
same NDJSON grammar as the wire module). The browser console under
`frontend/` is served from /ui when its build output exists.
"""

from __future__ import annotations

import os

import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect
from pydantic import BaseModel

from .kinematics import link_endpoints
from .runtime import Bundle, EpisodeRunner, EpisodeTrace
from .wire import (
    AckMessage,
    ErrorMessage,
    FallbackMessage,
    FramePayload,
    FramesMessage,
    GateReportMessage,
    MetricsMessage,
    ProtocolError,
    parse_inbound,
)

FRAMES_PER_PROMPT = 25  # 1 s of reference per submitted prompt
FRAMES_PER_BATCH = 5
METRICS_EVERY = 25


class HealthResponse(BaseModel):
    status: str
    n_joints: int
    gates_on: bool
    variant: str


class _Session:
    """One live episode bound to one WebSocket connection."""

    def __init__(self, bundle: Bundle, gates_on: bool, variant: str, seed: int):
        self.bundle = bundle
        self.seq = 0
        self.outbox: list[str] = []
        self.frame_buffer: list[FramePayload] = []
        trace = EpisodeTrace()
        trace.on_frame = self._on_frame
        trace.on_decision = self._on_decision
        trace.on_fallback = self._on_fallback
        self.trace = trace
        self.runner = EpisodeRunner(
            bundle, variant=variant, gates_on=gates_on, seed=seed, trace=trace
        )

    def next_seq(self) -> int:
        self.seq += 1
        return self.seq

    def _send(self, message) -> None:
        self.outbox.append(message.to_line())

    def _flush_frames(self) -> None:
        if self.frame_buffer:
            self._send(FramesMessage(seq=self.next_seq(), frames=self.frame_buffer))
            self.frame_buffer = []

    def _on_decision(self, decision) -> None:
        self._flush_frames()
        threshold = None
        if decision.stage == 2 and self.bundle.probe is not None:
            threshold = self.bundle.probe.tau_stab
        self._send(
            GateReportMessage(
                seq=self.next_seq(), stage=decision.stage, accept=decision.accept,
                score=decision.score, reason=decision.reason, t=decision.t,
                threshold=threshold,
            )
        )

    def _on_fallback(self, duration_s: float) -> None:
        self._flush_frames()
        self._send(FallbackMessage(seq=self.next_seq(), duration_s=duration_s))

    def _on_frame(self, frame_idx: int, reference: np.ndarray, executed: np.ndarray, source: str) -> None:
        chain = self.bundle.chain
        lo, hi = np.asarray(chain.joint_min), np.asarray(chain.joint_max)
        violations = [int(j) for j in np.nonzero((reference < lo) | (reference > hi))[0]]
        endpoints = link_endpoints(chain, executed)
        self.frame_buffer.append(
            FramePayload(
                frame=frame_idx,
                source=source,
                reference=[float(v) for v in reference],
                executed=[float(v) for v in executed],
                endpoints=[[float(x), float(y)] for x, y in endpoints],
                violations=violations,
            )
        )
        if len(self.frame_buffer) >= FRAMES_PER_BATCH:
            self._flush_frames()
        if (frame_idx + 1) % METRICS_EVERY == 0:
            self._emit_metrics()

    def _emit_metrics(self) -> None:
        if len(self.trace.reference) == getattr(self, "_last_metrics_frames", -1):
            return
        self._last_metrics_frames = len(self.trace.reference)
        self._flush_frames()
        report = self.runner.finish()
        self._send(
            MetricsMessage(
                seq=self.next_seq(),
                frames=len(self.trace.reference),
                jv_rate=report.jv_rate,
                sc_rate=report.sc_rate,
                mpjpe_mm=report.mpjpe_mm,
                fallbacks=self.trace.fallbacks,
            )
        )

    def handle_prompt(self, text: str) -> list[str]:
        """Run one prompt horizon; returns the NDJSON lines to send."""
        self.outbox = []
        self._send(AckMessage(seq=self.next_seq(), prompt=text))
        self.runner.set_prompt(text)
        self.runner.advance(FRAMES_PER_PROMPT)
        self._flush_frames()
        self._emit_metrics()
        return self.outbox

    def protocol_error(self, message: str) -> str:
        return ErrorMessage(seq=self.next_seq(), message=message).to_line()


def build_app(bundle: Bundle, gates_on: bool = True, variant: str = "student") -> FastAPI:
    app = FastAPI(title="flowgate", version="0.1.0")

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(
            status="ok", n_joints=bundle.chain.n_joints, gates_on=gates_on, variant=variant
        )

    @app.get("/config")
    def config_echo() -> dict:
        from .config import format_config

        return {"config": format_config(bundle.config)}

    @app.websocket("/ws")
    async def ws_endpoint(websocket: WebSocket):
        await websocket.accept()
        session = _Session(bundle, gates_on, variant, seed=bundle.config.run.seed)
        try:
            while True:
                raw = await websocket.receive_text()
                for line in raw.splitlines():
                    if not line.strip():
                        continue
                    try:
                        msg = parse_inbound(line)
                    except ProtocolError as exc:
                        await websocket.send_text(session.protocol_error(str(exc)))
                        # protocol violation resets the session
                        session = _Session(bundle, gates_on, variant, seed=bundle.config.run.seed)
                        continue
                    for out_line in session.handle_prompt(msg.text):
                        await websocket.send_text(out_line)
        except WebSocketDisconnect:
            return

    ui_dir = os.path.join(os.getcwd(), "frontend", "dist")
    if os.path.isdir(ui_dir):
        from fastapi.staticfiles import StaticFiles

        app.mount("/ui", StaticFiles(directory=ui_dir, html=True), name="ui")
    return app
