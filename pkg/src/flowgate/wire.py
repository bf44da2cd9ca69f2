"""Wire protocol: newline-delimited JSON messages over the serve channel.

Every message carries a monotone per-session sequence number. Unknown
fields are ignored on input; unknown message types are rejected with an
`error` message. The schema below is the single source of truth for both
the server and the browser console.
"""

from __future__ import annotations

import json
from typing import Literal

from pydantic import BaseModel, ConfigDict, ValidationError


class WireModel(BaseModel):
    model_config = ConfigDict(extra="ignore")

    def to_line(self) -> str:
        return json.dumps(self.model_dump(), allow_nan=False) + "\n"


class PromptMessage(WireModel):
    type: Literal["prompt"] = "prompt"
    seq: int = 0
    text: str


class AckMessage(WireModel):
    type: Literal["ack"] = "ack"
    seq: int
    prompt: str


class GateReportMessage(WireModel):
    type: Literal["gate_report"] = "gate_report"
    seq: int
    stage: int
    accept: bool
    score: float
    reason: str | None = None
    t: float
    threshold: float | None = None  # stage-2 reports carry tau_stab for the UI


class FramePayload(WireModel):
    frame: int
    source: Literal["generator", "fallback"]
    reference: list[float]
    executed: list[float]
    endpoints: list[list[float]]  # FK link endpoints of the executed pose
    violations: list[int]  # joints whose reference frame breaks a limit


class FramesMessage(WireModel):
    type: Literal["frames"] = "frames"
    seq: int
    frames: list[FramePayload]


class FallbackMessage(WireModel):
    type: Literal["fallback"] = "fallback"
    seq: int
    duration_s: float


class MetricsMessage(WireModel):
    type: Literal["metrics"] = "metrics"
    seq: int
    frames: int
    jv_rate: float
    sc_rate: float
    mpjpe_mm: float
    fallbacks: int


class ErrorMessage(WireModel):
    type: Literal["error"] = "error"
    seq: int
    message: str


class ProtocolError(ValueError):
    """Malformed inbound message or unknown type."""


_INBOUND = {"prompt": PromptMessage}


def parse_inbound(line: str) -> PromptMessage:
    """Decode one client JSON line; unknown types and bad payloads raise."""
    try:
        doc = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ProtocolError("message must be a JSON object")
    msg_type = doc.get("type")
    model = _INBOUND.get(msg_type)
    if model is None:
        raise ProtocolError(f"unknown message type {msg_type!r}")
    try:
        return model.model_validate(doc)
    except ValidationError as exc:
        raise ProtocolError(f"bad {msg_type} payload: {exc}") from exc
