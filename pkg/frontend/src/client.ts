// WebSocket client: feeds the session reducer and notifies the page on
// every state change. Reconnection is a manual affordance (a button),
// matching the single-client contract of the server.

import { encodePrompt, parseServerLine, type ServerMessage } from "./protocol.js";
import {
  initialState,
  markPromptSent,
  reduce,
  setConnection,
  type SessionState,
} from "./session.js";

export class ConsoleClient {
  state: SessionState = initialState();
  private socket: WebSocket | null = null;
  private readonly log: ServerMessage[] = [];

  constructor(
    private readonly url: string,
    private readonly onChange: (state: SessionState) => void,
  ) {}

  connect(): void {
    this.socket = new WebSocket(this.url);
    this.socket.onopen = () => this.update(setConnection(this.state, "connected"));
    this.socket.onclose = () => this.update(setConnection(this.state, "disconnected"));
    this.socket.onerror = () => this.update(setConnection(this.state, "disconnected"));
    this.socket.onmessage = (event) => {
      for (const line of String(event.data).split("\n")) {
        if (!line.trim()) continue;
        const msg = parseServerLine(line);
        if (msg === null) {
          console.warn("skipping malformed message", line.slice(0, 120));
          continue;
        }
        this.log.push(msg);
        this.update(reduce(this.state, msg));
      }
    };
  }

  /** Returns false when the prompt was not sent (empty or disconnected). */
  submitPrompt(text: string): boolean {
    const trimmed = text.trim();
    if (!trimmed || this.state.connection !== "connected" || this.state.awaitingAck) {
      return false;
    }
    try {
      this.socket?.send(encodePrompt(trimmed));
    } catch {
      return false;
    }
    this.update(markPromptSent(this.state));
    return true;
  }

  recordedLog(): ServerMessage[] {
    return [...this.log];
  }

  private update(state: SessionState): void {
    this.state = state;
    this.onChange(state);
  }
}
