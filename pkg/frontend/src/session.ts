/** Session state machine: one active request at a time, protocol-safe values. */

import {
  EstimateSummary,
  Protocol,
  ServiceError,
  SessionClient,
  SessionConfig,
} from "./api.js";

export type WidgetState =
  | { kind: "ternary"; pair: [string, string] }
  | { kind: "slider"; pair: [string, string]; min: number; max: number };

export type SessionStatus =
  | "idle"
  | "starting"
  | "question"
  | "submitting"
  | "done"
  | "error";

export interface SessionView {
  status: SessionStatus;
  sessionId?: string;
  questionText?: string;
  widget?: WidgetState;
  remaining?: number;
  estimate?: EstimateSummary;
  rangeMessage?: string;
  errorMessage?: string;
}

export function valueRange(protocol: Protocol): [number, number] {
  return protocol === "edge" ? [-1, 1] : [-10, 10];
}

export function inRange(protocol: Protocol, value: number): boolean {
  const [lo, hi] = valueRange(protocol);
  return Number.isInteger(value) && value >= lo && value <= hi;
}

type Listener = (view: SessionView) => void;

/**
 * Drives one elicitation session. All transitions funnel through private
 * helpers that hold the single-flight rule: while a request is out, every
 * other entry point is a no-op, so a double click can never produce a
 * second submission.
 */
export class SessionController {
  private view_: SessionView = { status: "idle" };
  private listeners: Listener[] = [];
  private lastFailed?: () => Promise<void>;

  constructor(
    private readonly client: SessionClient,
    readonly protocol: Protocol = "edge",
  ) {}

  get view(): SessionView {
    return { ...this.view_ };
  }

  subscribe(listener: Listener): void {
    this.listeners.push(listener);
  }

  private emit(patch: Partial<SessionView>): void {
    this.view_ = { ...this.view_, ...patch };
    for (const fn of this.listeners) fn(this.view);
  }

  async start(config: SessionConfig): Promise<void> {
    if (this.view_.status !== "idle" && this.view_.status !== "error") return;
    const attempt = async () => {
      this.emit({ status: "starting", errorMessage: undefined });
      const sessionId = await this.client.createSession({
        protocol: this.protocol,
        ...config,
      });
      this.emit({ sessionId });
      await this.advance(sessionId);
    };
    await this.guard(attempt);
  }

  /** Validate locally, then submit; out-of-range never reaches the wire. */
  async answer(value: number): Promise<void> {
    if (this.view_.status !== "question") return;
    if (!inRange(this.protocol, value)) {
      const [lo, hi] = valueRange(this.protocol);
      this.emit({ rangeMessage: `enter an integer between ${lo} and ${hi}` });
      return;
    }
    const sessionId = this.view_.sessionId!;
    const attempt = async () => {
      this.emit({ status: "submitting", rangeMessage: undefined });
      let summary: EstimateSummary;
      try {
        summary = await this.client.submitResponse(sessionId, value);
      } catch (err) {
        if (err instanceof ServiceError && err.status === 422) {
          this.emit({ status: "question", rangeMessage: err.message });
          return;
        }
        throw err;
      }
      this.emit({ estimate: summary, remaining: summary.remaining });
      if (summary.remaining === 0) {
        await this.finish(sessionId);
      } else {
        await this.advance(sessionId);
      }
    };
    await this.guard(attempt);
  }

  /** Re-run the step that last failed (start or advance), if any. */
  async retry(): Promise<void> {
    if (this.view_.status !== "error" || !this.lastFailed) return;
    await this.guard(this.lastFailed);
  }

  private async advance(sessionId: string): Promise<void> {
    try {
      const q = await this.client.nextQuery(sessionId);
      this.emit({
        status: "question",
        questionText: q.question_text,
        remaining: q.remaining,
        widget:
          this.protocol === "edge"
            ? { kind: "ternary", pair: q.pair }
            : { kind: "slider", pair: q.pair, min: -10, max: 10 },
      });
    } catch (err) {
      if (err instanceof ServiceError && err.errorCode === "SessionExhausted") {
        await this.finish(sessionId);
        return;
      }
      throw err;
    }
  }

  private async finish(sessionId: string): Promise<void> {
    const estimate = await this.client.getEstimate(sessionId);
    this.emit({
      status: "done",
      estimate,
      questionText: undefined,
      widget: undefined,
    });
  }

  private async guard(attempt: () => Promise<void>): Promise<void> {
    try {
      await attempt();
      this.lastFailed = undefined;
    } catch (err) {
      this.lastFailed = attempt;
      const message =
        err instanceof ServiceError
          ? `${err.errorCode}: ${err.message}`
          : err instanceof Error
            ? err.message
            : String(err);
      this.emit({ status: "error", errorMessage: message, widget: undefined });
    }
  }
}
